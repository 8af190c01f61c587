"""CSV tables and SVG heatmaps for CKA matrices and surgery results.

Every text artifact starts with a provenance line carrying the tool version
and the config digest, and numbers are written with 9 significant digits so
identical inputs give byte-identical files.
"""
import csv
import io
import re

import numpy as np

from . import __version__
from .cka import CKAMatrix
from .encoder import atomic_write_bytes
from .errors import FormatError

UNDEFINED = "undefined"
# linear ramp endpoints for value 0 and value 1; red spans the full 0..255
RAMP_LOW = (255, 245, 235)
RAMP_HIGH = (0, 40, 120)
UNDEFINED_FILL = "url(#hatch)"
CELL = 28
MARGIN = 44


def fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return "nan" if np.isnan(v) else f"{v:.9g}"


def provenance(config_digest):
    return f"# layercka {__version__} config_digest={config_digest}"


def write_text(path, text):
    atomic_write_bytes(path, text.encode())


def table_csv(columns, rows, config_digest):
    buf = io.StringIO()
    buf.write(provenance(config_digest) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------------
# CKA matrices


def cka_csv(m, config_digest):
    buf = io.StringIO()
    buf.write(provenance(config_digest) + "\n")
    buf.write(f"# rows_model={m.rows_model} cols_model={m.cols_model} n_examples={m.n_examples}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer"] + list(range(m.shape[1])))
    for i in range(m.shape[0]):
        w.writerow([i] + [fmt(m.scores[i, j]) if m.defined[i, j] else UNDEFINED
                          for j in range(m.shape[1])])
    return buf.getvalue()


def write_cka_csv(m, path, config_digest="none"):
    write_text(path, cka_csv(m, config_digest))


def read_cka_csv(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            meta.update(re.findall(r"(\w+)=(\S+)", line))
        elif line:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or rows[0][0] != "layer":
        raise FormatError(f"{path}: missing 'layer' header row")
    try:
        cells = [[(float("nan") if c == UNDEFINED else float(c)) for c in r[1:]] for r in rows[1:]]
        scores = np.array(cells, dtype=np.float64).reshape(len(rows) - 1, len(rows[0]) - 1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    defined = ~np.isnan(scores)
    scores[~defined] = 0.0
    return CKAMatrix(meta.get("rows_model", "rows"), meta.get("cols_model", "cols"), scores,
                     int(meta.get("n_examples", 0)), defined)


# --------------------------------------------------------------------------
# heatmaps


def ramp_color(value):
    """Fill color for a value in [0, 1] (clipped)."""
    t = min(max(float(value), 0.0), 1.0)
    rgb = [round(lo + (hi - lo) * t) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def color_value(fill):
    """Invert ramp_color using the red channel (full 0..255 span)."""
    red = int(fill[1:3], 16)
    return (red - RAMP_LOW[0]) / (RAMP_HIGH[0] - RAMP_LOW[0])


def heatmap_svg(m, scale="fixed", title=None, config_digest="none"):
    """SVG heatmap, one <rect class="cell"> per entry.

    Rows are drawn bottom-up so layer 0 sits at the origin.  ``fixed`` maps
    [0, 1] onto the ramp for every plot; ``per-plot`` stretches the ramp over
    this matrix's defined range.
    """
    if scale not in ("fixed", "per-plot"):
        raise ValueError("scale must be 'fixed' or 'per-plot'")
    n_rows, n_cols = m.shape
    lo, hi = 0.0, 1.0
    if scale == "per-plot" and m.defined.any():
        vals = m.scores[m.defined]
        lo, hi = float(vals.min()), float(vals.max())
    span = hi - lo if hi > lo else 1.0
    width = MARGIN + n_cols * CELL + 10
    height = MARGIN + n_rows * CELL + 30
    title = title or f"{m.rows_model} vs {m.cols_model}"
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f"<!-- {provenance(config_digest)[2:]} scale={scale} -->",
        '<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" '
        'patternTransform="rotate(45)"><rect width="6" height="6" fill="#bbbbbb"/>'
        '<line x1="0" y1="0" x2="0" y2="6" stroke="#777777" stroke-width="2"/></pattern></defs>',
        f'<text x="{MARGIN}" y="14" font-size="12">{_escape(title)}</text>',
    ]
    top = 22
    for i in range(n_rows):
        y = top + (n_rows - 1 - i) * CELL
        for j in range(n_cols):
            x = MARGIN + j * CELL
            if m.defined[i, j]:
                fill = ramp_color((m.scores[i, j] - lo) / span)
            else:
                fill = UNDEFINED_FILL
            out.append(f'<rect class="cell" data-row="{i}" data-col="{j}" x="{x}" y="{y}" '
                       f'width="{CELL}" height="{CELL}" fill="{fill}"/>')
        out.append(f'<text x="{MARGIN - 6}" y="{y + CELL // 2 + 4}" text-anchor="end">{i}</text>')
    base = top + n_rows * CELL + 14
    for j in range(n_cols):
        out.append(f'<text x="{MARGIN + j * CELL + CELL // 2}" y="{base}" text-anchor="middle">{j}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_heatmap(m, path, scale="fixed", title=None, config_digest="none"):
    write_text(path, heatmap_svg(m, scale, title, config_digest))


_RECT = re.compile(r'<rect class="cell" data-row="(\d+)" data-col="(\d+)"[^>]*fill="([^"]+)"')


def parse_heatmap(svg_text):
    """Recover {(row, col): value or None} from a fixed-scale heatmap."""
    out = {}
    for i, j, fill in _RECT.findall(svg_text):
        out[int(i), int(j)] = None if fill == UNDEFINED_FILL else color_value(fill)
    return out

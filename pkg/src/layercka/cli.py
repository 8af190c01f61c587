"""Command line entry point: ``layercka <subcommand> ...``.

Each subcommand wraps one module operation.  Stage inputs (corpus, task
splits, seeds) are derived from ``--config`` exactly as ``run`` derives them,
so a checkpoint produced by ``pretrain`` is byte-identical to the one a full
run writes.  Inputs are never modified.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import __version__
from . import activations as act
from . import cka, pipeline, report, structure, surgery, training
from . import encoder as enc
from .errors import LayerCKAError

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def _layers(text):
    try:
        i, j = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected i:j, got {text!r}") from None
    if i > j:
        raise argparse.ArgumentTypeError(f"empty layer range {text!r}")
    return i, j


def _config(args):
    if args.config is None:
        cfg = pipeline.ExperimentConfig()
    else:
        cfg = pipeline.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _task(args, cfg):
    return args.task or cfg.tasks[0].kind


def _write_log(rows, path, digest):
    report.write_text(path, report.provenance(digest) + "\n" + training.log_csv(rows))


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --------------------------------------------------------------------------


def cmd_pretrain(args):
    cfg = _config(args)
    objective = args.objective or cfg.objective
    out = _ensure_dir(args.out or cfg.out_dir)
    rows = []
    params = training.pretrain(pipeline.initial_params(cfg), pipeline.build_corpus(cfg), objective,
                               pipeline.pretrain_config(cfg, objective), rows)
    name = "orig" if objective == cfg.objective else f"orig_{objective}"
    path = os.path.join(out, f"{name}.enck")
    enc.write_checkpoint(params, path)
    _write_log(rows, os.path.join(out, f"{name}.log.csv"), pipeline.config_digest(cfg))
    print(path)


def cmd_finetune(args):
    _need(args, "checkpoint")
    cfg = _config(args)
    kind = _task(args, cfg)
    out = _ensure_dir(args.out or cfg.out_dir)
    train_set, val_set = pipeline.task_splits(cfg, kind)
    rows = []
    ft = training.finetune(enc.read_checkpoint(args.checkpoint), train_set,
                           pipeline.finetune_config(cfg, args.restart), val_set, rows)
    path = os.path.join(out, f"{kind}.ft{args.restart}.enck")
    enc.write_checkpoint(ft, path)
    _write_log(rows, os.path.join(out, f"{kind}.ft{args.restart}.log.csv"), pipeline.config_digest(cfg))
    print(path)


def cmd_extract(args):
    cfg = _config(args)
    kind = _task(args, cfg)
    _, val_set = pipeline.task_splits(cfg, kind)
    params = enc.read_checkpoint(args.checkpoint)
    label = args.label or os.path.splitext(os.path.basename(args.checkpoint))[0]
    acts = act.extract_cls(params, val_set, label, cfg.cka_max_examples)
    out = args.out or os.path.splitext(args.checkpoint)[0] + ".actv"
    act.write_activations(acts, out)
    print(out)


def cmd_cka(args):
    a = act.read_activations(args.a)
    b = act.read_activations(args.b)
    m = cka.cka_matrix(a, b)
    if args.layers is not None:
        m = _slice(m, *args.layers)
    text = report.cka_csv(m, args.digest)
    if args.out:
        report.write_text(args.out, text)
    else:
        sys.stdout.write(text)


def _slice(m, i, j):
    if not 0 <= i <= j < min(m.shape):
        raise UsageError(f"--layers {i}:{j} outside 0..{min(m.shape) - 1}")
    s = slice(i, j + 1)
    return cka.CKAMatrix(m.rows_model, m.cols_model, m.scores[s, s], m.n_examples, m.defined[s, s])


def cmd_detect_blocks(args):
    m = report.read_cka_csv(args.matrix)
    sub, keep = structure.defined_layers(m)
    split = structure.detect_block_split(sub)
    doc = {"split_layer": keep[split.split_index], "block_score": split.block_score,
           "layers": keep, "profile": [float(v) for v in split.profile]}
    if args.against:
        other = report.read_cka_csv(args.against)
        osub, okeep = structure.defined_layers(other)
        if okeep != keep:
            raise UsageError("matrices have different defined layers")
        doc["block_contrast"] = structure.block_contrast(sub, osub)
    print(json.dumps(doc, sort_keys=True))


def cmd_truncate(args):
    _need(args, "checkpoint", "orig")
    cfg = _config(args)
    kind = _task(args, cfg)
    train_set, val_set = pipeline.task_splits(cfg, kind)
    ft, orig = enc.read_checkpoint(args.checkpoint), enc.read_checkpoint(args.orig)
    layers = None if args.layers is None else range(args.layers[0], args.layers[1] + 1)
    sweep = surgery.truncation_sweep(ft, orig, train_set, val_set, cfg.train, cfg.head_steps, layers)
    text = report.table_csv(("config", "k", "metric"), sweep.rows(), pipeline.config_digest(cfg))
    if args.out:
        report.write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_skip(args):
    _need(args, "checkpoint")
    cfg = _config(args)
    kind = _task(args, cfg)
    _, val_set = pipeline.task_splits(cfg, kind)
    ft = enc.read_checkpoint(args.checkpoint)
    spans = None
    if args.layers is not None:
        lo, hi = args.layers
        spans = [(i, j) for i in range(lo, hi + 1) for j in range(i, hi + 1)]
    grid = surgery.skip_grid(ft, ft.classifier(), val_set, spans)
    rows = [r for r in grid.rows() if not (r[0] == "skip" and r[3] != r[3])]
    text = report.table_csv(("mode", "first", "last", "metric"), rows, pipeline.config_digest(cfg))
    if args.out:
        report.write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_heatmap(args):
    m = report.read_cka_csv(args.matrix)
    out = args.out or os.path.splitext(args.matrix)[0] + ".svg"
    report.emit_heatmap(m, out, args.scale, args.title, args.digest)
    print(out)


def cmd_run(args):
    cfg = _config(args)
    if args.mode:
        cfg = replace(cfg, modes=tuple(args.mode))
    result = pipeline.run_pipeline(cfg, args.out)
    print(f"wrote {len(result.files)} files to {result.out_dir}")


# --------------------------------------------------------------------------


def _versions():
    return (f"layercka {__version__}\n"
            f"actv format {act.VERSION}\n"
            f"checkpoint format {enc.CKPT_VERSION} ({enc.CKPT_MAGIC.decode()}, {enc.HEAD_MAGIC.decode()})")


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, **kw)

    def __call__(self, parser, namespace, values, option_string=None):
        print(_versions())
        parser.exit()


def build_parser():
    p = argparse.ArgumentParser(prog="layercka",
                                description="Layer-wise CKA analysis of small Transformer encoders.")
    p.add_argument("--version", action=_VersionAction, help="print tool and file format versions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(fn=fn)
        return sp

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=out_help)

    sp = cmd("pretrain", cmd_pretrain, "pretrain an encoder on the synthetic corpus")
    common(sp)
    sp.add_argument("--objective", choices=training.OBJECTIVES)

    sp = cmd("finetune", cmd_finetune, "fine-tune a pretrained checkpoint on a task")
    common(sp)
    sp.add_argument("--checkpoint", help="pretrained .enck")
    sp.add_argument("--task")
    sp.add_argument("--restart", type=int, default=1, help="fine-tuning restart index (1 or 2)")

    sp = cmd("extract", cmd_extract, "write per-layer CLS activations of a checkpoint")
    common(sp, "output .actv path")
    sp.add_argument("checkpoint")
    sp.add_argument("--task")
    sp.add_argument("--label", help="model label stored in the sidecar")

    sp = cmd("cka", cmd_cka, "layer-by-layer CKA matrix of two activation files")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--out", help="output CSV (stdout if omitted)")
    sp.add_argument("--layers", type=_layers, help="restrict to layers i:j (inclusive)")
    sp.add_argument("--digest", default="none", help="config digest for the provenance line")

    sp = cmd("detect-blocks", cmd_detect_blocks, "find the best two-block split of a CKA matrix")
    sp.add_argument("matrix", help="CKA CSV")
    sp.add_argument("--against", help="second CKA CSV; also report block contrast")

    sp = cmd("truncate", cmd_truncate, "truncation sweep of a fine-tuned checkpoint")
    common(sp, "output CSV (stdout if omitted)")
    sp.add_argument("--checkpoint", help="fine-tuned .enck")
    sp.add_argument("--orig", help="pretrained .enck")
    sp.add_argument("--task")
    sp.add_argument("--layers", type=_layers, help="truncation points i:j (inclusive)")

    sp = cmd("skip", cmd_skip, "accuracy with contiguous block spans bypassed")
    common(sp, "output CSV (stdout if omitted)")
    sp.add_argument("--checkpoint", help="fine-tuned .enck")
    sp.add_argument("--task")
    sp.add_argument("--layers", type=_layers, help="only spans inside blocks i:j")

    sp = cmd("heatmap", cmd_heatmap, "render a CKA CSV as an SVG heatmap")
    sp.add_argument("matrix")
    sp.add_argument("--out")
    sp.add_argument("--scale", choices=("fixed", "per-plot"), default="fixed")
    sp.add_argument("--title")
    sp.add_argument("--digest", default="none")

    sp = cmd("run", cmd_run, "run the whole pipeline from a config")
    common(sp)
    sp.add_argument("--mode", action="append", choices=pipeline.MODES,
                    help="comparison mode (repeatable); overrides the config")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"layercka: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.PipelineError as exc:
        print(f"layercka: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (LayerCKAError, OSError) as exc:
        print(f"layercka: error in '{args.command}': {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())

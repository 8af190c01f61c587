"""Experiment config and the end-to-end pipeline.

pretrain -> fine-tune (two restarts when ft-ft2 is requested) -> extract CLS
activations -> CKA matrices per comparison mode -> block detection ->
truncation sweep -> skip grid, writing every artifact under ``out_dir``.

Output layout::

    config.json                      resolved config (canonical JSON)
    checkpoints/<model>.enck         orig, <task>.ft1, <task>.ft2, *_alt for cross-model
    logs/<model>.csv                 training logs
    activations/<task>.<model>.actv  + .manifest.json sidecars
    cka/<task>.<mode>.csv / .svg     one per comparison mode
    blocks.csv                       detected split and score per (task, mode)
    truncation/<task>.csv            metric per (config, k)
    heads/<task>.<config>.k<k>.ench  heads behind every truncation metric
    skip/<task>.csv                  metric per skipped span
    summary.json                     digests, block scores, contrasts, flags
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import activations as act
from . import cka, report, structure, surgery, tasks, training
from . import encoder as enc
from .errors import ConfigError, LayerCKAError
from .numerics import make_rng

log = logging.getLogger("layercka")

MODES = ("orig-orig", "ft-orig", "ft-ft", "ft-ft2", "cross-model")


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 8000
    min_len: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    objective: str = "mlm"
    tasks: tuple = (tasks.TaskSpec("parity"), tasks.TaskSpec("pair-match"))
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    head_steps: int = surgery.HEAD_STEPS
    cka_max_examples: int = act.DEFAULT_MAX_EXAMPLES
    modes: tuple = ("orig-orig", "ft-orig", "ft-ft")
    truncation: bool = True
    skip_grid: bool = True
    heatmap_scale: str = "fixed"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.objective not in training.OBJECTIVES:
            raise ConfigError(f"objective must be one of {training.OBJECTIVES}")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown comparison modes {bad}; choose from {MODES}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if len({t.kind for t in self.tasks}) != len(self.tasks):
            raise ConfigError("task kinds must be unique")
        if self.head_steps < 0 or self.cka_max_examples < 2:
            raise ConfigError("head_steps must be >= 0 and cka_max_examples >= 2")
        if self.heatmap_scale not in ("fixed", "per-plot"):
            raise ConfigError("heatmap_scale must be 'fixed' or 'per-plot'")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data):
    """Validate a raw JSON document into an ExperimentConfig; unknown keys are errors."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"config: unknown keys {unknown}")
    d = dict(data)
    if "encoder" in d:
        d["encoder"] = _build(enc.EncoderConfig, d["encoder"], "encoder")
    if "corpus" in d:
        d["corpus"] = _build(CorpusSpec, d["corpus"], "corpus")
    if "train" in d:
        d["train"] = _build(training.TrainConfig, d["train"], "train")
    if "tasks" in d:
        if not isinstance(d["tasks"], list):
            raise ConfigError("tasks: expected a list")
        d["tasks"] = tuple(_build(tasks.TaskSpec, t, f"tasks[{i}]") for i, t in enumerate(d["tasks"]))
    if "modes" in d:
        d["modes"] = tuple(d["modes"])
    for key, kind in (("seed", int), ("head_steps", int), ("cka_max_examples", int)):
        if key in d and (not isinstance(d[key], int) or isinstance(d[key], bool)):
            raise ConfigError(f"{key} must be an integer")
    try:
        return ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, **overrides):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    data.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(data)


def config_to_dict(config):
    d = asdict(config)
    d["tasks"] = [asdict(t) for t in config.tasks]
    d["modes"] = list(config.modes)
    return d


def config_digest(config):
    """SHA-256 of the canonical config, ignoring out_dir."""
    d = config_to_dict(config)
    d.pop("out_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def derive_seed(seed, *keys):
    return int(np.random.SeedSequence(seed, spawn_key=keys).generate_state(1, np.uint64)[0])


# Stage inputs are pure functions of the config so that single subcommands
# reproduce exactly what a full run writes.

def alt_objective(objective):
    return "rtd" if objective == "mlm" else "mlm"


def build_corpus(cfg):
    return tasks.gen_corpus(derive_seed(cfg.seed, 1), cfg.corpus.size,
                            cfg.encoder.max_len, cfg.encoder.vocab_size, cfg.corpus.min_len)


def initial_params(cfg):
    return enc.init_params(cfg.encoder, make_rng(derive_seed(cfg.seed, 2)))


def pretrain_config(cfg, objective):
    return replace(cfg.train, seed=derive_seed(cfg.seed, 4, training.OBJECTIVES.index(objective)))


def finetune_config(cfg, restart):
    return replace(cfg.train, seed=derive_seed(cfg.seed, 5, restart))


def task_spec(cfg, kind):
    for spec in cfg.tasks:
        if spec.kind == kind:
            return replace(spec, seed=derive_seed(cfg.seed, 3, tasks.TASK_KINDS.index(kind)) % 2**32)
    raise ConfigError(f"task {kind!r} is not in the config (have {[t.kind for t in cfg.tasks]})")


def task_splits(cfg, kind):
    return tasks.gen_task(task_spec(cfg, kind), cfg.encoder.vocab_size)


# --------------------------------------------------------------------------


class PipelineError(LayerCKAError):
    def __init__(self, stage, module, cause):
        self.stage, self.module, self.cause = stage, module, cause
        super().__init__(f"stage '{stage}' failed in module '{module}': "
                         f"{type(cause).__name__}: {cause}")


class _Stage:
    def __init__(self, name, module):
        self.name, self.module = name, module

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, typ, exc, tb):
        if exc is not None and isinstance(exc, (LayerCKAError, ValueError, OSError)) \
                and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, self.module, exc) from exc


class OutputLock:
    """Exclusive ownership of an output directory via an O_EXCL lockfile."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, ".lock")

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        os.remove(self.path)


@dataclass
class RunResult:
    out_dir: str
    files: list
    summary: dict


def run_pipeline(config, out_dir=None):
    out = out_dir or config.out_dir
    for sub in ("checkpoints", "logs", "activations", "cka", "truncation", "heads", "skip"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    with OutputLock(out):
        return _Pipeline(config, out).run()


class _Pipeline:
    def __init__(self, config, out):
        self.cfg = config
        self.out = out
        self.digest = config_digest(config)
        self.files = []
        self.summary = {"tool_version": __version__, "config_digest": self.digest,
                        "checkpoints": {}, "blocks": {}, "block_contrast": {},
                        "truncation": {}, "skip": {}, "backend": _backend()}
        self.block_rows = []

    def path(self, *parts):
        p = os.path.join(self.out, *parts)
        self.files.append(os.path.relpath(p, self.out))
        return p

    def _text(self, rel, text):
        report.write_text(self.path(*rel), text)

    def _log(self, name, rows):
        self._text(("logs", f"{name}.csv"),
                   report.provenance(self.digest) + "\n" + training.log_csv(rows))

    def _checkpoint(self, name, params):
        enc.write_checkpoint(params, self.path("checkpoints", f"{name}.enck"))
        self.summary["checkpoints"][name] = params.digest()

    def run(self):
        cfg = self.cfg
        self._text(("config.json",), json.dumps(config_to_dict(cfg), sort_keys=True, indent=1) + "\n")
        alt = alt_objective(cfg.objective)
        want_alt = "cross-model" in cfg.modes

        with _Stage("pretrain", "training"):
            corpus = build_corpus(cfg)
            init = initial_params(cfg)
            orig = self._pretrain(init, corpus, cfg.objective, "orig")
            orig_alt = self._pretrain(init, corpus, alt, f"orig_{alt}") if want_alt else None

        for spec in cfg.tasks:
            self._task(spec.kind, orig, orig_alt, alt)

        self._text(("blocks.csv",), report.table_csv(
            ("task", "mode", "split_layer", "block_score", "profile"), self.block_rows, self.digest))
        self.summary["files"] = sorted(self.files + ["summary.json"])
        self._text(("summary.json",), json.dumps(self.summary, sort_keys=True, indent=1) + "\n")
        return RunResult(self.out, sorted(self.files), self.summary)

    def _pretrain(self, init, corpus, objective, name):
        rows = []
        params = training.pretrain(init, corpus, objective, pretrain_config(self.cfg, objective), rows)
        self._log(name, rows)
        self._checkpoint(name, params)
        return params

    def _finetune(self, params, train_set, val_set, name, restart):
        rows = []
        ft = training.finetune(params, train_set, finetune_config(self.cfg, restart), val_set, rows)
        self._log(name, rows)
        self._checkpoint(name, ft)
        return ft

    def _task(self, name, orig, orig_alt, alt):
        cfg = self.cfg
        with _Stage(f"tasks/{name}", "tasks"):
            train_set, val_set = task_splits(cfg, name)
        with _Stage(f"finetune/{name}", "training"):
            ft1 = self._finetune(orig, train_set, val_set, f"{name}.ft1", 1)
            ft2 = self._finetune(orig, train_set, val_set, f"{name}.ft2", 2) \
                if "ft-ft2" in cfg.modes else None
            ft_alt = self._finetune(orig_alt, train_set, val_set, f"{name}.ft1_{alt}", 1) \
                if orig_alt is not None else None

        with _Stage(f"extract/{name}", "activations"):
            acts = {}
            for label, params in (("orig", orig), ("ft1", ft1), ("ft2", ft2), (f"ft1_{alt}", ft_alt)):
                if params is None:
                    continue
                a = act.extract_cls(params, val_set, label, cfg.cka_max_examples)
                act.write_activations(a, self.path("activations", f"{name}.{label}.actv"))
                self.files.append(os.path.relpath(act.sidecar_path(
                    os.path.join(self.out, "activations", f"{name}.{label}.actv")), self.out))
                acts[label] = a

        pairs = {"orig-orig": ("orig", "orig"), "ft-orig": ("ft1", "orig"), "ft-ft": ("ft1", "ft1"),
                 "ft-ft2": ("ft1", "ft2"), "cross-model": ("ft1", f"ft1_{alt}")}
        matrices = {}
        with _Stage(f"cka/{name}", "cka"):
            for mode in cfg.modes:
                ra, cb = pairs[mode]
                m = cka.cka_matrix(acts[ra], acts[cb])
                matrices[mode] = m
                report.write_cka_csv(m, self.path("cka", f"{name}.{mode}.csv"), self.digest)
                report.emit_heatmap(m, self.path("cka", f"{name}.{mode}.svg"), cfg.heatmap_scale,
                                    f"{name}: {mode} ({m.rows_model} vs {m.cols_model})", self.digest)
            if ft_alt is not None:
                matrices[f"ft-ft_{alt}"] = cka.cka_matrix(acts[f"ft1_{alt}"], acts[f"ft1_{alt}"])

        with _Stage(f"blocks/{name}", "structure"):
            scores = {}
            for mode, m in matrices.items():
                if mode in ("ft-orig", "cross-model"):
                    continue  # rows and columns are different models
                sub, keep = structure.defined_layers(m)
                if len(keep) < 2:
                    log.warning("%s %s: fewer than 2 defined layers, no block split", name, mode)
                    self.summary["blocks"].setdefault(name, {})[mode] = None
                    continue
                split = structure.detect_block_split(sub)
                scores[mode] = split.block_score
                layer = keep[split.split_index]
                self.block_rows.append((name, mode, layer, split.block_score,
                                        ";".join(report.fmt(v) for v in split.profile)))
                self.summary["blocks"].setdefault(name, {})[mode] = {
                    "split_layer": layer, "block_score": split.block_score,
                    "profile": [float(v) for v in split.profile], "layers": keep}
            if "ft-ft" in scores and "orig-orig" in scores:
                self.summary["block_contrast"][name] = scores["ft-ft"] - scores["orig-orig"]

        if cfg.truncation:
            with _Stage(f"truncate/{name}", "surgery"):
                sweep = surgery.truncation_sweep(ft1, orig, train_set, val_set, cfg.train, cfg.head_steps)
                self._text(("truncation", f"{name}.csv"),
                           report.table_csv(("config", "k", "metric"), sweep.rows(), self.digest))
                heads = {}
                for (c, k), head in sorted(sweep.heads.items(), key=lambda kv: (kv[0][0], kv[0][1])):
                    rel = f"{name}.{c}.k{k}.ench"
                    enc.write_head(head, self.path("heads", rel))
                    heads[f"{c}.k{k}"] = head.digest()
                L = cfg.encoder.n_layers
                self.summary["truncation"][name] = {
                    "full": sweep.full_metric, "majority_baseline": sweep.majority_baseline,
                    "untuned_top_minus_1": sweep.metrics["untuned"][L - 1] if L >= 1 else None,
                    "metrics": sweep.metrics, "train_metrics": sweep.train_metrics,
                    "tuned_below_tuned_orig": sweep.flags, "heads": heads}

        if cfg.skip_grid:
            with _Stage(f"skip/{name}", "surgery"):
                grid = surgery.skip_grid(ft1, ft1.classifier(), val_set)
                self._text(("skip", f"{name}.csv"),
                           report.table_csv(("mode", "first", "last", "metric"), grid.rows(), self.digest))
                self.summary["skip"][name] = {"reference": grid.reference,
                                              "cells": [[i, j, v] for i, j, v in grid.cells()]}


def _backend():
    from .numerics import BACKEND
    return BACKEND

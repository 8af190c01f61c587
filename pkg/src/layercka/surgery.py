"""Truncation sweeps and layer-skip grids on a fine-tuned encoder.

Truncation feeds the layer-k CLS state straight to a classification head:

``untuned``
    the fine-tuned model's own head, no further training.
``tuned``
    a head trained further on fine-tuned layer-k features.
``tuned_orig``
    a head trained on layer-k features of the pretrained (task-untuned)
    encoder.

Both trained variants warm-start from the fine-tuned head and keep the best
head on the training split, so ``tuned[k] >= untuned[k]`` on training data
holds by construction.  Skip grids bypass blocks i..j with no retraining.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from .errors import LayerRangeError
from .training import accuracy, tune_head

CONFIGS = ("untuned", "tuned", "tuned_orig")
HEAD_STEPS = 500


def evaluate(params, head, mode, dataset):
    """Validation accuracy of ``head`` on the CLS state produced under ``mode``."""
    states = enc.cls_states(params, dataset.tokens, mode)
    return accuracy(enc.head_forward(head, states), dataset.labels)


def majority_baseline(train_labels, val_labels):
    values, counts = np.unique(train_labels, return_counts=True)
    return float((val_labels == values[np.argmax(counts)]).mean())


@dataclass
class TruncationSweep:
    task: str
    n_layers: int
    metrics: dict                   # config -> list of accuracy, index k = 0..L
    train_metrics: dict             # same on the training split
    majority_baseline: float
    full_metric: float
    heads: dict = field(default_factory=dict, repr=False)   # (config, k) -> HeadParams

    @property
    def flags(self):
        """Layers where a tuned head on fine-tuned features loses to the pretrained features."""
        return [k for k in range(self.n_layers + 1)
                if self.metrics["tuned"][k] < self.metrics["tuned_orig"][k]]

    def rows(self):
        out = [("majority", "", self.majority_baseline), ("full", "", self.full_metric)]
        for cfg in CONFIGS:
            out += [(cfg, k, v) for k, v in enumerate(self.metrics[cfg])]
        return out


@dataclass
class SkipGrid:
    task: str
    n_layers: int
    metrics: np.ndarray             # (L, L); [i-1, j-1] for first i, last j; NaN where i > j
    reference: float

    def cells(self):
        L = self.n_layers
        return [(i, j, float(self.metrics[i - 1, j - 1]))
                for i in range(1, L + 1) for j in range(i, L + 1)]

    def rows(self):
        return [("reference", "", "", self.reference)] + \
            [("skip", i, j, v) for i, j, v in self.cells()]


def _layer_features(params, dataset):
    return enc.cls_states(params, dataset.tokens, enc.FULL, all_layers=True)


def truncation_sweep(ft_params, orig_params, train_set, val_set, config,
                     head_steps=HEAD_STEPS, layers=None):
    """Evaluate the three truncation configurations at every layer k.

    ``config`` is the TrainConfig reused for head training with max_steps
    replaced by ``head_steps``.
    """
    L = ft_params.config.n_layers
    if orig_params.config.n_layers != L or orig_params.config.d_model != ft_params.config.d_model:
        raise LayerRangeError("fine-tuned and original encoders have different shapes")
    ks = list(range(L + 1)) if layers is None else list(layers)
    if any(not 0 <= k <= L for k in ks):
        raise LayerRangeError(f"truncation layers must lie in 0..{L}")
    head_cfg = replace(config, max_steps=head_steps,
                       warmup_steps=min(config.warmup_steps, head_steps))
    ft_head = ft_params.classifier().copy()

    ft_train, ft_val = _layer_features(ft_params, train_set), _layer_features(ft_params, val_set)
    or_train, or_val = _layer_features(orig_params, train_set), _layer_features(orig_params, val_set)
    y_tr, y_va = train_set.labels, val_set.labels

    def acc(head, feats, y):
        return accuracy(enc.head_forward(head, feats), y)

    metrics = {c: [float("nan")] * (L + 1) for c in CONFIGS}
    train_metrics = {c: [float("nan")] * (L + 1) for c in CONFIGS}
    heads = {}
    for k in ks:
        tuned = tune_head(ft_train[k], y_tr, head_cfg, init=ft_head, select="accuracy")
        tuned_orig = tune_head(or_train[k], y_tr, head_cfg, init=ft_head, select="accuracy")
        for cfg, head, tr_f, va_f in (("untuned", ft_head, ft_train[k], ft_val[k]),
                                      ("tuned", tuned, ft_train[k], ft_val[k]),
                                      ("tuned_orig", tuned_orig, or_train[k], or_val[k])):
            metrics[cfg][k] = acc(head, va_f, y_va)
            train_metrics[cfg][k] = acc(head, tr_f, y_tr)
            heads[(cfg, k)] = head
    full = evaluate(ft_params, ft_head, enc.FULL, val_set)
    return TruncationSweep(val_set.name, L, metrics, train_metrics,
                           majority_baseline(y_tr, y_va), full, heads)


def skip_grid(ft_params, ft_head, dataset, spans=None):
    """Accuracy with every contiguous span of blocks i..j bypassed."""
    L = ft_params.config.n_layers
    if L < 1:
        raise LayerRangeError("skip grid needs at least one block")
    if spans is None:
        spans = [(i, j) for i in range(1, L + 1) for j in range(i, L + 1)]
    grid = np.full((L, L), np.nan)
    for i, j in spans:
        if not 1 <= i <= j <= L:
            raise LayerRangeError(f"span ({i}, {j}) invalid for {L} blocks")
        grid[i - 1, j - 1] = evaluate(ft_params, ft_head, enc.SkipSpan(i, j), dataset)
    return SkipGrid(dataset.name, L, grid, evaluate(ft_params, ft_head, enc.FULL, dataset))

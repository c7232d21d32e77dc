"""Recall measurement and greedy per-layer top-k calibration.

Given a trained neuron router and the true activation sets of a
calibration corpus, the greedy search walks a k grid (k0, k0+delta, ...)
and returns the smallest grid point whose top-k predictions cover the
target fraction of truly active neurons.  Run per layer, this yields the
k table the decode engine consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, UndefinedRecallError
from .validation import check_count, check_fraction


@dataclass(frozen=True)
class GreedyConfig:
    """Grid parameters of the greedy search.

    ``k0`` is the starting budget, ``delta`` the integer step between
    candidates, ``r_target`` the recall the chosen k must reach.
    """

    k0: int
    r_target: float
    delta: int = 1

    def __post_init__(self):
        check_count(self.k0, "k0")
        check_count(self.delta, "delta")
        check_fraction(self.r_target, "r_target")

    @classmethod
    def for_width(cls, ffn_dim: int, r_target: float = 0.99) -> "GreedyConfig":
        """Defaults that scale grid resolution with the layer width."""
        return cls(
            k0=max(1, ffn_dim // 32),
            r_target=r_target,
            delta=max(1, ffn_dim // 128),
        )


@dataclass(frozen=True)
class LayerKTable:
    """Calibrated per-layer neuron budgets with their achieved recall."""

    rows: tuple

    def __post_init__(self):
        rows = tuple(
            (int(layer), int(k), float(rec)) for layer, k, rec in self.rows
        )
        for layer, k, rec in rows:
            if k < 1:
                raise ValueError(f"layer {layer}: k must be >= 1, got {k}")
        if len({r[0] for r in rows}) != len(rows):
            raise ValueError("duplicate layer index in k table")
        object.__setattr__(self, "rows", rows)

    def k_for(self, layer: int) -> int:
        for ell, k, _ in self.rows:
            if ell == layer:
                return k
        raise ConfigurationError(f"no calibrated k for layer {layer}")

    def __len__(self) -> int:
        return len(self.rows)

    def save(self, path) -> None:
        """One line per layer: layer_index<TAB>k<TAB>achieved_recall."""
        with open(path, "w") as f:
            for layer, k, rec in self.rows:
                f.write(f"{layer}\t{k}\t{rec:.6f}\n")

    @classmethod
    def load(cls, path) -> "LayerKTable":
        rows = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                layer, k, rec = line.split("\t")
                rows.append((int(layer), int(k), float(rec)))
        return cls(rows=tuple(rows))


def _as_logit_label_matrices(predicted_logits, true_activations):
    logits = np.asarray(predicted_logits, dtype=np.float64)
    labels = np.asarray(true_activations)
    if logits.ndim == 1:
        logits = logits[None, :]
    if labels.ndim == 1:
        labels = labels[None, :]
    if logits.shape != labels.shape:
        raise ValueError(
            f"logits {logits.shape} and labels {labels.shape} disagree"
        )
    if labels.dtype != np.bool_:
        vals = np.unique(labels)
        if not np.isin(vals, (0, 1)).all():
            raise ValueError("true_activations must be binary")
        labels = labels.astype(bool)
    return logits, labels


def recall_curve(predicted_logits, true_activations) -> np.ndarray:
    """Micro-averaged recall at every k in [1, D], as a length-D array.

    Entry k-1 is the recall of the per-token top-k prediction sets pooled
    over tokens (ties to the lower neuron index, matching every other
    top-k in the package).  Non-decreasing in k by construction.
    """
    logits, labels = _as_logit_label_matrices(predicted_logits, true_activations)
    total = int(labels.sum())
    if total == 0:
        raise UndefinedRecallError("no token has any active neuron")
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = np.take_along_axis(labels, order, axis=1)
    return np.cumsum(hits.sum(axis=0)) / total


def compute_recall(predicted_logits, true_activations, k: int) -> float:
    """Fraction of truly active neurons covered by per-token top-k picks.

    Micro-averaged: sums intersection sizes and active counts over tokens,
    so tokens with no active neurons contribute nothing to either side.
    """
    logits, labels = _as_logit_label_matrices(predicted_logits, true_activations)
    check_count(k, "k", upper=logits.shape[1])
    return float(recall_curve(logits, labels)[k - 1])


def greedy_topk_from_logits(predicted_logits, true_activations,
                            cfg: GreedyConfig,
                            literal_increment: bool = False) -> int:
    """Greedy grid walk over precomputed logits; see :func:`greedy_topk`."""
    logits, labels = _as_logit_label_matrices(predicted_logits, true_activations)
    curve = recall_curve(logits, labels)
    width = logits.shape[1]
    k = min(cfg.k0, width)
    while curve[k - 1] < cfg.r_target and k < width:
        k = min(k + cfg.delta, width)
    if literal_increment:
        k = min(k + cfg.delta, width)
    return int(k)


def greedy_topk(router, hidden_states, true_activations, cfg: GreedyConfig,
                literal_increment: bool = False) -> int:
    """Smallest grid k whose router top-k recall meets the target.

    Walks k0, k0+delta, ... (clamped at D) and returns the first k with
    ``compute_recall >= cfg.r_target``; D is returned when only full
    density suffices.  Router inference runs once and the logits are
    reused across grid points, which cannot change the result.

    ``literal_increment=True`` reproduces the variant that bumps k by one
    extra delta after the target is met before returning.
    """
    logits = router.decision_function(hidden_states)
    return greedy_topk_from_logits(
        logits, true_activations, cfg, literal_increment=literal_increment
    )


def calibrate_all_layers(model, routers, calibration_tokens,
                         cfg: GreedyConfig | None = None,
                         out_path=None) -> LayerKTable:
    """Calibrate every MLP layer's k against a dense trace of the corpus.

    Runs one dense forward over ``calibration_tokens``, collects each
    layer's router inputs and true activation sets, and greedy-searches k
    per layer.  ``routers`` maps layer index to a trained neuron router
    (list or dict).  The table is written to ``out_path`` when given.
    """
    from .engine import trace_forward

    if cfg is None:
        cfg = GreedyConfig.for_width(model.config.ffn_dim)
    trace = trace_forward(model, calibration_tokens)
    rows = []
    for layer in range(model.config.layers):
        try:
            router = routers[layer]
        except (KeyError, IndexError, TypeError):
            router = None
        if router is None:
            raise ConfigurationError(f"no trained router for layer {layer}")
        logits = router.decision_function(trace.mlp_inputs[layer])
        labels = trace.mlp_active[layer]
        k = greedy_topk_from_logits(logits, labels, cfg)
        rows.append((layer, k, compute_recall(logits, labels, k)))
    table = LayerKTable(rows=tuple(rows))
    if out_path is not None:
        table.save(out_path)
    return table

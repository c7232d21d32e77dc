"""Trainable sparsity predictors.

Each MLP block gets a two-layer ReLU router emitting one logit per hidden
neuron; each attention block gets a single-layer router emitting one logit
per head (or per KV group when query heads share a KV cache).  Routers are
binary classifiers trained with sigmoid BCE and AdamW against supervision
extracted from the dense model: neuron labels are the sign of the dense
hidden activations, head labels the top-k heads by output L2 norm.

Routers follow the scikit-learn estimator shape (``fit`` /
``decision_function`` / ``predict`` / ``get_params``) but keep their
parameters from construction so an untrained router is still a valid
(random) predictor.  Parameters are held in float64 for exact analytic
gradients; the on-disk format is float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .tensors import l2_norm_per_head, topk_indices
from .validation import (
    DTYPE,
    as_matrix,
    as_vector,
    check_count,
    check_fraction,
)


@dataclass(frozen=True)
class RouterTrainConfig:
    """Hyperparameters of the BCE + AdamW training loop.

    learning_rate may be zero (a no-op optimizer is occasionally useful for
    ablations); all other fields follow the usual AdamW conventions.
    """

    learning_rate: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    val_fraction: float = 0.1
    early_stop_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        check_count(self.batch_size, "batch_size")
        check_count(self.max_epochs, "max_epochs")
        check_fraction(self.val_fraction, "val_fraction", closed_right=False)
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


@dataclass(frozen=True)
class SupervisionRecord:
    """One training example: router input paired with binary unit labels."""

    hidden_state: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        h = as_vector(self.hidden_state, "hidden_state")
        lab = np.asarray(self.labels)
        if lab.ndim != 1:
            raise ValueError("labels must be 1-dimensional")
        if lab.dtype != np.bool_:
            vals = np.unique(lab)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("labels must be binary")
            lab = lab.astype(bool)
        object.__setattr__(self, "hidden_state", h)
        object.__setattr__(self, "labels", lab)


@dataclass
class AdamMoments:
    """First/second moment estimates, one pair of arrays per parameter."""

    m: dict
    v: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamMoments":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(params: dict, grads: dict, moments: AdamMoments,
               cfg: RouterTrainConfig, t: int) -> tuple[dict, AdamMoments]:
    """One decoupled-weight-decay Adam update, in place.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  with bias-corrected
    m_hat, v_hat:  theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
    """
    if t < 1:
        raise ValueError("step index t must be >= 1")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name!r}")
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = moments.m[name]
        v = moments.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        m_hat = m / c1
        v_hat = v / c2
        p -= cfg.learning_rate * (
            m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p
        )
    return params, moments


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    """Mean elementwise sigmoid BCE, computed stably from logits."""
    return float(
        np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
    )


def _as_xy(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"expected vector or batch of vectors, got {x.shape}")
    if y is None:
        return x, None, single
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[0] != x.shape[0]:
        raise ValueError("inputs and labels disagree on record count")
    return x, y, single


class _RouterBase(BaseEstimator):
    """Shared forward/backward/training machinery for both router kinds."""

    param_names: tuple = ()
    kind_tag: int = -1

    def weights(self) -> dict:
        """Parameter arrays (live references) keyed in declaration order."""
        return {name: getattr(self, name + "_") for name in self.param_names}

    def set_weights(self, params: dict) -> None:
        for name in self.param_names:
            cur = getattr(self, name + "_")
            new = np.asarray(params[name], dtype=np.float64)
            if new.shape != cur.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            setattr(self, name + "_", new.copy())

    def _forward64(self, x64: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _backward64(self, x64, y64):
        raise NotImplementedError

    def decision_function(self, x) -> np.ndarray:
        """Logits, one per output unit; accepts a vector or a batch."""
        x64, _, single = _as_xy(x)
        if x64.shape[1] != self.n_features_in_:
            raise ValueError(
                f"expected {self.n_features_in_} features, got {x64.shape[1]}"
            )
        z = self._forward64(x64).astype(DTYPE)
        return z[0] if single else z

    def predict(self, x) -> np.ndarray:
        """Binary activity prediction: sigmoid(logit) > 0.5."""
        return np.asarray(self.decision_function(x)) > 0.0

    def loss_and_gradients(self, x, y) -> tuple[float, dict]:
        """Mean BCE over the batch and its exact analytic gradients."""
        x64, y64, _ = _as_xy(x, y)
        return self._backward64(x64, y64)

    def fit(self, x, y, config: RouterTrainConfig | None = None):
        """Minibatch AdamW on sigmoid BCE with early stopping.

        A validation slice (``val_fraction`` of the shuffled records,
        possibly empty for tiny datasets) is held out; training stops when
        validation loss fails to improve for ``early_stop_patience``
        consecutive epochs and the best-scoring parameters are restored.
        Loss history lands in ``self.history_``.
        """
        cfg = config or RouterTrainConfig()
        x64, y64, _ = _as_xy(x, y)
        n = x64.shape[0]
        if n < 1:
            raise ValueError("fit requires at least one record")
        if x64.shape[1] != self.n_features_in_ or y64.shape[1] != self.n_outputs_:
            raise ValueError("training data inconsistent with router dims")
        rng = np.random.default_rng(cfg.seed)
        order = rng.permutation(n)
        n_val = int(cfg.val_fraction * n)
        val_idx, train_idx = order[:n_val], order[n_val:]
        if train_idx.size == 0:
            train_idx, val_idx = val_idx, train_idx
        xt, yt = x64[train_idx], y64[train_idx]
        xv, yv = x64[val_idx], y64[val_idx]

        params = self.weights()
        moments = AdamMoments.zeros_like(params)
        t = 0
        best_val = math.inf
        best_snapshot = None
        stall = 0
        history = {"train_loss": [], "val_loss": []}
        for _ in range(cfg.max_epochs):
            perm = rng.permutation(xt.shape[0])
            for b0 in range(0, perm.size, cfg.batch_size):
                sel = perm[b0 : b0 + cfg.batch_size]
                _, grads = self._backward64(xt[sel], yt[sel])
                t += 1
                adamw_step(params, grads, moments, cfg, t)
            history["train_loss"].append(
                _bce_from_logits(self._forward64(xt), yt)
            )
            if xv.shape[0]:
                val = _bce_from_logits(self._forward64(xv), yv)
                history["val_loss"].append(val)
                if val < best_val - 1e-12:
                    best_val = val
                    best_snapshot = {k: p.copy() for k, p in params.items()}
                    stall = 0
                else:
                    stall += 1
                    if stall >= cfg.early_stop_patience:
                        break
        if best_snapshot is not None:
            self.set_weights(best_snapshot)
        self.history_ = history
        return self


class MlpRouter(_RouterBase):
    """Two-layer ReLU feedforward predictor of per-neuron activity.

    logits = relu(x @ w_in + b_in) @ w_out + b_out.  The hidden width
    defaults to min(1024, 4 d): 1024 suits production-size models, the 4 d
    cap keeps toy routers proportionate.
    """

    param_names = ("w_in", "b_in", "w_out", "b_out")
    kind_tag = 0

    def __init__(self, d_model: int, ffn_dim: int, hidden_dim: int | None = None,
                 seed: int = 0):
        self.d_model = d_model
        self.ffn_dim = ffn_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        check_count(d_model, "d_model")
        check_count(ffn_dim, "ffn_dim")
        h = hidden_dim if hidden_dim is not None else min(1024, 4 * d_model)
        check_count(h, "hidden_dim")
        self.n_features_in_ = d_model
        self.n_outputs_ = ffn_dim
        self.hidden_dim_ = h
        rng = np.random.default_rng(seed)
        self.w_in_ = rng.normal(0.0, math.sqrt(2.0 / d_model), (d_model, h))
        self.b_in_ = np.zeros(h)
        self.w_out_ = rng.normal(0.0, math.sqrt(2.0 / h), (h, ffn_dim))
        self.b_out_ = np.zeros(ffn_dim)

    def _forward64(self, x64):
        h = np.maximum(x64 @ self.w_in_ + self.b_in_, 0.0)
        return h @ self.w_out_ + self.b_out_

    def _backward64(self, x64, y64):
        pre = x64 @ self.w_in_ + self.b_in_
        h = np.maximum(pre, 0.0)
        z = h @ self.w_out_ + self.b_out_
        loss = _bce_from_logits(z, y64)
        dz = (1.0 / (1.0 + np.exp(-z)) - y64) / z.size
        dh = (dz @ self.w_out_.T) * (pre > 0.0)
        grads = {
            "w_out": h.T @ dz,
            "b_out": dz.sum(axis=0),
            "w_in": x64.T @ dh,
            "b_in": dh.sum(axis=0),
        }
        return loss, grads


class HeadRouter(_RouterBase):
    """Single linear layer predicting per-head (or per-group) activity."""

    param_names = ("w", "b")
    kind_tag = 1

    def __init__(self, d_model: int, n_heads: int, seed: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.seed = seed
        check_count(d_model, "d_model")
        check_count(n_heads, "n_heads")
        self.n_features_in_ = d_model
        self.n_outputs_ = n_heads
        rng = np.random.default_rng(seed)
        self.w_ = rng.normal(0.0, 1.0 / math.sqrt(d_model), (d_model, n_heads))
        self.b_ = np.zeros(n_heads)

    def _forward64(self, x64):
        return x64 @ self.w_ + self.b_

    def _backward64(self, x64, y64):
        z = x64 @ self.w_ + self.b_
        loss = _bce_from_logits(z, y64)
        dz = (1.0 / (1.0 + np.exp(-z)) - y64) / z.size
        return loss, {"w": x64.T @ dz, "b": dz.sum(axis=0)}


def mlp_router_forward(router: MlpRouter, x) -> np.ndarray:
    """Per-neuron logits for a hidden state (or batch of hidden states)."""
    return router.decision_function(x)


def head_router_forward(router: HeadRouter, x) -> np.ndarray:
    """Per-head logits for a hidden state (or batch of hidden states)."""
    return router.decision_function(x)


def _mlp_weight_pair(layer_weights):
    if isinstance(layer_weights, (tuple, list)) and len(layer_weights) == 2:
        w1, b1 = layer_weights
    else:
        w1, b1 = layer_weights.mlp_w1, layer_weights.mlp_b1
    return as_matrix(w1, "mlp_w1"), as_vector(b1, "mlp_b1")


def collect_mlp_supervision(layer_weights, token_hidden_states) -> list:
    """Neuron labels from the dense MLP: active iff hidden output > 0.

    ``layer_weights`` supplies the up-projection (an object with
    ``mlp_w1``/``mlp_b1`` or a (w1, b1) pair); hidden states are the same
    post-layernorm inputs the MLP block consumes.
    """
    w1, b1 = _mlp_weight_pair(layer_weights)
    x = np.asarray(token_hidden_states, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim == 3:
        x = x[:, 0, :]
    pre = x @ w1.astype(np.float64) + b1.astype(np.float64)
    labels = pre > 0.0
    return [
        SupervisionRecord(hidden_state=x[i].astype(DTYPE), labels=labels[i])
        for i in range(x.shape[0])
    ]


def head_labels_from_norms(head_norms, supervision_top_k: int | None = None,
                           kv_heads: int | None = None) -> np.ndarray:
    """Boolean head labels from (T, H) per-head output norms.

    Under grouped KV (``kv_heads`` < H) the per-group norm pools the
    squared norms of the group's query heads; exactly
    ``supervision_top_k`` labels (default: half the routed units, rounded
    up) are set per row, ties to the lower id.
    """
    norms = np.asarray(head_norms, dtype=np.float64)
    if norms.ndim != 2:
        raise ValueError(f"head norms must be 2-dimensional, got {norms.shape}")
    batch, n_heads = norms.shape
    if kv_heads is not None and kv_heads != n_heads:
        if n_heads % kv_heads != 0:
            raise ValueError(f"{n_heads} heads not divisible by {kv_heads} groups")
        norms = np.sqrt(
            np.square(norms).reshape(batch, kv_heads, n_heads // kv_heads).sum(axis=2)
        )
    n_route = norms.shape[1]
    if supervision_top_k is None:
        supervision_top_k = -(-n_route // 2)
    check_count(supervision_top_k, "supervision_top_k", upper=n_route)
    labels = np.zeros((batch, n_route), dtype=bool)
    for i in range(batch):
        labels[i, topk_indices(norms[i], supervision_top_k)] = True
    return labels


def collect_head_supervision(hidden_states, attn_outputs_per_head,
                             supervision_top_k: int | None = None,
                             kv_heads: int | None = None) -> list:
    """Head labels: top-k heads (or KV groups) by attention output L2 norm.

    ``hidden_states`` are the attention-block inputs the router will see at
    inference; ``attn_outputs_per_head`` the dense (B, H, 1, d_h) outputs.
    See :func:`head_labels_from_norms` for the grouping and default-k
    rules.
    """
    norms = l2_norm_per_head(attn_outputs_per_head)
    labels = head_labels_from_norms(norms, supervision_top_k, kv_heads)
    x = np.asarray(hidden_states, dtype=DTYPE)
    if x.ndim == 3:
        x = x[:, 0, :]
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ValueError("hidden_states inconsistent with attention outputs")
    return [
        SupervisionRecord(hidden_state=x[i], labels=labels[i])
        for i in range(labels.shape[0])
    ]


def records_to_arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """Stack supervision records into (inputs, labels) training matrices."""
    records = list(records)
    if not records:
        raise ValueError("need at least one supervision record")
    x = np.stack([r.hidden_state for r in records]).astype(np.float64)
    y = np.stack([r.labels for r in records]).astype(np.float64)
    return x, y


def train_router(router: _RouterBase, records,
                 cfg: RouterTrainConfig | None = None) -> tuple[_RouterBase, dict]:
    """Train a router on supervision records; returns (router, loss history)."""
    x, y = records_to_arrays(records)
    router.fit(x, y, config=cfg)
    return router, router.history_


def router_gradients(router: _RouterBase, records) -> dict:
    """Analytic BCE gradients for a batch of supervision records."""
    x, y = records_to_arrays(records)
    _, grads = router.loss_and_gradients(x, y)
    return grads


def finite_difference_check(router: _RouterBase, x, y, step: float = 1e-4,
                            abs_floor: float = 1e-5) -> float:
    """Worst relative error of analytic gradients vs central differences.

    Perturbs every parameter coordinate by +-step and compares the loss
    slope against ``loss_and_gradients``; the floor keeps near-zero
    coordinates from inflating the relative error.
    """
    x64, y64, _ = _as_xy(x, y)
    _, grads = router._backward64(x64, y64)
    worst = 0.0
    for name, p in router.weights().items():
        g = grads[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _bce_from_logits(router._forward64(x64), y64)
            flat[i] = orig - step
            down = _bce_from_logits(router._forward64(x64), y64)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            denom = max(abs(fd), abs(g.reshape(-1)[i]), abs_floor)
            worst = max(worst, abs(fd - g.reshape(-1)[i]) / denom)
    return worst

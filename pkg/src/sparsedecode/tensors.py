"""Dense numeric substrate: KV cache plus reference primitives.

Everything here is deliberately simple and serves as the oracle layer for
the sparsity-aware kernels.  Tensors are stored as float32; reductions
accumulate in float64 so reference results are tight enough to test
against.

Conventions used throughout the package:

* decode hidden states have shape ``(B, 1, d)``,
* per-head decode queries have shape ``(B, H, 1, d_h)``,
* the KV cache stores ``(B, H_kv, capacity, d_h)`` with a per-sequence
  length vector; entries past a sequence's length are never read,
* every top-k breaks ties in favor of the smaller index.
"""

from __future__ import annotations

import numpy as np

from .exceptions import CapacityError, EmptyCacheError
from .validation import DTYPE, as_f32, as_head_query, as_matrix, as_vector, check_count

# Output-column tile width shared by matmul and the selective GEMM kernel so
# that full-density selection reproduces the dense product bitwise.
MATMUL_TILE = 256


def matmul(a, b) -> np.ndarray:
    """Dense float32 matrix product with float64 accumulation.

    Raises:
        ValueError: if inner dimensions disagree.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.shape} x {b.shape} (inner dims differ)"
        )
    return matmul64(a, b).astype(DTYPE)


def matmul64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tiled float64-accumulated product; returns float64."""
    a64 = np.asarray(a, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[1]))
    for t0 in range(0, b.shape[1], MATMUL_TILE):
        t1 = min(t0 + MATMUL_TILE, b.shape[1])
        out[:, t0:t1] = a64 @ np.ascontiguousarray(b[:, t0:t1], dtype=np.float64)
    return out


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending, ties to lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-dimensional, got shape {scores.shape}")
    if not 1 <= k <= scores.size:
        raise ValueError(f"k must be in [1, {scores.size}], got {k}")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def topk_indices_rows(scores, k: int) -> np.ndarray:
    """Row-wise top-k with the same tie rule; returns (rows, k) ascending."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-dimensional, got shape {scores.shape}")
    if not 1 <= k <= scores.shape[1]:
        raise ValueError(f"k must be in [1, {scores.shape[1]}], got {k}")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return np.sort(order, axis=1).astype(np.int64)


def l2_norm_per_head(attn_out) -> np.ndarray:
    """Per-(sequence, head) L2 norm of a (B, H, 1, d_h) attention output."""
    arr = as_head_query(attn_out, "attn_out")
    sq = np.square(arr[:, :, 0, :], dtype=np.float64)
    return np.sqrt(sq.sum(axis=-1)).astype(DTYPE)


def naive_softmax_attention_single_head(q, keys, values, scale: float) -> np.ndarray:
    """Two-pass (max-subtract) softmax attention for one head of one sequence.

    This is the stability reference the blocked one-pass kernel is
    validated against.

    Args:
        q: query vector of shape (d_h,).
        keys: (N, d_h) cached keys.
        values: (N, d_h) cached values.
        scale: positive score scale, normally 1/sqrt(d_h).

    Raises:
        EmptyCacheError: if N == 0.
    """
    q = as_vector(q, "q")
    keys = as_matrix(keys, "keys")
    values = as_matrix(values, "values")
    if keys.shape[0] == 0:
        raise EmptyCacheError("attention over an empty key/value history")
    if keys.shape != values.shape:
        raise ValueError(f"keys {keys.shape} and values {values.shape} differ")
    if keys.shape[1] != q.shape[0]:
        raise ValueError(f"q dim {q.shape[0]} != head dim {keys.shape[1]}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    s = scale * (keys.astype(np.float64) @ q.astype(np.float64))
    s -= s.max()
    p = np.exp(s)
    out = (p @ values.astype(np.float64)) / p.sum()
    return out.astype(DTYPE)


class KVCache:
    """Per-layer key/value history for batched decode.

    ``keys`` and ``values`` have shape (batch, kv_heads, capacity, head_dim)
    and are float32.  Writes are append-only per sequence; readers must
    slice with ``lengths`` (or use :meth:`keys_for` / :meth:`values_for`)
    so entries past a sequence's length are never touched.
    """

    def __init__(self, batch: int, kv_heads: int, capacity: int, head_dim: int):
        check_count(batch, "batch")
        check_count(kv_heads, "kv_heads")
        check_count(capacity, "capacity")
        check_count(head_dim, "head_dim")
        self.keys = np.zeros((batch, kv_heads, capacity, head_dim), dtype=DTYPE)
        self.values = np.zeros((batch, kv_heads, capacity, head_dim), dtype=DTYPE)
        self.lengths = np.zeros(batch, dtype=np.int64)

    @property
    def batch(self) -> int:
        return self.keys.shape[0]

    @property
    def kv_heads(self) -> int:
        return self.keys.shape[1]

    @property
    def capacity(self) -> int:
        return self.keys.shape[2]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[3]

    def append_step(self, k_new, v_new) -> None:
        """Append one token's keys/values for every sequence at once.

        Args:
            k_new: (batch, kv_heads, head_dim) new keys.
            v_new: (batch, kv_heads, head_dim) new values.

        Raises:
            CapacityError: if any sequence is already at capacity.
        """
        k_new = as_f32(k_new, "k_new", ndim=3)
        v_new = as_f32(v_new, "v_new", ndim=3)
        expect = (self.batch, self.kv_heads, self.head_dim)
        if k_new.shape != expect or v_new.shape != expect:
            raise ValueError(f"append_step expects shape {expect}")
        if (self.lengths >= self.capacity).any():
            raise CapacityError(f"KV cache capacity {self.capacity} exhausted")
        rows = np.arange(self.batch)
        self.keys[rows, :, self.lengths, :] = k_new
        self.values[rows, :, self.lengths, :] = v_new
        self.lengths += 1

    def append_tokens(self, b: int, k_tokens, v_tokens) -> None:
        """Append a run of tokens for a single sequence (prefill path).

        Args:
            b: sequence index.
            k_tokens: (T, kv_heads, head_dim) keys for T consecutive tokens.
            v_tokens: (T, kv_heads, head_dim) values.
        """
        k_tokens = as_f32(k_tokens, "k_tokens", ndim=3)
        v_tokens = as_f32(v_tokens, "v_tokens", ndim=3)
        t = k_tokens.shape[0]
        if k_tokens.shape[1:] != (self.kv_heads, self.head_dim):
            raise ValueError("k_tokens shape mismatch with cache")
        start = int(self.lengths[b])
        if start + t > self.capacity:
            raise CapacityError(
                f"sequence {b}: {start}+{t} tokens exceed capacity {self.capacity}"
            )
        self.keys[b, :, start : start + t, :] = k_tokens.transpose(1, 0, 2)
        self.values[b, :, start : start + t, :] = v_tokens.transpose(1, 0, 2)
        self.lengths[b] = start + t

    def keys_for(self, b: int, h: int) -> np.ndarray:
        """View of sequence ``b``'s cached keys for KV head ``h``."""
        return self.keys[b, h, : self.lengths[b]]

    def values_for(self, b: int, h: int) -> np.ndarray:
        return self.values[b, h, : self.lengths[b]]

    def fill_random(self, rng: np.random.Generator, length: int) -> None:
        """Overwrite with synthetic gaussian history of ``length`` tokens.

        Benchmark helper: decode-step timing does not depend on cache
        content, so large-context sessions are seeded directly instead of
        running a quadratic prefill.
        """
        if not 1 <= length <= self.capacity:
            raise ValueError(f"length must be in [1, {self.capacity}]")
        shape = (self.batch, self.kv_heads, length, self.head_dim)
        self.keys[:, :, :length, :] = rng.standard_normal(shape, dtype=DTYPE)
        self.values[:, :, :length, :] = rng.standard_normal(shape, dtype=DTYPE)
        self.lengths[:] = length

"""Sparsity-aware kernels for batched decode.

Two kernels carry the package:

* :func:`selective_gemm` — fused gather + GEMM over a neuron index set.
  Selected columns are staged tile-by-tile (the full gathered operand is
  never materialized) and multiplied with float64 accumulation.  Weight
  matrices keep the neuron dimension innermost so gathers walk contiguous
  memory.
* :func:`selective_head_flash_attention_decode` — blocked one-pass
  (online-softmax) decode attention restricted to a per-sequence set of
  active heads.  Work is laid out as one logical unit per
  (sequence, selected head) pair; units are executed data-parallel in
  vectorized batches grouped by cache length.  Non-selected heads are
  never read and their outputs stay exactly zero.

Dense references (:func:`dense_mlp_forward`, the naive attention in
:mod:`sparsedecode.tensors`) double as oracles for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyCacheError
from .tensors import MATMUL_TILE, KVCache
from .validation import (
    DTYPE,
    as_hidden_batch,
    as_head_query,
    as_index_array,
    as_matrix,
    as_vector,
    check_choice,
    check_count,
)

_ACTIVATIONS = ("none", "relu")


@dataclass(frozen=True)
class NeuronIndexTensor:
    """Union set of active hidden neurons for one MLP layer and one step.

    ``indices`` must be strictly ascending (hence duplicate-free) and
    non-negative; bounds against the layer width are checked where the
    tensor is consumed.
    """

    layer: int
    indices: np.ndarray

    def __post_init__(self):
        idx = as_index_array(self.indices, "indices")
        if idx.size and (np.diff(idx) <= 0).any():
            raise ValueError("neuron indices must be strictly ascending")
        object.__setattr__(self, "indices", idx)

    @property
    def size(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class BatchHeadIndex:
    """Active head (or KV-group) ids per sequence, shape (batch, top_k).

    Every row has the same length (a uniform per-layer head budget) and is
    duplicate-free.  Ids are validated against the head count by the
    attention kernels.
    """

    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries)
        if arr.ndim != 2:
            raise ValueError(f"entries must be 2-dimensional, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("entries must hold integers")
        arr = arr.astype(np.int64)
        if arr.size == 0:
            raise ValueError("entries must not be empty")
        if arr.min() < 0:
            raise IndexError("head ids must be non-negative")
        for row in arr:
            if np.unique(row).size != row.size:
                raise ValueError("head ids must be unique within a row")
        object.__setattr__(self, "entries", arr)

    @property
    def batch(self) -> int:
        return self.entries.shape[0]

    @property
    def top_k(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def full(cls, batch: int, n_heads: int) -> "BatchHeadIndex":
        """Every head active for every sequence (dense attention)."""
        return cls(np.tile(np.arange(n_heads, dtype=np.int64), (batch, 1)))

    @classmethod
    def from_logits(cls, logits, top_k: int) -> "BatchHeadIndex":
        """Per-row top-k of router logits; ties go to the lower head id."""
        from .tensors import topk_indices_rows

        return cls(topk_indices_rows(logits, top_k))


@dataclass(frozen=True)
class FlashBlockParams:
    """Key-block size for the blocked attention kernel.

    ``block_size`` is a direct CPU tuning knob; :meth:`from_byte_budget`
    maps a nominal fast-memory byte budget onto a block size for parity
    with accelerator-style sizing, but is not authoritative here.
    """

    block_size: int = 64

    def __post_init__(self):
        check_count(self.block_size, "block_size")

    def num_blocks(self, n_kv: int) -> int:
        """Number of key blocks covering ``n_kv`` cached tokens."""
        return -(-int(n_kv) // self.block_size)

    @classmethod
    def from_byte_budget(cls, budget_bytes: int, model_dim: int) -> "FlashBlockParams":
        return cls(max(1, int(budget_bytes) // (4 * int(model_dim))))


@dataclass
class OnlineSoftmaxState:
    """Running (accumulator, normalizer, max) triple of the one-pass softmax."""

    o_acc: np.ndarray
    l_acc: float = 0.0
    m_acc: float = -math.inf

    @classmethod
    def fresh(cls, head_dim: int) -> "OnlineSoftmaxState":
        return cls(o_acc=np.zeros(head_dim, dtype=np.float64))

    def update(self, scores, v_block, variant: str = "running") -> None:
        """Fold one key block into the state.

        ``scores`` are the already-scaled block scores; ``v_block`` the
        matching value rows.  The default "running" variant renormalizes
        the accumulator by the new partial sum every block; "deferred"
        keeps the accumulator unnormalized until :meth:`output`.
        """
        scores = np.asarray(scores, dtype=np.float64)
        v_block = np.asarray(v_block, dtype=np.float64)
        m_tilde = scores.max()
        p = np.exp(scores - m_tilde)
        l_tilde = p.sum()
        m_new = max(self.m_acc, m_tilde)
        alpha = math.exp(self.m_acc - m_new)
        beta = math.exp(m_tilde - m_new)
        l_new = alpha * self.l_acc + beta * l_tilde
        pv = p @ v_block
        if variant == "running":
            self.o_acc = (alpha * self.l_acc * self.o_acc + beta * pv) / l_new
        elif variant == "deferred":
            self.o_acc = alpha * self.o_acc + beta * pv
        else:
            raise ValueError(f"unknown variant {variant!r}")
        self.l_acc = l_new
        self.m_acc = m_new

    def output(self, variant: str = "running") -> np.ndarray:
        if variant == "deferred":
            return self.o_acc / self.l_acc
        return self.o_acc


def online_softmax_attention(
    q,
    keys,
    values,
    scale: float,
    params: FlashBlockParams = FlashBlockParams(),
    variant: str = "running",
) -> tuple[np.ndarray, OnlineSoftmaxState]:
    """Single-unit blocked attention; returns (output, final state).

    Reference path for the vectorized kernel: walks the same key blocks and
    the same recurrence one unit at a time, exposing the running state for
    inspection.
    """
    q = as_vector(q, "q")
    keys = as_matrix(keys, "keys")
    values = as_matrix(values, "values")
    if keys.shape[0] == 0:
        raise EmptyCacheError("attention over an empty key/value history")
    n_kv = keys.shape[0]
    state = OnlineSoftmaxState.fresh(q.shape[0])
    q64 = q.astype(np.float64)
    for j in range(params.num_blocks(n_kv)):
        k0 = j * params.block_size
        k1 = min((j + 1) * params.block_size, n_kv)
        s = scale * (keys[k0:k1].astype(np.float64) @ q64)
        state.update(s, values[k0:k1], variant=variant)
    return state.output(variant).astype(DTYPE), state


def _gather_cols64(b: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # a gap-free ascending run is a slice; skips the gather copy, which
    # keeps the full-selection path at dense-kernel cost
    lo = int(idx[0])
    if int(idx[-1]) - lo + 1 == idx.size and (np.diff(idx) == 1).all():
        return b[:, lo : lo + idx.size].astype(np.float64)
    # np.take hits a contiguous fast path that plain fancy indexing misses
    return np.take(b, idx, axis=1).astype(np.float64)


def _selective_cols64(
    a: np.ndarray,
    b: np.ndarray,
    idx: np.ndarray,
    activation: str,
    bias: np.ndarray | None,
) -> np.ndarray:
    """act(a @ b[:, idx] + bias[idx]) with tile-wise gather, float64 out."""
    a64 = a.astype(np.float64)
    out = np.empty((a.shape[0], idx.size))
    for t0 in range(0, idx.size, MATMUL_TILE):
        sel = idx[t0 : t0 + MATMUL_TILE]
        out[:, t0 : t0 + sel.size] = a64 @ _gather_cols64(b, sel)
    if bias is not None:
        out += bias.astype(np.float64)[idx]
    if activation == "relu":
        np.maximum(out, 0.0, out=out)
    return out


def _selective_contract64(
    a64: np.ndarray,
    b: np.ndarray,
    idx: np.ndarray,
    bias: np.ndarray | None,
) -> np.ndarray:
    """a @ b[:, idx].T + bias with tile-wise gather, float64 out."""
    out = np.zeros((a64.shape[0], b.shape[0]))
    for t0 in range(0, idx.size, MATMUL_TILE):
        sel = idx[t0 : t0 + MATMUL_TILE]
        out += a64[:, t0 : t0 + sel.size] @ _gather_cols64(b, sel).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out


def _resolve_indices(indices, upper: int, name: str) -> np.ndarray:
    if isinstance(indices, NeuronIndexTensor):
        indices = indices.indices
    idx = as_index_array(indices, name, upper=upper)
    if idx.size == 0:
        raise ValueError(f"{name} must select at least one column")
    return idx


def selective_gemm(a, b, indices, activation: str = "none", bias=None) -> np.ndarray:
    """Fused gather + GEMM: ``act(a @ b[:, indices] (+ bias[indices]))``.

    Column ``j`` of the result is ``act(a @ b[:, indices[j]])``; the
    gathered operand is staged per tile, never materialized whole.

    Args:
        a: (M, K) left operand.
        b: (K, N) right operand, selected dimension innermost/contiguous.
        indices: :class:`NeuronIndexTensor` or 1-D index array into b's columns.
        activation: "none" or "relu", applied after the optional bias.
        bias: optional length-N vector, gathered alongside the columns.

    Returns:
        (M, len(indices)) float32 matrix.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    check_choice(activation, _ACTIVATIONS, "activation")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"selective_gemm shape mismatch: {a.shape} x {b.shape}")
    idx = _resolve_indices(indices, b.shape[1], "indices")
    bias = None if bias is None else as_vector(bias, "bias")
    return _selective_cols64(a, b, idx, activation, bias).astype(DTYPE)


def selective_gemm_t(a, b, indices, bias=None) -> np.ndarray:
    """Fused gather + GEMM against the transposed selection:
    ``a @ b[:, indices].T (+ bias)``.

    Contracts over the selected dimension, so ``a`` must have
    ``len(indices)`` columns.  Used for the down-projection where the
    neuron axis is the reduction axis.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    idx = _resolve_indices(indices, b.shape[1], "indices")
    if a.shape[1] != idx.size:
        raise ValueError(
            f"a has {a.shape[1]} columns but {idx.size} indices were selected"
        )
    bias = None if bias is None else as_vector(bias, "bias")
    return _selective_contract64(a.astype(np.float64), b, idx, bias).astype(DTYPE)


def dense_mlp_forward(x, w1, b1, w2, b2) -> np.ndarray:
    """Dense two-layer ReLU MLP: ``relu(x @ w1 + b1) @ w2.T + b2``.

    Baseline and oracle for :func:`sparse_mlp_forward`.  ``w1`` and ``w2``
    are both stored (d, D) with the hidden/neuron axis innermost.
    """
    x = as_hidden_batch(x, "x")
    w1 = as_matrix(w1, "w1")
    w2 = as_matrix(w2, "w2")
    b1 = as_vector(b1, "b1")
    b2 = as_vector(b2, "b2")
    batch, _, d = x.shape
    if w1.shape[0] != d or w2.shape[0] != d or w1.shape[1] != w2.shape[1]:
        raise ValueError("MLP weight shapes inconsistent with input")
    # same tiled path as the selective kernel with every neuron chosen, so
    # the two agree bitwise at any width
    idx = np.arange(w1.shape[1], dtype=np.int64)
    h = _selective_cols64(x[:, 0, :], w1, idx, "relu", b1)
    y = _selective_contract64(h, w2, idx, b2)
    return y.astype(DTYPE).reshape(batch, 1, d)


def swiglu_mlp_forward(x, w1, w3, w2, b2) -> np.ndarray:
    """Dense SwiGLU MLP: ``(silu(x @ w1) * (x @ w3)) @ w2.T + b2``.

    Gated MLPs stay dense: their hidden activations are not sign-sparse,
    so neuron selection is not applied to them.
    """
    x = as_hidden_batch(x, "x")
    batch, _, d = x.shape
    x64 = x[:, 0, :].astype(np.float64)
    gate = x64 @ np.asarray(w1, dtype=np.float64)
    gate *= 1.0 / (1.0 + np.exp(-gate))
    up = x64 @ np.asarray(w3, dtype=np.float64)
    y = (gate * up) @ np.asarray(w2, dtype=np.float64).T + np.asarray(
        b2, dtype=np.float64
    )
    return y.astype(DTYPE).reshape(batch, 1, d)


def sparse_mlp_forward(x, w1, b1, w2, b2, active: NeuronIndexTensor) -> np.ndarray:
    """ReLU MLP restricted to the union active-neuron set.

    Equivalent to the dense forward with non-selected hidden units forced
    to zero; exact (up to summation order) when the set covers every
    positive hidden activation.  Both projections run through the fused
    selective GEMM; the hidden activations never leave float64 between
    them.
    """
    x = as_hidden_batch(x, "x")
    w1 = as_matrix(w1, "w1")
    w2 = as_matrix(w2, "w2")
    b1 = as_vector(b1, "b1")
    b2 = as_vector(b2, "b2")
    batch, _, d = x.shape
    if w1.shape[0] != d or w2.shape[0] != d or w1.shape[1] != w2.shape[1]:
        raise ValueError("MLP weight shapes inconsistent with input")
    idx = _resolve_indices(active, w1.shape[1], "active")
    h = _selective_cols64(x[:, 0, :], w1, idx, "relu", b1)
    y = _selective_contract64(h, w2, idx, b2)
    return y.astype(DTYPE).reshape(batch, 1, d)


def union_neuron_indices(per_sequence_sets, layer: int = 0) -> NeuronIndexTensor:
    """Sorted, deduplicated union of per-sequence active-neuron sets."""
    cleaned = [as_index_array(s, "per_sequence_sets") for s in per_sequence_sets]
    if not cleaned:
        merged = np.empty(0, dtype=np.int64)
    else:
        merged = np.unique(np.concatenate(cleaned))
    return NeuronIndexTensor(layer=layer, indices=merged)


def _attention_over_units(
    q4: np.ndarray,
    cache: KVCache,
    b_idx: np.ndarray,
    q_heads: np.ndarray,
    kv_heads: np.ndarray,
    params: FlashBlockParams,
    scale: float,
    variant: str,
) -> np.ndarray:
    """Blocked online-softmax attention over (sequence, head) work units.

    Each unit u attends query ``q4[b_idx[u], q_heads[u]]`` over cache head
    ``kv_heads[u]`` of sequence ``b_idx[u]``.  Units are grouped by cache
    length and processed data-parallel; only the addressed cache slices are
    ever read.  Returns a zero-initialized (B, H, 1, d_h) buffer with
    selected-unit outputs written in.
    """
    out = np.zeros_like(q4)
    if b_idx.size == 0:
        return out
    lengths = cache.lengths[b_idx]
    q64 = q4[b_idx, q_heads, 0, :].astype(np.float64)
    d_h = q4.shape[3]
    for n in np.unique(lengths):
        gsel = np.nonzero(lengths == n)[0]
        bu = b_idx[gsel]
        ku = kv_heads[gsel]
        qg = q64[gsel]
        u = gsel.size
        m_acc = np.full(u, -np.inf)
        l_acc = np.zeros(u)
        o_acc = np.zeros((u, d_h))
        for j in range(params.num_blocks(int(n))):
            k0 = j * params.block_size
            k1 = min((j + 1) * params.block_size, int(n))
            k_blk = cache.keys[bu, ku, k0:k1, :]
            v_blk = cache.values[bu, ku, k0:k1, :]
            s = scale * np.einsum("ud,ukd->uk", qg, k_blk, dtype=np.float64)
            m_tilde = s.max(axis=1)
            p = np.exp(s - m_tilde[:, None])
            l_tilde = p.sum(axis=1)
            pv = np.einsum("uk,ukd->ud", p, v_blk, dtype=np.float64)
            m_new = np.maximum(m_acc, m_tilde)
            alpha = np.exp(m_acc - m_new)
            beta = np.exp(m_tilde - m_new)
            l_new = alpha * l_acc + beta * l_tilde
            if variant == "running":
                o_acc = (
                    (alpha * l_acc)[:, None] * o_acc + beta[:, None] * pv
                ) / l_new[:, None]
            else:
                o_acc = alpha[:, None] * o_acc + beta[:, None] * pv
            l_acc = l_new
            m_acc = m_new
        if variant == "deferred":
            o_acc = o_acc / l_acc[:, None]
        out[bu, q_heads[gsel], 0, :] = o_acc.astype(DTYPE)
    return out


def _check_attention_args(q4, cache: KVCache, bhi: BatchHeadIndex, params, scale):
    q4 = as_head_query(q4, "q")
    batch, _, _, d_h = q4.shape
    if cache.batch != batch or cache.head_dim != d_h:
        raise ValueError(
            f"cache shape {cache.keys.shape} inconsistent with query {q4.shape}"
        )
    if bhi.batch != batch:
        raise ValueError(f"batch_head_index covers {bhi.batch} sequences, not {batch}")
    if (cache.lengths < 1).any():
        empty = np.nonzero(cache.lengths < 1)[0]
        raise EmptyCacheError(f"sequences {empty.tolist()} have empty caches")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return q4


def selective_head_flash_attention_decode(
    q,
    cache: KVCache,
    batch_head_index: BatchHeadIndex,
    params: FlashBlockParams = FlashBlockParams(),
    scale: float | None = None,
    variant: str = "running",
) -> np.ndarray:
    """Decode attention computed only for the selected heads of each sequence.

    One work unit per (sequence, selected head); each walks its sequence's
    cached keys in blocks with the one-pass softmax recurrence.  Outputs of
    non-selected heads are exactly zero and their cache regions are never
    read.

    Args:
        q: (B, H, 1, d_h) decode queries.
        cache: KV history with H heads (one KV head per query head).
        batch_head_index: per-sequence active head ids.
        params: key-block sizing.
        scale: score scale; defaults to 1/sqrt(d_h).
        variant: "running" (renormalize every block) or "deferred"
            (single division at the end); both produce the same output.

    Returns:
        (B, H, 1, d_h) float32 outputs, zero outside selected heads.
    """
    check_choice(variant, ("running", "deferred"), "variant")
    d_h = np.asarray(q).shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d_h)
    q4 = _check_attention_args(q, cache, batch_head_index, params, scale)
    n_heads = q4.shape[1]
    if cache.kv_heads != n_heads:
        raise ValueError(
            f"cache has {cache.kv_heads} KV heads but query has {n_heads}; "
            "use gqa_selective_attention_decode for grouped KV"
        )
    entries = batch_head_index.entries
    if entries.max() >= n_heads:
        raise IndexError(f"head ids must be < {n_heads}")
    batch, top_k = entries.shape
    b_idx = np.repeat(np.arange(batch, dtype=np.int64), top_k)
    heads = entries.reshape(-1)
    return _attention_over_units(
        q4, cache, b_idx, heads, heads, params, scale, variant
    )


def gqa_selective_attention_decode(
    q,
    cache: KVCache,
    group_index: BatchHeadIndex,
    params: FlashBlockParams = FlashBlockParams(),
    scale: float | None = None,
    variant: str = "running",
) -> np.ndarray:
    """Selective attention at KV-group granularity for grouped-query models.

    Selecting group ``g`` activates all query heads that share KV head
    ``g``; each attends over the group's single cached K/V history.
    Degenerates to :func:`selective_head_flash_attention_decode` when every
    group holds one query head.
    """
    check_choice(variant, ("running", "deferred"), "variant")
    d_h = np.asarray(q).shape[-1]
    if scale is None:
        scale = 1.0 / math.sqrt(d_h)
    q4 = _check_attention_args(q, cache, group_index, params, scale)
    n_heads = q4.shape[1]
    n_groups = cache.kv_heads
    if n_heads % n_groups != 0:
        raise ValueError(f"{n_heads} query heads not divisible by {n_groups} groups")
    group_size = n_heads // n_groups
    entries = group_index.entries
    if entries.max() >= n_groups:
        raise IndexError(f"group ids must be < {n_groups}")
    batch, top_k = entries.shape
    b_idx = np.repeat(np.arange(batch, dtype=np.int64), top_k * group_size)
    groups = np.repeat(entries.reshape(-1), group_size)
    offsets = np.tile(np.arange(group_size, dtype=np.int64), batch * top_k)
    q_heads = groups * group_size + offsets
    return _attention_over_units(
        q4, cache, b_idx, q_heads, groups, params, scale, variant
    )

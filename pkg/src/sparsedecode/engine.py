"""Batched autoregressive decode engine.

Three execution modes share one step function:

* ``dense`` — every head and neuron computed.
* ``dejavu_mlp`` — neuron-sparse MLPs (router top-k per sequence, union
  across the batch), dense attention.
* ``polar`` — neuron-sparse MLPs plus per-sequence head-sparse attention;
  layer 0 keeps dense attention by default.

Head routing is per-sequence and therefore batch-invariant: the head set
chosen for a sequence does not depend on what else is in the batch.  MLP
sparsity is batch-coupled through the union set.  Prefill is always dense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import LayerKTable
from .exceptions import CapacityError, ConfigurationError
from .kernels import (
    BatchHeadIndex,
    FlashBlockParams,
    dense_mlp_forward,
    gqa_selective_attention_decode,
    sparse_mlp_forward,
    swiglu_mlp_forward,
    union_neuron_indices,
)
from .model import Model, TransformerConfig, layernorm
from .tensors import KVCache, l2_norm_per_head, matmul, topk_indices_rows
from .validation import DTYPE, as_index_array, check_choice, check_count, check_fraction

_MODES = ("dense", "dejavu_mlp", "polar")
_RANKINGS = ("router", "oracle_norm")


@dataclass(frozen=True)
class SparsityPolicy:
    """What to sparsify during decode and by how much.

    ``head_density`` is the fraction of routed units (KV groups) kept per
    sequence in layers >= 1; the per-layer budget is ceil(density * H_route).
    ``head_ranking`` selects the router or the dense-output-norm oracle
    (the latter computes all heads first and zeroes the rest; study use
    only).  MLP sparsity applies only to ReLU models with a k table.
    """

    mode: str = "dense"
    mlp_k_table: LayerKTable | None = None
    head_density: float = 1.0
    layer0_dense_attention: bool = True
    head_ranking: str = "router"

    def __post_init__(self):
        check_choice(self.mode, _MODES, "mode")
        check_choice(self.head_ranking, _RANKINGS, "head_ranking")
        check_fraction(self.head_density, "head_density")

    def head_budget(self, n_route: int) -> int:
        return max(1, math.ceil(self.head_density * n_route - 1e-9))

    def wants_sparse_mlp(self, config: TransformerConfig) -> bool:
        if self.mode == "dense" or config.activation != "relu":
            return False
        return self.mlp_k_table is not None

    def wants_sparse_heads(self, layer: int) -> bool:
        if self.mode != "polar":
            return False
        if layer == 0 and self.layer0_dense_attention:
            return False
        return self.head_density < 1.0


@dataclass
class DecodeSession:
    """Mutable decode state: per-layer KV caches plus routing components."""

    caches: list
    policy: SparsityPolicy
    mlp_routers: list | None = None
    head_routers: list | None = None
    attn_params: FlashBlockParams = field(default_factory=FlashBlockParams)
    last_logits: np.ndarray | None = None
    next_tokens: np.ndarray | None = None
    seed: int = 0

    @property
    def batch(self) -> int:
        return self.caches[0].batch

    @property
    def lengths(self) -> np.ndarray:
        return self.caches[0].lengths


@dataclass
class ForwardTrace:
    """Per-layer intermediates from a dense full-sequence forward.

    Arrays are flattened over (sequence, position) in corpus order:
    ``mlp_inputs[l]`` and ``attn_inputs[l]`` are (T, d) router inputs,
    ``mlp_active[l]`` is the (T, D) boolean activation set (ReLU models
    only, else None), ``head_norms[l]`` the (T, H) per-query-head output
    L2 norms.
    """

    mlp_inputs: list
    mlp_active: list | None
    attn_inputs: list
    head_norms: list
    attn_out_norms: list
    residual_norms: list
    sequence_lengths: np.ndarray


def _affine(x2d: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    y = matmul(x2d, w)
    if b is not None:
        y = y + b
    return y


def _causal_attention_dense(q, k, v, config: TransformerConfig) -> np.ndarray:
    """Full-sequence causal attention, two-pass softmax; (n, H, d_h) out."""
    n = q.shape[0]
    head_map = np.arange(config.heads) // config.group_size
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)[:, head_map]
    v64 = v.astype(np.float64)[:, head_map]
    scale = 1.0 / math.sqrt(config.head_dim)
    scores = np.einsum("ihd,jhd->hij", q64, k64) * scale
    scores[:, np.triu(np.ones((n, n), dtype=bool), 1)] = -np.inf
    m = scores.max(axis=2, keepdims=True)
    p = np.exp(scores - m)
    p /= p.sum(axis=2, keepdims=True)
    return np.einsum("hij,jhd->ihd", p, v64).astype(DTYPE)


def _validate_batches(model: Model, token_batches) -> list:
    cfg = model.config
    batches = [
        as_index_array(t, "token_batches", upper=cfg.vocab) for t in token_batches
    ]
    if not batches:
        raise ValueError("token_batches must contain at least one prompt")
    for b, toks in enumerate(batches):
        if toks.ndim != 1 or toks.size < 1:
            raise ValueError(f"prompt {b} must be a non-empty token vector")
        if toks.size > cfg.max_seq:
            raise CapacityError(
                f"prompt {b} has {toks.size} tokens, max_seq is {cfg.max_seq}"
            )
    return batches


def _forward_full(model: Model, batches, caches=None, capture=None) -> np.ndarray:
    """Dense teacher-forced forward per sequence; returns last-position logits."""
    cfg = model.config
    d, d_h = cfg.model_dim, cfg.head_dim
    last_logits = np.empty((len(batches), cfg.vocab), dtype=DTYPE)
    for b, tokens in enumerate(batches):
        n = tokens.size
        x = model.embed[tokens] + model.pos_embed[:n]
        for ell, lw in enumerate(model.layers):
            h1 = layernorm(x, lw.ln1_g, lw.ln1_b)
            q = _affine(h1, lw.w_q, lw.b_q).reshape(n, cfg.heads, d_h)
            kk = _affine(h1, lw.w_k, lw.b_k).reshape(n, cfg.kv_heads, d_h)
            vv = _affine(h1, lw.w_v, lw.b_v).reshape(n, cfg.kv_heads, d_h)
            if caches is not None:
                caches[ell].append_tokens(b, kk, vv)
            heads_out = _causal_attention_dense(q, kk, vv, cfg)
            attn_block = _affine(heads_out.reshape(n, d), lw.w_o, lw.b_o)
            if capture is not None:
                capture["attn_inputs"][ell].append(h1)
                capture["head_norms"][ell].append(
                    np.sqrt(
                        np.square(heads_out.astype(np.float64)).sum(axis=2)
                    ).astype(DTYPE)
                )
                capture["attn_out_norms"][ell].append(
                    np.linalg.norm(attn_block.astype(np.float64), axis=1)
                )
                capture["residual_norms"][ell].append(
                    np.linalg.norm(x.astype(np.float64), axis=1)
                )
            x = x + attn_block
            h2 = layernorm(x, lw.ln2_g, lw.ln2_b)
            if capture is not None:
                capture["mlp_inputs"][ell].append(h2)
                if cfg.activation == "relu":
                    pre = h2.astype(np.float64) @ lw.mlp_w1.astype(
                        np.float64
                    ) + lw.mlp_b1.astype(np.float64)
                    capture["mlp_active"][ell].append(pre > 0.0)
            if cfg.activation == "swiglu":
                mlp = swiglu_mlp_forward(
                    h2[:, None, :], lw.mlp_w1, lw.mlp_w3, lw.mlp_w2, lw.mlp_b2
                )[:, 0, :]
            else:
                mlp = dense_mlp_forward(
                    h2[:, None, :], lw.mlp_w1, lw.mlp_b1, lw.mlp_w2, lw.mlp_b2
                )[:, 0, :]
            x = x + mlp
        xf = layernorm(x, model.lnf_g, model.lnf_b)
        last_logits[b] = matmul(xf[-1:], model.unembed)[0]
    return last_logits


def prefill(model: Model, token_batches, policy: SparsityPolicy | None = None,
            mlp_routers=None, head_routers=None,
            attn_params: FlashBlockParams | None = None,
            capacity: int | None = None, seed: int = 0) -> DecodeSession:
    """Dense forward over the prompts; returns a session ready to decode.

    Caches hold each prompt's K/V per layer; ``last_logits`` carries the
    final-position logits so greedy generation can start immediately.
    Sparsity (per ``policy``) applies only to subsequent decode steps.
    """
    batches = _validate_batches(model, token_batches)
    cfg = model.config
    capacity = cfg.max_seq if capacity is None else capacity
    for toks in batches:
        if toks.size > capacity:
            raise CapacityError("prompt exceeds cache capacity")
    caches = [
        KVCache(len(batches), cfg.kv_heads, capacity, cfg.head_dim)
        for _ in range(cfg.layers)
    ]
    last_logits = _forward_full(model, batches, caches=caches)
    return DecodeSession(
        caches=caches,
        policy=policy or SparsityPolicy(),
        mlp_routers=mlp_routers,
        head_routers=head_routers,
        attn_params=attn_params or FlashBlockParams(),
        last_logits=last_logits,
        next_tokens=last_logits.argmax(axis=1).astype(np.int64),
        seed=seed,
    )


def trace_forward(model: Model, token_batches) -> ForwardTrace:
    """Dense forward that records router inputs, activations, head norms."""
    batches = _validate_batches(model, token_batches)
    cfg = model.config
    capture = {
        "mlp_inputs": [[] for _ in range(cfg.layers)],
        "mlp_active": [[] for _ in range(cfg.layers)],
        "attn_inputs": [[] for _ in range(cfg.layers)],
        "head_norms": [[] for _ in range(cfg.layers)],
        "attn_out_norms": [[] for _ in range(cfg.layers)],
        "residual_norms": [[] for _ in range(cfg.layers)],
    }
    _forward_full(model, batches, capture=capture)
    relu = cfg.activation == "relu"
    return ForwardTrace(
        mlp_inputs=[np.concatenate(c) for c in capture["mlp_inputs"]],
        mlp_active=(
            [np.concatenate(c) for c in capture["mlp_active"]] if relu else None
        ),
        attn_inputs=[np.concatenate(c) for c in capture["attn_inputs"]],
        head_norms=[np.concatenate(c) for c in capture["head_norms"]],
        attn_out_norms=[np.concatenate(c) for c in capture["attn_out_norms"]],
        residual_norms=[np.concatenate(c) for c in capture["residual_norms"]],
        sequence_lengths=np.array([t.size for t in batches], dtype=np.int64),
    )


def oracle_head_selection(attn_outputs, k: int,
                          kv_heads: int | None = None) -> BatchHeadIndex:
    """Per-sequence top-k heads (or KV groups) by dense output L2 norm.

    Requires the dense per-head outputs, so it measures what an ideal
    router would pick; it provides no speedup and exists for studies.
    """
    norms = l2_norm_per_head(attn_outputs).astype(np.float64)
    batch, n_heads = norms.shape
    if kv_heads is not None and kv_heads != n_heads:
        if n_heads % kv_heads != 0:
            raise ValueError(f"{n_heads} heads not divisible by {kv_heads} groups")
        norms = np.sqrt(
            np.square(norms).reshape(batch, kv_heads, n_heads // kv_heads).sum(axis=2)
        )
    check_count(k, "k", upper=norms.shape[1])
    return BatchHeadIndex(topk_indices_rows(norms, k))


def _router_for(routers, layer: int, kind: str):
    try:
        router = routers[layer] if routers is not None else None
    except (KeyError, IndexError, TypeError):
        router = None
    if router is None:
        raise ConfigurationError(f"no {kind} router available for layer {layer}")
    return router


def _mask_to_groups(attn4: np.ndarray, selection: BatchHeadIndex,
                    config: TransformerConfig) -> np.ndarray:
    """Zero the query-head outputs of non-selected KV groups."""
    batch, n_heads = attn4.shape[0], attn4.shape[1]
    keep = np.zeros((batch, config.kv_heads), dtype=bool)
    np.put_along_axis(keep, selection.entries, True, axis=1)
    keep_heads = np.repeat(keep, config.group_size, axis=1)
    return attn4 * keep_heads[:, :, None, None].astype(DTYPE)


def decode_step(session: DecodeSession, model: Model, tokens=None) -> np.ndarray:
    """Advance every sequence by one token; returns (B, vocab) logits.

    ``tokens`` defaults to the greedy continuation recorded by the
    previous step (or prefill).  Attention and MLP blocks follow the
    session policy; layer 0 attention stays dense when the policy says so.
    """
    cfg = model.config
    policy = session.policy
    batch = session.batch
    if tokens is None:
        tokens = session.next_tokens
    if tokens is None:
        raise ValueError("no pending tokens; run prefill first or pass tokens")
    tokens = as_index_array(tokens, "tokens", upper=cfg.vocab)
    if tokens.shape != (batch,):
        raise ValueError(f"tokens must have shape ({batch},), got {tokens.shape}")
    pos = session.lengths.copy()
    if (pos >= cfg.max_seq).any():
        raise CapacityError("position table exhausted (max_seq reached)")
    d, d_h = cfg.model_dim, cfg.head_dim
    scale = 1.0 / math.sqrt(d_h)
    n_route = cfg.kv_heads
    sparse_mlp = policy.wants_sparse_mlp(cfg)
    if policy.mode == "dejavu_mlp" and not sparse_mlp:
        raise ConfigurationError(
            "dejavu_mlp mode requires a ReLU model and a calibrated k table"
        )
    x = model.embed[tokens] + model.pos_embed[pos]
    for ell, lw in enumerate(model.layers):
        cache = session.caches[ell]
        h1 = layernorm(x, lw.ln1_g, lw.ln1_b)
        q4 = _affine(h1, lw.w_q, lw.b_q).reshape(batch, cfg.heads, d_h)[:, :, None, :]
        kk = _affine(h1, lw.w_k, lw.b_k).reshape(batch, cfg.kv_heads, d_h)
        vv = _affine(h1, lw.w_v, lw.b_v).reshape(batch, cfg.kv_heads, d_h)
        cache.append_step(kk, vv)
        oracle_k = None
        if policy.wants_sparse_heads(ell):
            k_heads = policy.head_budget(n_route)
            if policy.head_ranking == "router":
                router = _router_for(session.head_routers, ell, "head")
                logits = np.atleast_2d(router.decision_function(h1))
                bhi = BatchHeadIndex.from_logits(logits, k_heads)
            else:
                bhi = BatchHeadIndex.full(batch, n_route)
                oracle_k = k_heads
        else:
            bhi = BatchHeadIndex.full(batch, n_route)
        attn4 = gqa_selective_attention_decode(
            q4, cache, bhi, session.attn_params, scale=scale
        )
        if oracle_k is not None:
            selection = oracle_head_selection(attn4, oracle_k, kv_heads=n_route)
            attn4 = _mask_to_groups(attn4, selection, cfg)
        x = x + _affine(attn4[:, :, 0, :].reshape(batch, d), lw.w_o, lw.b_o)
        h2 = layernorm(x, lw.ln2_g, lw.ln2_b)
        if sparse_mlp:
            k_ell = min(policy.mlp_k_table.k_for(ell), cfg.ffn_dim)
            router = _router_for(session.mlp_routers, ell, "neuron")
            logits = np.atleast_2d(router.decision_function(h2))
            rows = topk_indices_rows(logits, k_ell)
            union = union_neuron_indices(list(rows), layer=ell)
            mlp = sparse_mlp_forward(
                h2[:, None, :], lw.mlp_w1, lw.mlp_b1, lw.mlp_w2, lw.mlp_b2, union
            )[:, 0, :]
        elif cfg.activation == "swiglu":
            mlp = swiglu_mlp_forward(
                h2[:, None, :], lw.mlp_w1, lw.mlp_w3, lw.mlp_w2, lw.mlp_b2
            )[:, 0, :]
        else:
            mlp = dense_mlp_forward(
                h2[:, None, :], lw.mlp_w1, lw.mlp_b1, lw.mlp_w2, lw.mlp_b2
            )[:, 0, :]
        x = x + mlp
    xf = layernorm(x, model.lnf_g, model.lnf_b)
    logits = matmul(xf, model.unembed)
    session.last_logits = logits
    session.next_tokens = logits.argmax(axis=1).astype(np.int64)
    return logits


def generate(session: DecodeSession, model: Model, steps: int) -> np.ndarray:
    """Greedy continuation: emits ``steps`` tokens per sequence.

    The first emitted token is the argmax of the logits already in the
    session (from prefill); each decode step then feeds the emitted token
    back.  Ties resolve to the lower token id.  Deterministic.
    """
    check_count(steps, "steps")
    if session.next_tokens is None:
        raise ValueError("session has no pending logits; run prefill first")
    out = np.empty((session.batch, steps), dtype=np.int64)
    for s in range(steps):
        tok = session.next_tokens
        out[:, s] = tok
        decode_step(session, model, tok)
    return out


def evaluate_perplexity(model: Model, token_stream, policy=None,
                        mlp_routers=None, head_routers=None,
                        attn_params=None) -> float:
    """Teacher-forced perplexity of one stream under a sparsity policy.

    The first token is prefetched densely (prefill); every later position
    is scored from policy-governed decode logits.  Returns
    exp(mean next-token NLL).
    """
    stream = as_index_array(token_stream, "token_stream", upper=model.config.vocab)
    if stream.ndim != 1 or stream.size < 2:
        raise ValueError("token_stream must hold at least 2 tokens")
    session = prefill(
        model, [stream[:1]], policy=policy,
        mlp_routers=mlp_routers, head_routers=head_routers,
        attn_params=attn_params,
    )
    nll_total = 0.0
    logits = session.last_logits
    for i in range(1, stream.size):
        z = logits[0].astype(np.float64)
        z -= z.max()
        nll_total += math.log(np.exp(z).sum()) - z[stream[i]]
        if i < stream.size - 1:
            logits = decode_step(session, model, stream[i : i + 1])
    return float(math.exp(nll_total / (stream.size - 1)))

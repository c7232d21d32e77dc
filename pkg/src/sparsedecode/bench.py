"""Timing harness: decode throughput, kernel block times, router overhead.

All numbers come from the monotonic clock and are reported as medians
with p10/p90 spread; speedups are computed against the dense mode at the
same batch and history length.  Long KV histories are synthesized with
random values rather than prefilled, since only decode-step timing is
under study.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import write_csv
from .engine import DecodeSession, SparsityPolicy, decode_step
from .exceptions import CapacityError
from .kernels import (
    BatchHeadIndex,
    FlashBlockParams,
    NeuronIndexTensor,
    dense_mlp_forward,
    gqa_selective_attention_decode,
    sparse_mlp_forward,
)
from .routers import HeadRouter, MlpRouter
from .tensors import KVCache
from .validation import DTYPE, check_count


@dataclass(frozen=True)
class BenchResult:
    """One benchmark configuration's latency summary."""

    mode: str
    batch: int
    seq_len: int
    density: float
    median_s: float
    p10_s: float
    p90_s: float
    tokens_per_s: float
    speedup_vs_dense: float


def _summarize(samples) -> tuple:
    arr = np.asarray(samples, dtype=np.float64)
    return (
        float(np.median(arr)),
        float(np.percentile(arr, 10)),
        float(np.percentile(arr, 90)),
    )


def time_callable(fn, trials: int = 20, warmup: int = 2) -> tuple:
    """(median, p10, p90) wall-clock seconds of ``fn()`` over trials."""
    check_count(trials, "trials")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return _summarize(samples)


def synthetic_session(model, batch: int, history_len: int,
                      policy: SparsityPolicy | None = None,
                      mlp_routers=None, head_routers=None,
                      attn_params: FlashBlockParams | None = None,
                      seed: int = 0) -> DecodeSession:
    """Decode session whose caches hold ``history_len`` random K/V rows.

    Decode-step cost depends on cache length and shapes, not on the
    cached values, so synthetic history stands in for a (quadratic,
    unaffordable) long prefill when benchmarking.
    """
    cfg = model.config
    if history_len >= cfg.max_seq:
        raise CapacityError(
            f"history {history_len} leaves no room under max_seq {cfg.max_seq}"
        )
    rng = np.random.default_rng(seed)
    caches = []
    for _ in range(cfg.layers):
        cache = KVCache(batch, cfg.kv_heads, cfg.max_seq, cfg.head_dim)
        cache.fill_random(rng, history_len)
        caches.append(cache)
    return DecodeSession(
        caches=caches,
        policy=policy or SparsityPolicy(),
        mlp_routers=mlp_routers,
        head_routers=head_routers,
        attn_params=attn_params or FlashBlockParams(),
        next_tokens=rng.integers(0, cfg.vocab, batch, dtype=np.int64),
        seed=seed,
    )


def throughput_bench(model, policies: dict, batch_sizes, seq_len: int,
                     mlp_routers=None, head_routers=None,
                     steps: int = 50, warmup: int = 5, seed: int = 0,
                     out_csv=None, out_svg=None) -> list:
    """Median inter-token decode latency per (mode, batch size).

    ``policies`` maps mode name to its :class:`SparsityPolicy`; a
    ``dense`` entry is required as the speedup baseline.  Each
    configuration decodes ``warmup`` untimed steps then ``steps`` timed
    ones from a synthetic cache of ``seq_len`` tokens.  Configurations
    that exceed capacity are skipped and noted; other errors propagate.
    """
    if "dense" not in policies:
        raise ValueError("policies must include a 'dense' baseline entry")
    check_count(steps, "steps")
    results = []
    skipped = []
    dense_median = {}
    modes = ["dense"] + [m for m in policies if m != "dense"]
    for mode in modes:
        policy = policies[mode]
        for batch in batch_sizes:
            try:
                session = synthetic_session(
                    model, batch, seq_len, policy=policy,
                    mlp_routers=mlp_routers, head_routers=head_routers,
                    seed=seed,
                )
                rng = np.random.default_rng(seed + 1)
                tokens = rng.integers(
                    0, model.config.vocab, (warmup + steps, batch), dtype=np.int64
                )
                for s in range(warmup):
                    decode_step(session, model, tokens[s])
                samples = []
                for s in range(warmup, warmup + steps):
                    t0 = time.perf_counter()
                    decode_step(session, model, tokens[s])
                    samples.append(time.perf_counter() - t0)
            except CapacityError as exc:
                skipped.append((mode, batch, str(exc)))
                continue
            med, p10, p90 = _summarize(samples)
            if mode == "dense":
                dense_median[batch] = med
            speedup = dense_median.get(batch, float("nan")) / med
            results.append(BenchResult(
                mode=mode, batch=int(batch), seq_len=int(seq_len),
                density=policy.head_density, median_s=med, p10_s=p10,
                p90_s=p90, tokens_per_s=batch / med,
                speedup_vs_dense=speedup,
            ))
    if out_csv is not None:
        comments = [f"seq_len={seq_len} steps={steps} warmup={warmup}"]
        comments += [f"skipped mode={m} batch={b}: {msg}"
                     for m, b, msg in skipped]
        write_csv(
            out_csv, "throughput",
            ["mode", "batch", "seq_len", "density", "median_s", "p10_s",
             "p90_s", "tokens_per_s", "speedup_vs_dense"],
            [vars(r) for r in results], comments=comments,
        )
    if out_svg is not None:
        _render_throughput(results, out_svg)
    return results


def _render_throughput(results, out_svg) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    modes = sorted({r.mode for r in results})
    for mode in modes:
        pts = sorted(
            [(r.batch, r.tokens_per_s) for r in results if r.mode == mode]
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=mode)
    ax.set_xlabel("batch size")
    ax.set_ylabel("tokens / s")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.savefig(out_svg, format="svg", bbox_inches="tight")
    plt.close(fig)


def attention_density_bench(batch: int, n_kv: int, heads: int, head_dim: int,
                            densities, trials: int = 20, seed: int = 0,
                            block_size: int = 64) -> dict:
    """Median selective-attention time per head density on one cache.

    Single-layer microbenchmark: a random KV cache of ``n_kv`` rows, one
    decode query, head budgets ceil(density * H) selected per sequence.
    Density 1.0 is the dense flash-decode reference.
    """
    rng = np.random.default_rng(seed)
    cache = KVCache(batch, heads, n_kv, head_dim)
    cache.fill_random(rng, n_kv)
    q = rng.normal(0.0, 1.0, (batch, heads, 1, head_dim)).astype(DTYPE)
    params = FlashBlockParams(block_size=block_size)
    out = {}
    for rho in densities:
        k = max(1, int(np.ceil(rho * heads - 1e-9)))
        logits = rng.normal(0.0, 1.0, (batch, heads))
        bhi = (BatchHeadIndex.full(batch, heads) if k >= heads
               else BatchHeadIndex.from_logits(logits, k))
        med, p10, p90 = time_callable(
            lambda: gqa_selective_attention_decode(q, cache, bhi, params),
            trials=trials,
        )
        out[float(rho)] = {"median_s": med, "p10_s": p10, "p90_s": p90,
                           "selected_heads": k}
    return out


def sparse_mlp_density_bench(model_dim: int, ffn_dim: int, batch: int,
                             densities, trials: int = 20, seed: int = 0) -> dict:
    """Median neuron-sparse MLP forward time per density."""
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 0.02, (model_dim, ffn_dim)).astype(DTYPE)
    w2 = rng.normal(0.0, 0.02, (model_dim, ffn_dim)).astype(DTYPE)
    b1 = np.zeros(ffn_dim, dtype=DTYPE)
    b2 = np.zeros(model_dim, dtype=DTYPE)
    x = rng.normal(0.0, 1.0, (batch, 1, model_dim)).astype(DTYPE)
    out = {}
    for rho in densities:
        k = max(1, int(np.ceil(rho * ffn_dim - 1e-9)))
        idx = np.sort(rng.choice(ffn_dim, k, replace=False))
        active = NeuronIndexTensor(layer=0, indices=idx)
        med, p10, p90 = time_callable(
            lambda: sparse_mlp_forward(x, w1, b1, w2, b2, active),
            trials=trials,
        )
        out[float(rho)] = {"median_s": med, "p10_s": p10, "p90_s": p90,
                           "selected_neurons": k}
    return out


def router_overhead_ablation(model, densities, batch: int = 32,
                             trials: int = 20, seed: int = 0,
                             out_csv=None) -> list:
    """Router cost vs the savings it buys in the MLP block, per density.

    For each density: neuron-router forward time, sparse-MLP time at the
    matching k, dense-MLP time, and the net saving; densities where
    router + sparse meets or exceeds dense are flagged (at full density
    the router is pure overhead by construction).  The head-router
    forward is timed alongside for the size comparison.
    """
    cfg = model.config
    lw = model.layers[0]
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, (batch, cfg.model_dim)).astype(DTYPE)
    x3 = x[:, None, :]
    mlp_router = MlpRouter(cfg.model_dim, cfg.ffn_dim, seed=seed)
    head_router = HeadRouter(cfg.model_dim, cfg.kv_heads, seed=seed)
    dense_med, _, _ = time_callable(
        lambda: dense_mlp_forward(x3, lw.mlp_w1, lw.mlp_b1, lw.mlp_w2, lw.mlp_b2),
        trials=trials,
    )
    router_med, _, _ = time_callable(
        lambda: mlp_router.decision_function(x), trials=trials
    )
    head_router_med, _, _ = time_callable(
        lambda: head_router.decision_function(x), trials=trials
    )
    rows = []
    for rho in densities:
        k = max(1, int(np.ceil(rho * cfg.ffn_dim - 1e-9)))
        idx = np.sort(rng.choice(cfg.ffn_dim, k, replace=False))
        active = NeuronIndexTensor(layer=0, indices=idx)
        sparse_med, _, _ = time_callable(
            lambda: sparse_mlp_forward(
                x3, lw.mlp_w1, lw.mlp_b1, lw.mlp_w2, lw.mlp_b2, active
            ),
            trials=trials,
        )
        net = dense_med - (router_med + sparse_med)
        rows.append({
            "density": float(rho),
            "mlp_router_s": router_med,
            "sparse_mlp_s": sparse_med,
            "dense_mlp_s": dense_med,
            "net_saving_s": net,
            "combined_exceeds_dense": int(net <= 0.0),
            "head_router_s": head_router_med,
        })
    if out_csv is not None:
        write_csv(
            out_csv, "router_overhead",
            ["density", "mlp_router_s", "sparse_mlp_s", "dense_mlp_s",
             "net_saving_s", "combined_exceeds_dense", "head_router_s"],
            rows,
            comments=[f"batch={batch} d={cfg.model_dim} ffn={cfg.ffn_dim}",
                      f"trials={trials}"],
        )
    return rows

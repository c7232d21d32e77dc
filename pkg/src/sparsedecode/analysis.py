"""Sparsity statistics: activation traces, union-decay and head studies.

Everything here reduces to counting over :class:`ActivationTrace` bitsets
or to perplexity sweeps over the engine.  CSV files are the authoritative
outputs (first line ``# schema=<name> version=1``); SVG plots are
rendered from the same data as a convenience and never feed back into
the numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .engine import ForwardTrace, SparsityPolicy, evaluate_perplexity, trace_forward
from .tensors import topk_indices_rows
from .validation import check_count

CSV_VERSION = 1


def write_csv(path, schema: str, fieldnames, rows, comments=()) -> None:
    """CSV with a schema comment line; rows are dicts over fieldnames."""
    with open(path, "w", newline="") as f:
        f.write(f"# schema={schema} version={CSV_VERSION}\n")
        for line in comments:
            f.write(f"# {line}\n")
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> tuple:
    """Read back a schema-tagged CSV; returns (schema, rows as dicts)."""
    schema = None
    with open(path, newline="") as f:
        header_lines = []
        data_lines = []
        for line in f:
            if line.startswith("#"):
                header_lines.append(line)
            else:
                data_lines.append(line)
    for line in header_lines:
        if line.startswith("# schema="):
            schema = line.split("schema=")[1].split()[0]
    rows = list(csv.DictReader(data_lines))
    return schema, rows


@dataclass
class ActivationTrace:
    """Per-token activation sets collected from a model (or synthesized).

    ``mlp_bits[l]`` is a (T, D) boolean matrix (token t activates neuron
    j); ``head_flags[l]`` a (T, H) boolean matrix of active heads.
    """

    model_id: str
    mlp_bits: list
    head_flags: list
    metadata: dict = field(default_factory=dict)

    @property
    def tokens(self) -> int:
        source = self.mlp_bits if self.mlp_bits else self.head_flags
        return int(source[0].shape[0]) if source else 0

    @property
    def layers(self) -> int:
        return len(self.mlp_bits) if self.mlp_bits else len(self.head_flags)


def trace_from_forward(trace: ForwardTrace, model_id: str = "model",
                       head_top_k: int | None = None) -> ActivationTrace:
    """Convert engine intermediates into an activation trace.

    Head flags mark the per-token top-k heads by output norm
    (default: half the heads, rounded up).
    """
    head_flags = []
    for norms in trace.head_norms:
        n_heads = norms.shape[1]
        k = head_top_k if head_top_k is not None else -(-n_heads // 2)
        check_count(k, "head_top_k", upper=n_heads)
        flags = np.zeros(norms.shape, dtype=bool)
        np.put_along_axis(
            flags, topk_indices_rows(norms.astype(np.float64), k), True, axis=1
        )
        head_flags.append(flags)
    return ActivationTrace(
        model_id=model_id,
        mlp_bits=[m.astype(bool) for m in (trace.mlp_active or [])],
        head_flags=head_flags,
        metadata={"source": "model", "head_top_k": head_top_k},
    )


def collect_activation_trace(model, token_batches, model_id: str = "model",
                             head_top_k: int | None = None) -> ActivationTrace:
    """Dense forward over a corpus, reduced to activation bitsets."""
    return trace_from_forward(
        trace_forward(model, token_batches), model_id=model_id,
        head_top_k=head_top_k,
    )


def synthetic_bernoulli_trace(layers: int, tokens: int, width: int, p: float,
                              heads: int = 8, seed: int = 0) -> ActivationTrace:
    """Independent Bernoulli(p) activations; union density has the closed
    form 1 - (1-p)^B, which makes this trace an analytic oracle."""
    rng = np.random.default_rng(seed)
    return ActivationTrace(
        model_id=f"bernoulli(p={p})",
        mlp_bits=[rng.random((tokens, width)) < p for _ in range(layers)],
        head_flags=[rng.random((tokens, heads)) < p for _ in range(layers)],
        metadata={"source": "bernoulli", "p": p, "seed": seed},
    )


def synthetic_hot_neuron_trace(layers: int, tokens: int, width: int,
                               hot_fraction: float = 0.1, hot_p: float = 0.8,
                               cold_p: float = 0.02, heads: int = 8,
                               seed: int = 0) -> ActivationTrace:
    """Heavy-tailed profile: a small set of hot neurons fires on most
    tokens, the rest rarely; mimics the skewed reuse seen in practice."""
    rng = np.random.default_rng(seed)
    n_hot = max(1, int(hot_fraction * width))
    probs = np.full(width, cold_p)
    probs[rng.choice(width, n_hot, replace=False)] = hot_p
    return ActivationTrace(
        model_id="hot-neuron",
        mlp_bits=[rng.random((tokens, width)) < probs for _ in range(layers)],
        head_flags=[rng.random((tokens, heads)) < 0.5 for _ in range(layers)],
        metadata={"source": "hot-neuron", "hot_fraction": hot_fraction,
                  "hot_p": hot_p, "cold_p": cold_p, "seed": seed},
    )


def union_activation_study(trace: ActivationTrace, batch_sizes,
                           seed: int = 0, out_csv=None) -> list:
    """Mean/std union-set density per layer at each simulated batch size.

    Tokens are shuffled once (seeded) and chopped into consecutive groups
    of each batch size; per group the activation bitsets are OR-ed and
    the union density |S_B| / D recorded.  Simulated batch sizes are
    capped by the trace size (an error, not a silent clamp).
    """
    if not trace.mlp_bits:
        raise ValueError("trace carries no MLP activation bitsets")
    n_tokens = trace.tokens
    rows = []
    order = np.random.default_rng(seed).permutation(n_tokens)
    for batch in batch_sizes:
        check_count(batch, "batch size")
        if batch > n_tokens:
            raise ValueError(
                f"batch size {batch} exceeds trace size {n_tokens}"
            )
        n_groups = n_tokens // batch
        groups = order[: n_groups * batch].reshape(n_groups, batch)
        for layer, bits in enumerate(trace.mlp_bits):
            width = bits.shape[1]
            union_counts = bits[groups].any(axis=1).sum(axis=1)
            density = union_counts / width
            rows.append({
                "layer": layer,
                "batch_size": int(batch),
                "mean_union_density": float(density.mean()),
                "std_union_density": float(density.std()),
                "groups": int(n_groups),
            })
    if out_csv is not None:
        write_csv(
            out_csv, "union_activation",
            ["layer", "batch_size", "mean_union_density",
             "std_union_density", "groups"],
            rows,
            comments=[f"model={trace.model_id}",
                      f"tokens={n_tokens} batch_cap={n_tokens}",
                      f"seed={seed}"],
        )
    return rows


def head_heatmap(trace: ActivationTrace, out_csv=None, out_svg=None) -> np.ndarray:
    """Layer-by-head activation counts; optional CSV and heatmap image."""
    if not trace.head_flags:
        raise ValueError("trace carries no head activation flags")
    counts = np.stack([flags.sum(axis=0) for flags in trace.head_flags])
    if out_csv is not None:
        rows = [
            {"layer": ell, "head": h, "count": int(counts[ell, h])}
            for ell in range(counts.shape[0])
            for h in range(counts.shape[1])
        ]
        write_csv(out_csv, "head_heatmap", ["layer", "head", "count"], rows,
                  comments=[f"model={trace.model_id}",
                            f"tokens={trace.tokens}"])
    if out_svg is not None:
        _render_heatmap(counts, out_svg)
    return counts


def _render_heatmap(counts: np.ndarray, out_svg) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(counts, aspect="auto", cmap="viridis")
    ax.set_xlabel("head")
    ax.set_ylabel("layer")
    ax.set_title("head activation counts")
    fig.colorbar(im, ax=ax)
    fig.savefig(out_svg, format="svg", bbox_inches="tight")
    plt.close(fig)


def ppl_density_sweep(model, tokens, densities, ranking: str = "oracle_norm",
                      mlp_routers=None, head_routers=None,
                      out_csv=None, out_svg=None) -> list:
    """Perplexity at each head density, annotated relative to dense.

    ``ranking`` picks oracle output-norm selection or trained head
    routers; density 1.0 is the dense reference (computed even when not
    in the list, for the relative column).
    """
    densities = [float(x) for x in densities]
    for rho in densities:
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"density must be in (0, 1], got {rho}")
    dense_ppl = evaluate_perplexity(
        model, tokens, policy=SparsityPolicy(mode="dense"),
    )
    rows = []
    for rho in densities:
        if rho >= 1.0:
            ppl = dense_ppl
        else:
            policy = SparsityPolicy(
                mode="polar", head_density=rho, head_ranking=ranking,
            )
            ppl = evaluate_perplexity(
                model, tokens, policy=policy,
                mlp_routers=mlp_routers, head_routers=head_routers,
            )
        rows.append({
            "density": rho,
            "ppl": float(ppl),
            "relative_increase": float((ppl - dense_ppl) / dense_ppl),
        })
    if out_csv is not None:
        write_csv(out_csv, "ppl_density",
                  ["density", "ppl", "relative_increase"], rows,
                  comments=[f"ranking={ranking}", f"dense_ppl={dense_ppl}"])
    if out_svg is not None:
        _render_curve(
            [r["density"] for r in rows], [r["ppl"] for r in rows],
            "head density", "perplexity", out_svg,
        )
    return rows


def _render_curve(xs, ys, xlabel, ylabel, out_svg) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.savefig(out_svg, format="svg", bbox_inches="tight")
    plt.close(fig)


def layer_importance_proxy(model, token_batches, out_csv=None) -> list:
    """Mean attention-block output norm over residual norm, per layer.

    A stand-in importance score (the original per-layer scoring method is
    external); labeled a proxy in the CSV metadata so nobody mistakes it
    for the real thing.
    """
    trace = trace_forward(model, token_batches)
    rows = []
    for ell in range(len(trace.attn_out_norms)):
        ratio = trace.attn_out_norms[ell] / np.maximum(
            trace.residual_norms[ell], 1e-9
        )
        rows.append({"layer": ell, "score": float(ratio.mean())})
    if out_csv is not None:
        write_csv(out_csv, "layer_importance", ["layer", "score"], rows,
                  comments=["proxy=mean(attn_block_output_norm/residual_norm)",
                            "note=proxy score, not the original method"])
    return rows

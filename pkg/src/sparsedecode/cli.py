"""Command-line front end.

Subcommands: ``calibrate``, ``train-routers``, ``decode-bench``,
``stats union|heatmap|importance``, ``eval-ppl``, ``sweep``.  Every
subcommand takes ``--config`` (run config JSON), ``--seed``, ``--out``
(output directory), ``--threads`` and ``--model`` (weight file; a seeded
random toy model is used when absent).  Commands that need routers or a
calibrated k table will train/calibrate on the fly from seeded synthetic
token data unless pointed at saved artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .analysis import (
    collect_activation_trace,
    head_heatmap,
    layer_importance_proxy,
    ppl_density_sweep,
    union_activation_study,
)
from .bench import router_overhead_ablation, throughput_bench
from .calibration import GreedyConfig, LayerKTable, calibrate_all_layers
from .engine import SparsityPolicy, evaluate_perplexity, trace_forward
from .fileio import (
    load_model,
    load_router,
    load_run_config,
    load_token_stream,
    save_router,
    save_run_config,
    save_supervision_records,
)
from .model import TransformerConfig, random_model
from .routers import (
    HeadRouter,
    MlpRouter,
    RouterTrainConfig,
    SupervisionRecord,
    head_labels_from_norms,
)

DEFAULT_CONFIG = TransformerConfig(
    layers=2, model_dim=64, ffn_dim=256, heads=8, kv_heads=8,
    vocab=512, max_seq=512, activation="relu",
)


def _parse_ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _parse_floats(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _load_setup(args):
    if args.config:
        config, policy = load_run_config(args.config)
    else:
        config, policy = DEFAULT_CONFIG, SparsityPolicy()
    if getattr(args, "model", None):
        model = load_model(args.model)
        config = model.config
    else:
        model = random_model(config, seed=args.seed)
    return model, policy


def _token_batches(config: TransformerConfig, samples: int, seed: int) -> list:
    """Synthetic corpus: random sequences totalling ~``samples`` tokens."""
    rng = np.random.default_rng(seed)
    seq_len = min(config.max_seq, 32)
    n_seqs = max(1, -(-samples // seq_len))
    return [
        rng.integers(0, config.vocab, seq_len, dtype=np.int64)
        for _ in range(n_seqs)
    ]


def _train_all_routers(model, samples: int, seed: int,
                       train_cfg: RouterTrainConfig,
                       supervision_top_k: int | None = None):
    """Train one neuron router and one head router per layer from a trace."""
    cfg = model.config
    batches = _token_batches(cfg, samples, seed)
    trace = trace_forward(model, batches)
    mlp_routers, head_routers = [], []
    for ell in range(cfg.layers):
        head = HeadRouter(cfg.model_dim, cfg.kv_heads, seed=seed + 1000 + ell)
        labels = head_labels_from_norms(
            trace.head_norms[ell], supervision_top_k, kv_heads=cfg.kv_heads
        )
        head.fit(trace.attn_inputs[ell].astype(np.float64),
                 labels.astype(np.float64), config=train_cfg)
        head_routers.append(head)
        if cfg.activation == "relu":
            mlp = MlpRouter(cfg.model_dim, cfg.ffn_dim, seed=seed + ell)
            mlp.fit(trace.mlp_inputs[ell].astype(np.float64),
                    trace.mlp_active[ell].astype(np.float64), config=train_cfg)
            mlp_routers.append(mlp)
    return mlp_routers or None, head_routers, trace


def _load_routers(model, routers_dir):
    cfg = model.config
    mlp_routers, head_routers = [], []
    for ell in range(cfg.layers):
        head_path = os.path.join(routers_dir, f"head_router_{ell}.psrt")
        head_routers.append(load_router(head_path))
        mlp_path = os.path.join(routers_dir, f"mlp_router_{ell}.psrt")
        if os.path.exists(mlp_path):
            mlp_routers.append(load_router(mlp_path))
    return mlp_routers or None, head_routers


def _ensure_routers(model, args, need_mlp: bool, need_head: bool):
    """Load routers from --routers, or train seeded ones on the fly."""
    if not (need_mlp or need_head):
        return None, None
    if getattr(args, "routers", None):
        return _load_routers(model, args.routers)
    print("no --routers directory given; training routers on the fly", flush=True)
    mlp_routers, head_routers, _ = _train_all_routers(
        model, args.samples, args.seed, RouterTrainConfig(seed=args.seed)
    )
    return mlp_routers, head_routers


def _ensure_k_table(model, policy, args, mlp_routers):
    if policy.mlp_k_table is not None:
        return policy.mlp_k_table
    if getattr(args, "ktable", None):
        return LayerKTable.load(args.ktable)
    if mlp_routers is None:
        return None
    print("calibrating k table on the fly", flush=True)
    batches = _token_batches(model.config, args.samples, args.seed + 7)
    return calibrate_all_layers(
        model, mlp_routers, batches,
        GreedyConfig.for_width(model.config.ffn_dim, args.target_recall),
    )


def _cmd_train_routers(args) -> int:
    model, _ = _load_setup(args)
    cfg = model.config
    train_cfg = RouterTrainConfig(seed=args.seed, max_epochs=args.epochs)
    mlp_routers, head_routers, trace = _train_all_routers(
        model, args.samples, args.seed, train_cfg,
        supervision_top_k=args.supervision_top_k,
    )
    os.makedirs(args.out, exist_ok=True)
    for ell, router in enumerate(head_routers):
        save_router(router, os.path.join(args.out, f"head_router_{ell}.psrt"))
    if mlp_routers:
        for ell, router in enumerate(mlp_routers):
            save_router(router, os.path.join(args.out, f"mlp_router_{ell}.psrt"))
    if args.save_traces:
        for ell in range(cfg.layers):
            labels = head_labels_from_norms(
                trace.head_norms[ell], args.supervision_top_k,
                kv_heads=cfg.kv_heads,
            )
            records = [
                SupervisionRecord(trace.attn_inputs[ell][i], labels[i])
                for i in range(labels.shape[0])
            ]
            save_supervision_records(
                records, os.path.join(args.out, f"head_layer{ell}.pssv"), kind=1
            )
            if mlp_routers:
                records = [
                    SupervisionRecord(
                        trace.mlp_inputs[ell][i], trace.mlp_active[ell][i]
                    )
                    for i in range(trace.mlp_active[ell].shape[0])
                ]
                save_supervision_records(
                    records, os.path.join(args.out, f"mlp_layer{ell}.pssv"), kind=0
                )
    n_mlp = len(mlp_routers) if mlp_routers else 0
    print(f"trained {n_mlp} neuron routers and {len(head_routers)} head "
          f"routers into {args.out}")
    return 0


def _cmd_calibrate(args) -> int:
    model, _ = _load_setup(args)
    if model.config.activation != "relu":
        print("calibration requires a ReLU model", file=sys.stderr)
        return 2
    if args.routers:
        mlp_routers, _ = _load_routers(model, args.routers)
    else:
        print("no --routers directory given; training routers on the fly",
              flush=True)
        mlp_routers, _, _ = _train_all_routers(
            model, args.samples, args.seed, RouterTrainConfig(seed=args.seed)
        )
    batches = _token_batches(model.config, args.samples, args.seed + 7)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "k_table.tsv")
    table = calibrate_all_layers(
        model, mlp_routers, batches,
        GreedyConfig.for_width(model.config.ffn_dim, args.target_recall),
        out_path=out_path,
    )
    for layer, k, rec in table.rows:
        print(f"layer {layer}: k={k} recall={rec:.4f}")
    print(f"wrote {out_path}")
    return 0


def _cmd_decode_bench(args) -> int:
    model, policy = _load_setup(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    sparse_modes = [m for m in modes if m != "dense"]
    need_mlp = bool(sparse_modes) and model.config.activation == "relu"
    need_head = "polar" in modes
    mlp_routers, head_routers = _ensure_routers(model, args, need_mlp, need_head)
    table = _ensure_k_table(model, policy, args, mlp_routers)
    policies = {}
    for mode in modes:
        if mode == "dense":
            policies[mode] = SparsityPolicy(mode="dense")
        elif mode == "dejavu_mlp":
            policies[mode] = SparsityPolicy(mode="dejavu_mlp", mlp_k_table=table)
        elif mode == "polar":
            policies[mode] = SparsityPolicy(
                mode="polar", mlp_k_table=table,
                head_density=policy.head_density if policy.head_density < 1.0
                else args.head_density,
                layer0_dense_attention=policy.layer0_dense_attention,
            )
        else:
            print(f"unknown mode {mode!r}", file=sys.stderr)
            return 2
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "throughput.csv")
    svg_path = os.path.join(args.out, "throughput.svg")
    results = throughput_bench(
        model, policies, _parse_ints(args.batch_sizes), args.seq_len,
        mlp_routers=mlp_routers, head_routers=head_routers,
        steps=args.steps, warmup=args.warmup, seed=args.seed,
        out_csv=csv_path, out_svg=svg_path,
    )
    for r in results:
        print(f"{r.mode:>10s} B={r.batch:<3d} median={r.median_s * 1e3:8.2f} ms "
              f"tok/s={r.tokens_per_s:9.1f} speedup={r.speedup_vs_dense:.2f}")
    print(f"wrote {csv_path}")
    return 0


def _cmd_stats(args) -> int:
    model, _ = _load_setup(args)
    os.makedirs(args.out, exist_ok=True)
    batches = _token_batches(model.config, args.samples, args.seed)
    if args.kind == "union":
        trace = collect_activation_trace(model, batches)
        csv_path = os.path.join(args.out, "union_activation.csv")
        rows = union_activation_study(
            trace, _parse_ints(args.batch_sizes), seed=args.seed,
            out_csv=csv_path,
        )
        for row in rows:
            print(f"layer {row['layer']} B={row['batch_size']:<3d} "
                  f"union={row['mean_union_density']:.3f} "
                  f"+-{row['std_union_density']:.3f}")
    elif args.kind == "heatmap":
        trace = collect_activation_trace(
            model, batches, head_top_k=args.head_top_k
        )
        csv_path = os.path.join(args.out, "head_heatmap.csv")
        head_heatmap(trace, out_csv=csv_path,
                     out_svg=os.path.join(args.out, "head_heatmap.svg"))
    elif args.kind == "importance":
        csv_path = os.path.join(args.out, "layer_importance.csv")
        for row in layer_importance_proxy(model, batches, out_csv=csv_path):
            print(f"layer {row['layer']}: score={row['score']:.4f}")
    else:
        print(f"unknown stats kind {args.kind!r}", file=sys.stderr)
        return 2
    print(f"wrote {csv_path}")
    return 0


def _cmd_eval_ppl(args) -> int:
    model, policy = _load_setup(args)
    if args.tokens:
        stream = load_token_stream(args.tokens)
    else:
        rng = np.random.default_rng(args.seed)
        stream = rng.integers(0, model.config.vocab, args.length, dtype=np.int64)
    need_mlp = policy.wants_sparse_mlp(model.config) or (
        policy.mode in ("dejavu_mlp", "polar")
        and model.config.activation == "relu"
    )
    need_head = policy.mode == "polar" and policy.head_ranking == "router" \
        and policy.head_density < 1.0
    mlp_routers, head_routers = _ensure_routers(model, args, need_mlp, need_head)
    if need_mlp and policy.mlp_k_table is None:
        table = _ensure_k_table(model, policy, args, mlp_routers)
        policy = SparsityPolicy(
            mode=policy.mode, mlp_k_table=table,
            head_density=policy.head_density,
            layer0_dense_attention=policy.layer0_dense_attention,
            head_ranking=policy.head_ranking,
        )
    ppl = evaluate_perplexity(
        model, stream, policy=policy,
        mlp_routers=mlp_routers, head_routers=head_routers,
    )
    print(f"mode={policy.mode} tokens={stream.size} ppl={ppl:.4f}")
    return 0


def _cmd_sweep(args) -> int:
    model, _ = _load_setup(args)
    if args.tokens:
        stream = load_token_stream(args.tokens)
    else:
        rng = np.random.default_rng(args.seed)
        stream = rng.integers(0, model.config.vocab, args.length, dtype=np.int64)
    head_routers = None
    mlp_routers = None
    if args.ranking == "router":
        mlp_routers, head_routers = _ensure_routers(model, args, False, True)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ppl_density.csv")
    rows = ppl_density_sweep(
        model, stream, _parse_floats(args.densities), ranking=args.ranking,
        mlp_routers=mlp_routers, head_routers=head_routers,
        out_csv=csv_path, out_svg=os.path.join(args.out, "ppl_density.svg"),
    )
    for row in rows:
        print(f"density={row['density']:.2f} ppl={row['ppl']:.4f} "
              f"(+{100 * row['relative_increase']:.2f}%)")
    print(f"wrote {csv_path}")
    return 0


def _cmd_router_overhead(args) -> int:
    model, _ = _load_setup(args)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "router_overhead.csv")
    rows = router_overhead_ablation(
        model, _parse_floats(args.densities), batch=args.batch,
        trials=args.trials, seed=args.seed, out_csv=csv_path,
    )
    for row in rows:
        flag = " (router+sparse >= dense)" if row["combined_exceeds_dense"] else ""
        print(f"density={row['density']:.2f} router={row['mlp_router_s'] * 1e3:.3f} ms "
              f"sparse={row['sparse_mlp_s'] * 1e3:.3f} ms "
              f"dense={row['dense_mlp_s'] * 1e3:.3f} ms{flag}")
    print(f"wrote {csv_path}")
    return 0


def _add_common(sp, with_model=True):
    sp.add_argument("--config", help="run config JSON (model + policy objects)")
    sp.add_argument("--seed", type=int, default=0, help="RNG seed")
    sp.add_argument("--out", default=".", help="output directory")
    sp.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/worker threads")
    if with_model:
        sp.add_argument("--model", help="PSWT weight file (default: seeded "
                                        "random toy weights)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sparsedecode",
        description="Batched decode with neuron- and head-level sparsity",
    )
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train-routers", help="train per-layer routers")
    _add_common(sp)
    sp.add_argument("--samples", type=int, default=10000,
                    help="supervision tokens to trace")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--supervision-top-k", type=int, default=None)
    sp.add_argument("--save-traces", action="store_true",
                    help="also write PSSV supervision traces")
    sp.set_defaults(func=_cmd_train_routers)

    sp = sub.add_parser("calibrate", help="greedy per-layer k calibration")
    _add_common(sp)
    sp.add_argument("--samples", type=int, default=10000,
                    help="calibration tokens")
    sp.add_argument("--routers", help="directory of PSRT router checkpoints")
    sp.add_argument("--target-recall", type=float, default=0.99)
    sp.set_defaults(func=_cmd_calibrate)

    sp = sub.add_parser("decode-bench", help="decode throughput benchmark")
    _add_common(sp)
    sp.add_argument("--modes", default="dense,polar")
    sp.add_argument("--batch-sizes", default="1,4,16")
    sp.add_argument("--seq-len", type=int, default=256)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--samples", type=int, default=2000,
                    help="tokens for on-the-fly router training")
    sp.add_argument("--routers", help="directory of PSRT router checkpoints")
    sp.add_argument("--ktable", help="calibrated k table TSV")
    sp.add_argument("--target-recall", type=float, default=0.99)
    sp.add_argument("--head-density", type=float, default=0.5)
    sp.set_defaults(func=_cmd_decode_bench)

    sp = sub.add_parser("stats", help="activation statistics studies")
    sp.add_argument("kind", choices=["union", "heatmap", "importance"])
    _add_common(sp)
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--batch-sizes", default="1,8,32")
    sp.add_argument("--head-top-k", type=int, default=None)
    sp.set_defaults(func=_cmd_stats)

    sp = sub.add_parser("eval-ppl", help="perplexity under a policy")
    _add_common(sp)
    sp.add_argument("--tokens", help="newline-delimited token stream file")
    sp.add_argument("--length", type=int, default=256,
                    help="generated stream length when --tokens absent")
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--routers", help="directory of PSRT router checkpoints")
    sp.add_argument("--ktable", help="calibrated k table TSV")
    sp.add_argument("--target-recall", type=float, default=0.99)
    sp.set_defaults(func=_cmd_eval_ppl)

    sp = sub.add_parser("sweep", help="perplexity vs head density")
    _add_common(sp)
    sp.add_argument("--densities", default="1.0,0.75,0.5,0.25")
    sp.add_argument("--ranking", choices=["oracle_norm", "router"],
                    default="oracle_norm")
    sp.add_argument("--tokens", help="newline-delimited token stream file")
    sp.add_argument("--length", type=int, default=128)
    sp.add_argument("--samples", type=int, default=2000)
    sp.add_argument("--routers", help="directory of PSRT router checkpoints")
    sp.set_defaults(func=_cmd_sweep)

    sp = sub.add_parser("router-overhead", help="router latency ablation")
    _add_common(sp)
    sp.add_argument("--densities", default="1.0,0.5,0.25")
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--trials", type=int, default=20)
    sp.set_defaults(func=_cmd_router_overhead)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return args.func(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

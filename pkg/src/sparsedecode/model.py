"""Transformer model containers and the toy-model initializer.

Pre-norm decoder-only blocks with learned positional embeddings.  Weights
live in plain float32 arrays shaped so every sparsity-relevant dimension
(hidden neurons, KV heads) is innermost and contiguous; the MLP
projections are both stored (d, D) for that reason, with the down
projection applied transposed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .validation import DTYPE, as_matrix, as_vector, check_choice, check_count

_ACTIVATIONS = ("relu", "swiglu")

LN_EPS = 1e-5


@dataclass(frozen=True)
class TransformerConfig:
    """Model shape; all derived quantities are properties."""

    layers: int
    model_dim: int
    ffn_dim: int
    heads: int
    kv_heads: int
    vocab: int
    max_seq: int
    activation: str = "relu"

    def __post_init__(self):
        for name in ("layers", "model_dim", "ffn_dim", "heads", "kv_heads",
                     "vocab", "max_seq"):
            check_count(getattr(self, name), name)
        check_choice(self.activation, _ACTIVATIONS, "activation")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.heads % self.kv_heads != 0:
            raise ValueError(
                f"heads {self.heads} not divisible by kv_heads {self.kv_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def group_size(self) -> int:
        return self.heads // self.kv_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


@dataclass
class LayerWeights:
    """One pre-norm block: attention projections, MLP, two layernorms.

    ``mlp_w3`` is the gate companion projection and present only on
    swiglu models; relu models leave it None.
    """

    ln1_g: np.ndarray
    ln1_b: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    mlp_w3: np.ndarray | None = None

    def validate(self, cfg: TransformerConfig) -> None:
        d, dk, ffn = cfg.model_dim, cfg.kv_dim, cfg.ffn_dim
        expect = {
            "ln1_g": (d,), "ln1_b": (d,),
            "w_q": (d, d), "b_q": (d,),
            "w_k": (d, dk), "b_k": (dk,),
            "w_v": (d, dk), "b_v": (dk,),
            "w_o": (d, d), "b_o": (d,),
            "ln2_g": (d,), "ln2_b": (d,),
            "mlp_w1": (d, ffn), "mlp_b1": (ffn,),
            "mlp_w2": (d, ffn), "mlp_b2": (d,),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if cfg.activation == "swiglu":
            if self.mlp_w3 is None or self.mlp_w3.shape != (d, ffn):
                raise ValueError("swiglu models require mlp_w3 of shape (d, ffn)")

    def array_names(self, cfg: TransformerConfig) -> tuple:
        names = ["ln1_g", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
                 "w_o", "b_o", "ln2_g", "ln2_b", "mlp_w1", "mlp_b1",
                 "mlp_w2", "mlp_b2"]
        if cfg.activation == "swiglu":
            names.append("mlp_w3")
        return tuple(names)

    def checksum(self) -> float:
        """Cheap content fingerprint used to assert weights stay frozen."""
        total = 0.0
        for f in fields(self):
            arr = getattr(self, f.name)
            if arr is not None:
                total += float(np.abs(arr.astype(np.float64)).sum())
        return total


@dataclass
class Model:
    """Full decoder: embeddings, blocks, final norm, unembedding."""

    config: TransformerConfig
    embed: np.ndarray
    pos_embed: np.ndarray
    layers: list
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    unembed: np.ndarray

    def validate(self) -> None:
        cfg = self.config
        if self.embed.shape != (cfg.vocab, cfg.model_dim):
            raise ValueError("embedding shape inconsistent with config")
        if self.pos_embed.shape != (cfg.max_seq, cfg.model_dim):
            raise ValueError("positional embedding shape inconsistent")
        if self.unembed.shape != (cfg.model_dim, cfg.vocab):
            raise ValueError("unembedding shape inconsistent")
        if len(self.layers) != cfg.layers:
            raise ValueError("layer count inconsistent with config")
        for lw in self.layers:
            lw.validate(cfg)

    def checksum(self) -> float:
        total = float(
            np.abs(self.embed.astype(np.float64)).sum()
            + np.abs(self.pos_embed.astype(np.float64)).sum()
            + np.abs(self.unembed.astype(np.float64)).sum()
        )
        return total + sum(lw.checksum() for lw in self.layers)


def layernorm(x, g, b) -> np.ndarray:
    """Standard layernorm over the last axis, float64 inside, float32 out."""
    x64 = np.asarray(x, dtype=np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    y = (x64 - mu) / np.sqrt(var + LN_EPS)
    y = y * np.asarray(g, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    return y.astype(DTYPE)


def random_model(config: TransformerConfig, seed: int = 0,
                 scale: float = 0.02) -> Model:
    """Seeded toy model: Gaussian weights (std ``scale``), unit layernorms."""
    rng = np.random.default_rng(seed)
    d, ffn, dk = config.model_dim, config.ffn_dim, config.kv_dim

    def g(*shape):
        return rng.normal(0.0, scale, shape).astype(DTYPE)

    layers = []
    for _ in range(config.layers):
        layers.append(LayerWeights(
            ln1_g=np.ones(d, dtype=DTYPE), ln1_b=np.zeros(d, dtype=DTYPE),
            w_q=g(d, d), b_q=np.zeros(d, dtype=DTYPE),
            w_k=g(d, dk), b_k=np.zeros(dk, dtype=DTYPE),
            w_v=g(d, dk), b_v=np.zeros(dk, dtype=DTYPE),
            w_o=g(d, d), b_o=np.zeros(d, dtype=DTYPE),
            ln2_g=np.ones(d, dtype=DTYPE), ln2_b=np.zeros(d, dtype=DTYPE),
            mlp_w1=g(d, ffn), mlp_b1=g(ffn),
            mlp_w2=g(d, ffn), mlp_b2=np.zeros(d, dtype=DTYPE),
            mlp_w3=g(d, ffn) if config.activation == "swiglu" else None,
        ))
    model = Model(
        config=config,
        embed=g(config.vocab, d),
        pos_embed=g(config.max_seq, d),
        layers=layers,
        lnf_g=np.ones(d, dtype=DTYPE),
        lnf_b=np.zeros(d, dtype=DTYPE),
        unembed=g(d, config.vocab),
    )
    model.validate()
    return model

"""On-disk formats.

All binary files are little-endian with a 4-byte magic and a u32 version:

* ``PSRT`` router checkpoint — kind byte (0 neuron router, 1 head
  router), u32 dims, then f32 parameter blocks in declaration order.
* ``PSSV`` supervision trace — kind byte, u32 input dim / label width /
  record count, then per record the f32 hidden state followed by the
  label bitset (packed little-bit-first).
* ``PSWT`` model weights — u32-length-prefixed JSON config, then f32
  blocks: embeddings, per-layer arrays in declaration order, final norm,
  unembedding.

Token streams are newline-delimited unsigned integers.  Run configs are
JSON documents with ``model`` and ``policy`` objects whose keys mirror
the corresponding dataclass fields.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .calibration import LayerKTable
from .engine import SparsityPolicy
from .model import LayerWeights, Model, TransformerConfig
from .routers import HeadRouter, MlpRouter, SupervisionRecord
from .validation import DTYPE

FORMAT_VERSION = 1


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ValueError(f"{self.path}: truncated file")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f32_array(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4")
        return arr.reshape(shape).astype(DTYPE)

    def expect_end(self) -> None:
        if self.off != len(self.data):
            raise ValueError(f"{self.path}: trailing bytes after payload")


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise ValueError(f"{r.path}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"{r.path}: unsupported version {version}")


def _f32_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_router(router, path) -> None:
    """Write a PSRT checkpoint; parameters are stored as float32."""
    parts = [b"PSRT", struct.pack("<I", FORMAT_VERSION)]
    if isinstance(router, MlpRouter):
        parts.append(struct.pack("<B", 0))
        parts.append(struct.pack(
            "<III", router.d_model, router.hidden_dim_, router.ffn_dim
        ))
    elif isinstance(router, HeadRouter):
        parts.append(struct.pack("<B", 1))
        parts.append(struct.pack("<II", router.d_model, router.n_heads))
    else:
        raise TypeError(f"unknown router type {type(router).__name__}")
    for arr in router.weights().values():
        parts.append(_f32_bytes(arr))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_router(path):
    """Read a PSRT checkpoint back into the matching router class."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    _check_header(r, b"PSRT")
    kind = r.u8()
    if kind == 0:
        d, hidden, ffn = r.u32(), r.u32(), r.u32()
        router = MlpRouter(d, ffn, hidden_dim=hidden)
        shapes = {"w_in": (d, hidden), "b_in": (hidden,),
                  "w_out": (hidden, ffn), "b_out": (ffn,)}
    elif kind == 1:
        d, heads = r.u32(), r.u32()
        router = HeadRouter(d, heads)
        shapes = {"w": (d, heads), "b": (heads,)}
    else:
        raise ValueError(f"{path}: unknown router kind {kind}")
    loaded = {name: r.f32_array(shape) for name, shape in shapes.items()}
    r.expect_end()
    router.set_weights(loaded)
    return router


def save_supervision_records(records, path, kind: int = 0) -> None:
    """Write a PSSV trace: per record the hidden state + a label bitset."""
    records = list(records)
    if not records:
        raise ValueError("cannot save an empty supervision trace")
    d = records[0].hidden_state.size
    width = records[0].labels.size
    parts = [
        b"PSSV",
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<B", kind),
        struct.pack("<III", d, width, len(records)),
    ]
    for rec in records:
        if rec.hidden_state.size != d or rec.labels.size != width:
            raise ValueError("records disagree on dimensions")
        parts.append(_f32_bytes(rec.hidden_state))
        parts.append(np.packbits(rec.labels, bitorder="little").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_supervision_records(path) -> tuple:
    """Read a PSSV trace; returns (records, kind)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    _check_header(r, b"PSSV")
    kind = r.u8()
    d, width, count = r.u32(), r.u32(), r.u32()
    n_bytes = (width + 7) // 8
    records = []
    for _ in range(count):
        hidden = r.f32_array((d,))
        bits = np.frombuffer(r.take(n_bytes), dtype=np.uint8)
        labels = np.unpackbits(bits, bitorder="little")[:width].astype(bool)
        records.append(SupervisionRecord(hidden_state=hidden, labels=labels))
    r.expect_end()
    return records, kind


def save_model(model: Model, path) -> None:
    """Write a PSWT weight file: JSON config then raw f32 blocks."""
    model.validate()
    cfg = model.config
    config_bytes = json.dumps(cfg.to_dict()).encode()
    parts = [
        b"PSWT",
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", len(config_bytes)),
        config_bytes,
        _f32_bytes(model.embed),
        _f32_bytes(model.pos_embed),
    ]
    for lw in model.layers:
        for name in lw.array_names(cfg):
            parts.append(_f32_bytes(getattr(lw, name)))
    parts.append(_f32_bytes(model.lnf_g))
    parts.append(_f32_bytes(model.lnf_b))
    parts.append(_f32_bytes(model.unembed))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_model(path) -> Model:
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    _check_header(r, b"PSWT")
    cfg = TransformerConfig.from_dict(json.loads(r.take(r.u32()).decode()))
    d, ffn, dk = cfg.model_dim, cfg.ffn_dim, cfg.kv_dim
    shapes = {
        "ln1_g": (d,), "ln1_b": (d,),
        "w_q": (d, d), "b_q": (d,),
        "w_k": (d, dk), "b_k": (dk,),
        "w_v": (d, dk), "b_v": (dk,),
        "w_o": (d, d), "b_o": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "mlp_w1": (d, ffn), "mlp_b1": (ffn,),
        "mlp_w2": (d, ffn), "mlp_b2": (d,),
        "mlp_w3": (d, ffn),
    }
    embed = r.f32_array((cfg.vocab, d))
    pos_embed = r.f32_array((cfg.max_seq, d))
    layers = []
    for _ in range(cfg.layers):
        arrays = {}
        names = ["ln1_g", "ln1_b", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v",
                 "w_o", "b_o", "ln2_g", "ln2_b", "mlp_w1", "mlp_b1",
                 "mlp_w2", "mlp_b2"]
        if cfg.activation == "swiglu":
            names.append("mlp_w3")
        for name in names:
            arrays[name] = r.f32_array(shapes[name])
        layers.append(LayerWeights(**arrays))
    lnf_g = r.f32_array((d,))
    lnf_b = r.f32_array((d,))
    unembed = r.f32_array((d, cfg.vocab))
    r.expect_end()
    model = Model(config=cfg, embed=embed, pos_embed=pos_embed, layers=layers,
                  lnf_g=lnf_g, lnf_b=lnf_b, unembed=unembed)
    model.validate()
    return model


def save_token_stream(tokens, path) -> None:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("token stream must be 1-dimensional")
    if tokens.size and int(tokens.min()) < 0:
        raise ValueError("token ids must be non-negative")
    with open(path, "w") as f:
        for t in tokens:
            f.write(f"{int(t)}\n")


def load_token_stream(path) -> np.ndarray:
    values = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                values.append(int(line))
    arr = np.array(values, dtype=np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError(f"{path}: token ids must be non-negative")
    return arr


def policy_to_dict(policy: SparsityPolicy) -> dict:
    table = policy.mlp_k_table
    return {
        "mode": policy.mode,
        "mlp_k_table": None if table is None else [list(row) for row in table.rows],
        "head_density": policy.head_density,
        "layer0_dense_attention": policy.layer0_dense_attention,
        "head_ranking": policy.head_ranking,
    }


def policy_from_dict(doc: dict) -> SparsityPolicy:
    table = doc.get("mlp_k_table")
    if isinstance(table, str):
        table = LayerKTable.load(table)
    elif table is not None:
        table = LayerKTable(rows=tuple(tuple(row) for row in table))
    return SparsityPolicy(
        mode=doc.get("mode", "dense"),
        mlp_k_table=table,
        head_density=float(doc.get("head_density", 1.0)),
        layer0_dense_attention=bool(doc.get("layer0_dense_attention", True)),
        head_ranking=doc.get("head_ranking", "router"),
    )


def save_run_config(config: TransformerConfig, policy: SparsityPolicy, path) -> None:
    doc = {"model": config.to_dict(), "policy": policy_to_dict(policy)}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def load_run_config(path) -> tuple:
    """Read a run config; returns (TransformerConfig, SparsityPolicy)."""
    with open(path) as f:
        doc = json.load(f)
    if "model" not in doc:
        raise ValueError(f"{path}: missing 'model' object")
    config = TransformerConfig.from_dict(doc["model"])
    policy = policy_from_dict(doc.get("policy", {}))
    return config, policy

"""Batched transformer decode with dynamic neuron- and head-level sparsity.

The package is organized bottom-up:

* :mod:`sparsedecode.tensors` — float32 substrate, reference numerics,
  the KV cache.
* :mod:`sparsedecode.kernels` — fused gather-GEMM for neuron-sparse MLPs
  and blocked online-softmax selective-head decode attention.
* :mod:`sparsedecode.routers` — trainable neuron/head activity predictors.
* :mod:`sparsedecode.calibration` — recall metrics and the greedy
  per-layer top-k search.
* :mod:`sparsedecode.engine` — prefill/decode pipeline with dense,
  MLP-sparse, and fully sparse (MLP + attention heads) modes.
* :mod:`sparsedecode.analysis` / :mod:`sparsedecode.bench` — sparsity
  statistics and the timing harness.
"""

from .calibration import (
    GreedyConfig,
    LayerKTable,
    calibrate_all_layers,
    compute_recall,
    greedy_topk,
)
from .engine import (
    DecodeSession,
    SparsityPolicy,
    decode_step,
    evaluate_perplexity,
    generate,
    oracle_head_selection,
    prefill,
    trace_forward,
)
from .exceptions import (
    CapacityError,
    ConfigurationError,
    EmptyCacheError,
    UndefinedRecallError,
)
from .kernels import (
    BatchHeadIndex,
    FlashBlockParams,
    NeuronIndexTensor,
    OnlineSoftmaxState,
    dense_mlp_forward,
    gqa_selective_attention_decode,
    selective_gemm,
    selective_gemm_t,
    selective_head_flash_attention_decode,
    sparse_mlp_forward,
    swiglu_mlp_forward,
    union_neuron_indices,
)
from .model import LayerWeights, Model, TransformerConfig, random_model
from .routers import (
    HeadRouter,
    MlpRouter,
    RouterTrainConfig,
    SupervisionRecord,
    adamw_step,
    collect_head_supervision,
    collect_mlp_supervision,
    head_router_forward,
    mlp_router_forward,
    router_gradients,
    train_router,
)
from .tensors import (
    KVCache,
    l2_norm_per_head,
    matmul,
    naive_softmax_attention_single_head,
    topk_indices,
)

__version__ = "0.1.0"

__all__ = [
    "BatchHeadIndex",
    "CapacityError",
    "ConfigurationError",
    "DecodeSession",
    "EmptyCacheError",
    "FlashBlockParams",
    "GreedyConfig",
    "HeadRouter",
    "KVCache",
    "LayerKTable",
    "LayerWeights",
    "MlpRouter",
    "Model",
    "NeuronIndexTensor",
    "OnlineSoftmaxState",
    "RouterTrainConfig",
    "SparsityPolicy",
    "SupervisionRecord",
    "TransformerConfig",
    "UndefinedRecallError",
    "adamw_step",
    "calibrate_all_layers",
    "collect_head_supervision",
    "collect_mlp_supervision",
    "compute_recall",
    "decode_step",
    "dense_mlp_forward",
    "evaluate_perplexity",
    "generate",
    "gqa_selective_attention_decode",
    "greedy_topk",
    "head_router_forward",
    "l2_norm_per_head",
    "matmul",
    "mlp_router_forward",
    "naive_softmax_attention_single_head",
    "oracle_head_selection",
    "prefill",
    "random_model",
    "router_gradients",
    "selective_gemm",
    "selective_gemm_t",
    "selective_head_flash_attention_decode",
    "sparse_mlp_forward",
    "swiglu_mlp_forward",
    "topk_indices",
    "trace_forward",
    "train_router",
    "union_neuron_indices",
]

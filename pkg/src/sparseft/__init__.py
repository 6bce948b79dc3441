"""Sparse fine-tuning building blocks on numpy."""
from __future__ import annotations

from .attention import CsrAttention, MhaWeights, PQState, dense_mha, sddmm, sparse_attention, sparse_mha, sparse_row_softmax, spmm
from .bench import ProfileReport, run_profile
from .block import TransformerBlock, adapt_model, block_forward, trainable_count
from .config import BlockConfig, SparsityConfig, load_presets, preset
from .counters import CostCounters, annotate, counting
from .errors import ConfigError, DegenerateRowError, NonFiniteError, ShapeError
from .ffn import GroupedFfnWeights, RouteDecision, bsr_mask_bytes, bspmv_ffn, dense_ffn, load_balance_loss, route
from .lora import Linear, LoraLinear, lora_forward, merge
from .pq import Codebooks, assign_codes, init_codebooks, quantization_error, update_codebooks
from .tensor import Tensor, backward, no_grad, precision
from .topl import CsrPattern, TopLIndices, build_csr, select_topl
from .train import gen_random_sequences, run_train, toy_model

__version__ = "0.1.0"

__all__ = [
    "BlockConfig",
    "Codebooks",
    "ConfigError",
    "CostCounters",
    "CsrAttention",
    "CsrPattern",
    "DegenerateRowError",
    "GroupedFfnWeights",
    "Linear",
    "LoraLinear",
    "MhaWeights",
    "NonFiniteError",
    "PQState",
    "ProfileReport",
    "RouteDecision",
    "ShapeError",
    "SparsityConfig",
    "Tensor",
    "TopLIndices",
    "TransformerBlock",
    "adapt_model",
    "annotate",
    "assign_codes",
    "backward",
    "block_forward",
    "bsr_mask_bytes",
    "bspmv_ffn",
    "build_csr",
    "counting",
    "dense_ffn",
    "dense_mha",
    "gen_random_sequences",
    "init_codebooks",
    "load_balance_loss",
    "load_presets",
    "lora_forward",
    "merge",
    "no_grad",
    "precision",
    "preset",
    "quantization_error",
    "route",
    "run_profile",
    "run_train",
    "sddmm",
    "select_topl",
    "sparse_attention",
    "sparse_mha",
    "sparse_row_softmax",
    "spmm",
    "toy_model",
    "trainable_count",
    "update_codebooks",
]

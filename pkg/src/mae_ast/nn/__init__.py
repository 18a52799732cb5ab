from . import ops
from .blocks import (
    TransformerBlockConfig,
    block_param_count,
    init_block,
    multi_head_self_attention,
    sinusoidal_pe,
    transformer_block,
    trunc_normal,
)
from .checkpoint import load_checkpoint, read_manifest, read_sidecar, save_checkpoint
from .optim import AdamHyper, AdamState, adam_step, poly_decay_lr
from .tensor import TRACKER, MemoryTracker, NonFiniteError, Tensor, fault_context, no_grad, release_grad

__all__ = [
    "ops",
    "Tensor",
    "TRACKER",
    "MemoryTracker",
    "NonFiniteError",
    "fault_context",
    "no_grad",
    "release_grad",
    "TransformerBlockConfig",
    "block_param_count",
    "init_block",
    "multi_head_self_attention",
    "transformer_block",
    "sinusoidal_pe",
    "trunc_normal",
    "AdamHyper",
    "AdamState",
    "adam_step",
    "poly_decay_lr",
    "save_checkpoint",
    "load_checkpoint",
    "read_manifest",
    "read_sidecar",
]

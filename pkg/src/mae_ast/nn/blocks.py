"""Pre-LN transformer blocks and fixed sinusoidal positional embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import ops
from .tensor import Tensor, fault_context


@dataclass(frozen=True)
class TransformerBlockConfig:
    d: int = 768
    heads: int = 12
    mlp_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def init_block(cfg: TransformerBlockConfig, rng: np.random.Generator, prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    d, h = cfg.d, cfg.d * cfg.mlp_ratio

    def param(arr):
        return Tensor(arr.astype(dtype), requires_grad=True)

    return {
        f"{prefix}.ln1.weight": param(np.ones(d)),
        f"{prefix}.ln1.bias": param(np.zeros(d)),
        f"{prefix}.attn.qkv.weight": param(trunc_normal(rng, (d, 3 * d), dtype=dtype)),
        f"{prefix}.attn.qkv.bias": param(np.zeros(3 * d)),
        f"{prefix}.attn.proj.weight": param(trunc_normal(rng, (d, d), dtype=dtype)),
        f"{prefix}.attn.proj.bias": param(np.zeros(d)),
        f"{prefix}.ln2.weight": param(np.ones(d)),
        f"{prefix}.ln2.bias": param(np.zeros(d)),
        f"{prefix}.mlp.fc1.weight": param(trunc_normal(rng, (d, h), dtype=dtype)),
        f"{prefix}.mlp.fc1.bias": param(np.zeros(h)),
        f"{prefix}.mlp.fc2.weight": param(trunc_normal(rng, (h, d), dtype=dtype)),
        f"{prefix}.mlp.fc2.bias": param(np.zeros(d)),
    }


def block_param_count(d: int, mlp_ratio: int = 4) -> int:
    h = d * mlp_ratio
    return 2 * 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d)


def multi_head_self_attention(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: TransformerBlockConfig,
    probe: Optional[Callable[[str, np.ndarray], None]] = None,
) -> Tensor:
    """Scaled dot-product self-attention over the second-to-last axis of ``x`` [..., L, d]."""
    *lead, L, d = x.shape
    if L < 1:
        raise ValueError("attention over an empty sequence")
    h, hd = cfg.heads, cfg.head_dim
    qkv = ops.linear(x, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
    # [..., L, 3, h, hd] -> [3, ..., h, L, hd]
    qkv = qkv.reshape(*lead, L, 3, h, hd)
    nl = len(lead)
    qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.matmul(ops.scale(q, 1.0 / np.sqrt(hd)), k.transpose(*range(nl + 1), nl + 2, nl + 1))
    attn = ops.softmax(scores, axis=-1)
    if probe is not None:
        probe("attn", attn.data)
    ctx = ops.matmul(attn, v)
    # [..., h, L, hd] -> [..., L, h*hd]
    ctx = ctx.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, L, d)
    return ops.linear(ctx, params[f"{prefix}.attn.proj.weight"], params[f"{prefix}.attn.proj.bias"])


def mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = ops.gelu(ops.linear(x, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    return ops.linear(hidden, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])


def transformer_block(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    cfg: TransformerBlockConfig,
    probe: Optional[Callable[[str, np.ndarray], None]] = None,
) -> Tensor:
    """``x + MHSA(LN(x))`` followed by ``+ MLP(LN(.))``."""
    with fault_context(prefix):
        ln1 = ops.layer_norm(x, params[f"{prefix}.ln1.weight"], params[f"{prefix}.ln1.bias"], cfg.ln_eps)
        x = ops.add(x, multi_head_self_attention(ln1, params, prefix, cfg, probe))
        ln2 = ops.layer_norm(x, params[f"{prefix}.ln2.weight"], params[f"{prefix}.ln2.bias"], cfg.ln_eps)
        return ops.add(x, mlp(ln2, params, prefix))


def sinusoidal_pe(n_positions: int, d: int, dtype=np.float64) -> np.ndarray:
    """PE[pos, 2i] = sin(pos / 10000**(2i/d)), PE[pos, 2i+1] = cos(same)."""
    if d % 2:
        raise ValueError(f"sinusoidal embedding width must be even, got {d}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos / freq
    pe = np.empty((n_positions, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe.astype(dtype)

"""Asymmetric encoder/decoder spectrogram transformer and the mask-token baseline.

Batched internals work on token arrays shaped [B, N, d_in] with per-clip index
arrays ``unmasked`` [B, K] and ``masked`` [B, M] (every clip in a call must
share K and M). The single-clip wrappers take a :class:`TokenBatch` and a
:class:`MaskPlan` and drop the batch axis.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .masking import MaskPlan
from .nn import ops
from .nn.blocks import TransformerBlockConfig, block_param_count, init_block, sinusoidal_pe, transformer_block, trunc_normal
from .nn.tensor import Tensor, fault_context
from .tokenizer import TokenBatch, TokenizationMode


class ModelError(ValueError):
    pass


class Variant(str, enum.Enum):
    MAE_AST = "mae-ast"
    WITH_MASK_TOKENS = "with-mask-tokens"


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 6
    dec_layers: int = 2
    d: int = 768
    heads: int = 12
    mode: TokenizationMode = field(default_factory=TokenizationMode.patch)
    variant: Variant = Variant.MAE_AST
    d_in: int = 256
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ModelError("layer counts must be non-negative")
        if self.variant is Variant.WITH_MASK_TOKENS and self.enc_layers != 0:
            raise ModelError("the mask-token baseline runs all depth in the decoder path (enc_layers=0)")
        if self.d_in != self.mode.d_in:
            raise ModelError(f"d_in {self.d_in} does not match {self.mode.kind.value} tokens ({self.mode.d_in})")
        TransformerBlockConfig(self.d, self.heads, self.mlp_ratio)

    @property
    def block(self) -> TransformerBlockConfig:
        return TransformerBlockConfig(self.d, self.heads, self.mlp_ratio)

    @property
    def total_layers(self) -> int:
        return self.enc_layers + self.dec_layers

    @classmethod
    def baseline(cls, layers: int, **kw) -> "ModelConfig":
        """The "w/ [M]" counterpart: every layer sees all N tokens."""
        return cls(enc_layers=0, dec_layers=layers, variant=Variant.WITH_MASK_TOKENS, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.kind.value
        out["variant"] = self.variant.value
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        raw["mode"] = TokenizationMode.parse(raw.get("mode", "patch"))
        raw["variant"] = Variant(raw.get("variant", Variant.MAE_AST.value))
        return cls(**raw)


@dataclass
class PretrainOutput:
    recon_pred: Tensor  # [..., M, d_in]
    class_pred: Tensor  # [..., M, d_in]
    targets: np.ndarray  # [..., M, d_in]
    masked: np.ndarray  # [..., M]


def param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of :func:`init_params` (pretraining heads included)."""
    d, din = cfg.d, cfg.d_in
    embed = din * d + d
    blocks = cfg.total_layers * block_param_count(d, cfg.mlp_ratio)
    mask_token = d
    dec_norm = 2 * d
    heads = 2 * (d * din + din)
    return embed + blocks + mask_token + dec_norm + heads


def init_params(cfg: ModelConfig, seed=0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, din = cfg.d, cfg.d_in

    def param(arr):
        return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

    params = {
        "embed.weight": param(trunc_normal(rng, (din, d), dtype=dtype)),
        "embed.bias": param(np.zeros(d)),
    }
    for i in range(cfg.enc_layers):
        params.update(init_block(cfg.block, rng, f"encoder.{i}", dtype))
    params["decoder.mask_token"] = param(rng.normal(0.0, 0.02, d))
    for i in range(cfg.dec_layers):
        params.update(init_block(cfg.block, rng, f"decoder.{i}", dtype))
    params["decoder.norm.weight"] = param(np.ones(d))
    params["decoder.norm.bias"] = param(np.zeros(d))
    for head in ("recon", "cls"):
        params[f"head.{head}.weight"] = param(trunc_normal(rng, (d, din), dtype=dtype))
        params[f"head.{head}.bias"] = param(np.zeros(din))
    return params


def init_classifier(d: int, n_classes: int, seed=0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {
        "classifier.weight": Tensor(trunc_normal(rng, (d, n_classes), dtype=dtype), requires_grad=True),
        "classifier.bias": Tensor(np.zeros(n_classes, dtype=dtype), requires_grad=True),
    }


def encoder_param_names(params) -> list[str]:
    return [k for k in params if k.startswith(("embed.", "encoder."))]


def _as_batch(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    return idx[None, :] if idx.ndim == 1 else idx


class MaeAst:
    """Holds a config and a parameter dict; all forward passes are differentiable.

    Set ``trace`` to a list to record ``(stage, layer, seq_len)`` for every
    transformer block evaluated.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.trace: Optional[list] = None
        self._pe: Optional[np.ndarray] = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0, dtype=np.float32) -> "MaeAst":
        return cls(cfg, init_params(cfg, seed, dtype))

    @property
    def dtype(self):
        return self.params["embed.weight"].dtype

    def pe(self, n: int) -> np.ndarray:
        if self._pe is None or self._pe.shape[0] < n:
            self._pe = sinusoidal_pe(max(n, 512), self.cfg.d, self.dtype)
        return self._pe[:n]

    def _blocks(self, x: Tensor, stage: str, n_layers: int) -> Tensor:
        for i in range(n_layers):
            if self.trace is not None:
                self.trace.append((stage, i, x.shape[-2]))
            x = transformer_block(x, self.params, f"{stage}.{i}", self.cfg.block)
        return x

    def _embed(self, tokens: np.ndarray, idx: np.ndarray) -> Tensor:
        """Project the rows of ``tokens`` selected by ``idx`` and add PE at their original positions."""
        rows = np.take_along_axis(tokens, idx[..., None], axis=-2).astype(self.dtype, copy=False)
        x = ops.linear(Tensor(rows), self.params["embed.weight"], self.params["embed.bias"])
        return ops.add(x, self.pe(tokens.shape[-2])[idx])

    def _heads(self, hidden: Tensor, tokens: np.ndarray, masked: np.ndarray) -> PretrainOutput:
        p = self.params
        h = ops.layer_norm(hidden, p["decoder.norm.weight"], p["decoder.norm.bias"], self.cfg.block.ln_eps)
        h = ops.gather_rows(h, masked)
        recon = ops.linear(h, p["head.recon.weight"], p["head.recon.bias"])
        cls = ops.linear(h, p["head.cls.weight"], p["head.cls.bias"])
        targets = np.take_along_axis(tokens, masked[..., None], axis=-2).astype(self.dtype, copy=False)
        return PretrainOutput(recon, cls, targets, masked)

    # batched paths ---------------------------------------------------------

    def encode_batch(self, tokens: np.ndarray, unmasked: np.ndarray) -> Tensor:
        if unmasked.shape[-1] == 0:
            raise ModelError("encoder needs at least one unmasked token")
        with fault_context("encoder"):
            x = self._embed(tokens, unmasked)
            return self._blocks(x, "encoder", self.cfg.enc_layers)

    def decode_batch(
        self,
        enc_out: Tensor,
        tokens: np.ndarray,
        unmasked: np.ndarray,
        masked: np.ndarray,
        add_pe: bool = True,
        return_hidden: bool = False,
    ):
        if enc_out.shape[-2] != unmasked.shape[-1]:
            raise ModelError(f"{enc_out.shape[-2]} encoder rows for {unmasked.shape[-1]} unmasked positions")
        n = unmasked.shape[-1] + masked.shape[-1]
        if n != tokens.shape[-2]:
            raise ModelError(f"mask covers {n} positions but clip has {tokens.shape[-2]} tokens")
        with fault_context("decoder"):
            x = ops.assemble_rows(enc_out, self.params["decoder.mask_token"], unmasked, masked)
            if add_pe:
                x = ops.add(x, self.pe(n))
            x = self._blocks(x, "decoder", self.cfg.dec_layers)
            if return_hidden:
                return x
            return self._heads(x, tokens, masked)

    def mask_token_forward_batch(self, tokens: np.ndarray, unmasked: np.ndarray, masked: np.ndarray) -> PretrainOutput:
        """All N positions (projected tokens or the shared mask embedding, plus PE) through every layer."""
        n = tokens.shape[-2]
        if unmasked.shape[-1] + masked.shape[-1] != n:
            raise ModelError("mask does not partition the clip")
        p = self.params
        with fault_context("decoder"):
            rows = np.take_along_axis(tokens, unmasked[..., None], axis=-2).astype(self.dtype, copy=False)
            vis = ops.linear(Tensor(rows), p["embed.weight"], p["embed.bias"])
            x = ops.add(ops.assemble_rows(vis, p["decoder.mask_token"], unmasked, masked), self.pe(n))
            x = self._blocks(x, "decoder", self.cfg.dec_layers)
            return self._heads(x, tokens, masked)

    def pretrain_forward(self, tokens: np.ndarray, unmasked: np.ndarray, masked: np.ndarray) -> PretrainOutput:
        tokens = np.asarray(tokens)
        if tokens.ndim == 2:
            tokens = tokens[None]
        unmasked, masked = _as_batch(unmasked), _as_batch(masked)
        if self.cfg.variant is Variant.WITH_MASK_TOKENS:
            return self.mask_token_forward_batch(tokens, unmasked, masked)
        return self.decode_batch(self.encode_batch(tokens, unmasked), tokens, unmasked, masked)

    def encode_all(self, tokens: np.ndarray) -> Tensor:
        """Encoder over every token (no masking), as used for fine-tuning."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 2:
            tokens = tokens[None]
        n = tokens.shape[-2]
        if n == 0:
            raise ModelError("empty token batch")
        idx = np.broadcast_to(np.arange(n), tokens.shape[:-1])
        return self.encode_batch(tokens, idx)

    def pooled(self, tokens: np.ndarray) -> Tensor:
        return ops.mean(self.encode_all(tokens), axis=-2)

    # single-clip API -------------------------------------------------------

    def encode(self, tb: TokenBatch, plan: MaskPlan) -> Tensor:
        _check_plan(tb, plan)
        out = self.encode_batch(tb.tokens[None], _as_batch(plan.unmasked))
        return out[0]

    def decode(self, enc_out: Tensor, plan: MaskPlan, tb: TokenBatch, add_pe: bool = True, return_hidden: bool = False):
        _check_plan(tb, plan)
        enc = enc_out.reshape(1, *enc_out.shape) if enc_out.ndim == 2 else enc_out
        out = self.decode_batch(enc, tb.tokens[None], _as_batch(plan.unmasked), _as_batch(plan.masked), add_pe, return_hidden)
        return out[0] if return_hidden else _squeeze(out)

    def forward_with_mask_tokens(self, tb: TokenBatch, plan: MaskPlan) -> PretrainOutput:
        if self.cfg.variant is not Variant.WITH_MASK_TOKENS:
            raise ModelError("forward_with_mask_tokens needs the with-mask-tokens variant")
        _check_plan(tb, plan)
        return _squeeze(self.mask_token_forward_batch(tb.tokens[None], _as_batch(plan.unmasked), _as_batch(plan.masked)))

    def finetune_forward(self, tb: TokenBatch | np.ndarray, head: dict[str, Tensor]) -> Tensor:
        """Mean-pooled encoder states -> linear classifier logits ([n_classes] for one clip)."""
        tokens = tb.tokens if isinstance(tb, TokenBatch) else np.asarray(tb)
        if tokens.shape[-2] == 0:
            raise ModelError("empty token batch")
        logits = ops.linear(self.pooled(tokens), head["classifier.weight"], head["classifier.bias"])
        return logits[0] if tokens.ndim == 2 else logits


def _check_plan(tb: TokenBatch, plan: MaskPlan) -> None:
    if plan.n_tokens != tb.n_tokens:
        raise ModelError(f"mask plan over {plan.n_tokens} tokens does not match clip of {tb.n_tokens}")


def _squeeze(out: PretrainOutput) -> PretrainOutput:
    return PretrainOutput(out.recon_pred[0], out.class_pred[0], out.targets[0], out.masked[0])


def layer_flops(L: float, d: int, mlp_ratio: int = 4) -> float:
    """Forward multiply-adds x2 for one block at sequence length L: 8Ld^2 + 4L^2d attention, 16Ld^2 MLP."""
    return 8 * L * d * d + 4 * L * L * d + 4 * mlp_ratio * L * d * d


def flops_estimate(cfg: ModelConfig, n: int, p: float, backward: bool = True) -> float:
    """Analytic FLOPs of the transformer stack for one clip of ``n`` tokens at mask ratio ``p``."""
    if cfg.variant is Variant.WITH_MASK_TOKENS:
        fwd = cfg.total_layers * layer_flops(n, cfg.d, cfg.mlp_ratio)
    else:
        fwd = cfg.enc_layers * layer_flops((1.0 - p) * n, cfg.d, cfg.mlp_ratio) + cfg.dec_layers * layer_flops(n, cfg.d, cfg.mlp_ratio)
    return 3.0 * fwd if backward else fwd

"""Reconstruction (MSE) and within-clip InfoNCE pretraining losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PretrainOutput
from .nn import ops
from .nn.tensor import Tensor, no_grad


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lam: float = 10.0
    use_generative: bool = True
    use_discriminative: bool = True

    def __post_init__(self):
        if not (self.use_generative or self.use_discriminative):
            raise LossError("at least one of the generative / discriminative losses must be enabled")

    @classmethod
    def from_name(cls, name: str, lam: float = 10.0) -> "LossConfig":
        flags = {
            "joint": (True, True),
            "generative": (True, False),
            "discriminative": (False, True),
        }
        try:
            gen, disc = flags[name]
        except KeyError:
            raise LossError(f"unknown loss mode {name!r}; expected one of {sorted(flags)}") from None
        return cls(lam, gen, disc)


def recon_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise LossError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.shape[-2] < 1:
        raise LossError("reconstruction loss over zero masked tokens")
    return ops.mse_loss(pred, target)


def infonce_loss(c: Tensor, x) -> Tensor:
    """InfoNCE with negatives drawn from the other masked tokens of the same clip.

    ``c`` and ``x`` are [..., K, D]; logits are raw dot products ``c_i . x_j``
    and the loss is the mean over clips of the per-clip mean over i.
    """
    x = np.asarray(x)
    if c.shape != x.shape:
        raise LossError(f"predictions {c.shape} and inputs {x.shape} differ")
    k = c.shape[-2]
    if k < 2:
        raise LossError("InfoNCE needs at least two masked tokens per clip")
    logits = ops.matmul(c, np.swapaxes(x, -1, -2).astype(c.dtype, copy=False))
    labels = np.broadcast_to(np.arange(k), logits.shape[:-1])
    return ops.cross_entropy(logits, labels)


def infonce_from_similarity(sim: np.ndarray) -> float:
    """InfoNCE value of a precomputed [K, K] similarity matrix (positives on the diagonal)."""
    sim = np.asarray(sim, dtype=np.float64)
    return float(-np.mean(np.diagonal(ops.log_softmax(sim))))


def joint_loss(out: PretrainOutput, cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """(total, recon, nce) with total = nce + lam * recon over the enabled terms.

    A disabled term is still evaluated for logging, outside the autodiff graph.
    """
    if cfg.use_generative:
        recon = recon_loss(out.recon_pred, out.targets)
    else:
        with no_grad():
            recon = recon_loss(out.recon_pred, out.targets)
    if cfg.use_discriminative:
        nce = infonce_loss(out.class_pred, out.targets)
    else:
        with no_grad():
            nce = infonce_loss(out.class_pred, out.targets)

    if cfg.use_generative and cfg.use_discriminative:
        total = ops.add(nce, ops.scale(recon, cfg.lam))
    elif cfg.use_generative:
        total = ops.scale(recon, cfg.lam)
    else:
        total = nce
    return total, recon, nce

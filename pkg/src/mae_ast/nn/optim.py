"""Adam with decoupled weight decay and a polynomial learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import check_finite


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    t: int,
    hyper: AdamHyper,
) -> None:
    """One in-place Adam update at step ``t`` (1-based).

    Weight decay is decoupled: ``p -= lr * wd * p`` before the moment update.
    Parameters without an entry in ``grads`` are treated as frozen and left alone.
    """
    if t < 1:
        raise ValueError("adam step counter is 1-based")
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, p in params.items():
        if name not in state.m or state.m[name].shape != p.shape:
            raise ValueError(f"optimizer state does not match parameter {name!r}")
        g = grads.get(name)
        if g is None:
            continue
        check_finite(g, f"gradient of {name}")
        m, v = state.m[name], state.v[name]
        if hyper.weight_decay:
            p *= 1.0 - hyper.lr * hyper.weight_decay
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        p -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)


def poly_decay_lr(t: int, total: int, lr0: float = 1e-4, power: float = 1.0, warmup: int = 0, end_lr: float = 0.0) -> float:
    """Linear warmup to ``lr0`` then ``lr0 * (1 - t/T)**power`` down to ``end_lr``."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if warmup and t < warmup:
        return lr0 * t / warmup
    frac = (t - warmup) / max(total - warmup, 1)
    return end_lr + (lr0 - end_lr) * (1.0 - frac) ** power

"""Mask sampling: random, chunked-patch and span (frame-chunked) strategies.

All samplers take an explicit seed (or ``numpy.random.Generator``) and never
touch global random state.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CHUNK_SIZES = (3, 4, 5)
SPAN_LENGTH = 10
MAX_REDRAWS = 100


class MaskError(ValueError):
    pass


class MaskStrategy(str, enum.Enum):
    PATCH_RANDOM = "patch-random"
    PATCH_CHUNKED = "patch-chunked"
    FRAME_RANDOM = "frame-random"
    FRAME_CHUNKED = "frame-chunked"

    @property
    def token_kind(self) -> str:
        return self.value.split("-")[0]


@dataclass(frozen=True)
class MaskPlan:
    masked: np.ndarray
    unmasked: np.ndarray
    p_target: float
    strategy: MaskStrategy
    notes: tuple[str, ...] = field(default=())

    @property
    def n_tokens(self) -> int:
        return len(self.masked) + len(self.unmasked)

    @property
    def fraction(self) -> float:
        return len(self.masked) / self.n_tokens

    def bool_mask(self) -> np.ndarray:
        out = np.zeros(self.n_tokens, dtype=bool)
        out[self.masked] = True
        return out


@dataclass(frozen=True)
class SpanMaskCalibration:
    M: int
    P: float
    p_target: float


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def target_count(n: int, p: float) -> int:
    """round-half-up of p*n."""
    return int(math.floor(p * n + 0.5))


def _plan_from_bool(mask: np.ndarray, p: float, strategy: MaskStrategy, notes=()) -> MaskPlan:
    return MaskPlan(np.flatnonzero(mask), np.flatnonzero(~mask), p, strategy, tuple(notes))


def _check_exact(n: int, p: float) -> int:
    if not 0.0 < p < 1.0:
        raise MaskError(f"mask ratio {p} outside (0, 1)")
    if n < 2:
        raise MaskError(f"need at least 2 tokens, got {n}")
    k = target_count(n, p)
    if not 1 <= k <= n - 1:
        raise MaskError(f"p={p} on {n} tokens leaves an empty masked or unmasked side")
    return k


def mask_random(n: int, p: float, seed, strategy: MaskStrategy = MaskStrategy.PATCH_RANDOM) -> MaskPlan:
    """Shuffle and mask all but the first ``n - round(p*n)`` tokens."""
    k = _check_exact(n, p)
    perm = _rng(seed).permutation(n)
    mask = np.zeros(n, dtype=bool)
    mask[perm[n - k :]] = True
    return _plan_from_bool(mask, p, strategy)


def mask_patch_chunked(n_time: int, n_rows: int, p: float, seed) -> MaskPlan:
    """Drop CxC squares (C drawn once per plan from {3,4,5}) on the time x channel grid
    until at least round(p*N) tokens are covered, then un-mask random extras."""
    n = n_time * n_rows
    k = _check_exact(n, p)
    rng = _rng(seed)
    if n_rows < CHUNK_SIZES[0] or n_time < CHUNK_SIZES[0]:
        note = f"grid {n_time}x{n_rows} too small for {CHUNK_SIZES[0]}x{CHUNK_SIZES[0]} chunks; used random masking"
        log.warning(note)
        plan = mask_random(n, p, rng, MaskStrategy.PATCH_CHUNKED)
        return MaskPlan(plan.masked, plan.unmasked, p, MaskStrategy.PATCH_CHUNKED, (note,))
    c = int(rng.choice(CHUNK_SIZES))
    grid = np.zeros((n_time, n_rows), dtype=bool)
    covered = 0
    while covered < k:
        t0 = rng.integers(n_time)
        r0 = rng.integers(n_rows)
        grid[t0 : t0 + c, r0 : r0 + c] = True
        covered = int(grid.sum())
    mask = grid.reshape(-1)  # time-major, channel fastest
    extra = covered - k
    if extra:
        drop = rng.choice(np.flatnonzero(mask), size=extra, replace=False)
        mask[drop] = False
    return _plan_from_bool(mask, p, MaskStrategy.PATCH_CHUNKED)


def calibrate_span_p(p_target: float, M: int = SPAN_LENGTH) -> SpanMaskCalibration:
    """Start probability P such that spans of length M cover a fraction p_target on average."""
    if not 0.0 < p_target < 1.0:
        raise MaskError(f"mask ratio {p_target} outside (0, 1)")
    if M < 1:
        raise MaskError("span length must be >= 1")
    P = 1.0 - (1.0 - p_target) ** (1.0 / M)
    return SpanMaskCalibration(M, P, p_target)


def mask_frame_chunked(n: int, cal: SpanMaskCalibration, seed) -> MaskPlan:
    """Each index starts a length-M span with probability P; covered indices are masked."""
    if n <= cal.M:
        raise MaskError(f"sequence of {n} tokens not longer than span length {cal.M}")
    rng = _rng(seed)
    kernel = np.ones(cal.M, dtype=np.int32)
    for _ in range(MAX_REDRAWS):
        starts = rng.random(n) < cal.P
        mask = np.convolve(starts.astype(np.int32), kernel)[:n] > 0
        if mask.any() and not mask.all():
            return _plan_from_bool(mask, cal.p_target, MaskStrategy.FRAME_CHUNKED)
    raise MaskError(f"{MAX_REDRAWS} consecutive span draws were fully masked or fully unmasked")


def sample_mask(strategy: MaskStrategy | str, n_time: int, n_rows: int, p: float, seed) -> MaskPlan:
    strategy = MaskStrategy(strategy)
    n = n_time * n_rows
    if strategy is MaskStrategy.PATCH_CHUNKED:
        return mask_patch_chunked(n_time, n_rows, p, seed)
    if strategy is MaskStrategy.FRAME_CHUNKED:
        return mask_frame_chunked(n, calibrate_span_p(p), seed)
    return mask_random(n, p, seed, strategy)


def broadcast_mask(plan: MaskPlan, batch: Sequence) -> list[MaskPlan]:
    """Reuse one plan for every clip in ``batch`` (items expose ``n_tokens``)."""
    sizes = {tb.n_tokens for tb in batch}
    if sizes and sizes != {plan.n_tokens}:
        raise MaskError(f"cannot broadcast a {plan.n_tokens}-token mask over clips of sizes {sorted(sizes)}")
    return [plan for _ in batch]


def clustering_stat(plan: MaskPlan, n_rows: int = 1) -> float:
    """Mean number of masked 4-neighbours (time +-1, channel +-1) per masked token."""
    n = plan.n_tokens
    grid = plan.bool_mask().reshape(n // n_rows, n_rows)
    padded = np.pad(grid, 1)
    neigh = (
        padded[:-2, 1:-1].astype(np.int32)
        + padded[2:, 1:-1]
        + padded[1:-1, :-2]
        + padded[1:-1, 2:]
    )
    return float(neigh[grid].mean()) if grid.any() else 0.0

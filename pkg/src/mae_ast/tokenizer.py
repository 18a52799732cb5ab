"""Patch (16x16) and frame (128x2) tokenization of spectrograms.

Tokens are unrolled channel-first within each time step: token ``i`` sits at
time step ``i // n_rows`` and channel row ``i % n_rows``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .features import N_MELS, Spectrogram


class TokenizerError(ValueError):
    pass


class TokenKind(str, enum.Enum):
    PATCH = "patch"
    FRAME = "frame"


@dataclass(frozen=True)
class TokenizationMode:
    kind: TokenKind
    patch_mels: int
    patch_frames: int

    @classmethod
    def patch(cls) -> "TokenizationMode":
        return cls(TokenKind.PATCH, 16, 16)

    @classmethod
    def frame(cls) -> "TokenizationMode":
        return cls(TokenKind.FRAME, 128, 2)

    @classmethod
    def parse(cls, name: str) -> "TokenizationMode":
        kind = TokenKind(name.lower())
        return cls.patch() if kind is TokenKind.PATCH else cls.frame()

    @property
    def n_rows(self) -> int:
        return N_MELS // self.patch_mels

    @property
    def d_in(self) -> int:
        return self.patch_mels * self.patch_frames


@dataclass(frozen=True)
class TokenBatch:
    tokens: np.ndarray  # [N, d_in]
    n_time_steps: int
    n_channel_rows: int
    mode: TokenizationMode
    clip_id: str = ""

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def n_tokens_for(n_frames: int, mode: TokenizationMode) -> int:
    return (n_frames // mode.patch_frames) * mode.n_rows


def tokenize(s: Spectrogram, mode: TokenizationMode, clip_id: str = "") -> TokenBatch:
    """Cut ``s`` into non-overlapping tokens, dropping a trailing partial token."""
    if not s.normalized:
        raise TokenizerError("tokenize expects a normalized spectrogram")
    pm, pf, rows = mode.patch_mels, mode.patch_frames, mode.n_rows
    n_time = s.n_frames // pf
    if n_time < 1:
        raise TokenizerError(f"{s.n_frames} frames is shorter than one {pf}-frame token")
    kept = s.values[:, : n_time * pf]
    # [rows*pm, T*pf] -> [rows, pm, T, pf] -> [T, rows, pm, pf]
    grid = kept.reshape(rows, pm, n_time, pf).transpose(2, 0, 1, 3)
    tokens = np.ascontiguousarray(grid.reshape(n_time * rows, pm * pf))
    return TokenBatch(tokens, n_time, rows, mode, clip_id)


def token_position(i: int, n_rows: int) -> tuple[int, int]:
    """Flat token index -> (time step, channel row)."""
    return divmod(i, n_rows)


def detokenize_target(tb: TokenBatch, idx: int) -> np.ndarray:
    """The normalized input token at ``idx``, as the model sees it."""
    if not 0 <= idx < tb.n_tokens:
        raise TokenizerError(f"token index {idx} outside [0, {tb.n_tokens})")
    return tb.tokens[idx]


def token_region(tb: TokenBatch, idx: int) -> tuple[slice, slice]:
    """(mel slice, frame slice) of the spectrogram cells that make up token ``idx``."""
    t, c = token_position(idx, tb.n_channel_rows)
    pm, pf = tb.mode.patch_mels, tb.mode.patch_frames
    return slice(c * pm, (c + 1) * pm), slice(t * pf, (t + 1) * pf)

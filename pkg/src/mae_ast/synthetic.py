"""Seeded synthetic audio for smoke tests and benchmarks."""

from __future__ import annotations

import numpy as np

from .features import SAMPLE_RATE, Waveform


def tone(freq_hz: float, seconds: float, rng: np.random.Generator, noise: float = 0.01) -> Waveform:
    """A sine at ``freq_hz`` with random phase and amplitude plus light white noise."""
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    amp = rng.uniform(0.2, 0.6)
    x = amp * np.sin(2 * np.pi * freq_hz * t + rng.uniform(0, 2 * np.pi))
    x += noise * rng.standard_normal(n)
    return Waveform(np.clip(x, -1.0, 1.0))


def tone_corpus(pitches, per_class: int, seconds: float, seed: int = 0, jitter: float = 0.02):
    """``(waveforms, labels)`` with ``per_class`` clips at each pitch (frequency jittered by +-jitter)."""
    rng = np.random.default_rng(seed)
    waves, labels = [], []
    for label, f0 in enumerate(pitches):
        for _ in range(per_class):
            f = f0 * (1.0 + rng.uniform(-jitter, jitter))
            waves.append(tone(f, seconds, rng))
            labels.append(label)
    return waves, labels


def noise_tokens(batch: int, n: int, d_in: int, seed: int = 0, dtype=np.float32) -> np.ndarray:
    """Normalized-scale Gaussian tokens (std 1/2)."""
    return (0.5 * np.random.default_rng(seed).standard_normal((batch, n, d_in))).astype(dtype)

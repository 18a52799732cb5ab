"""Waveform ingestion, 128-bin log-Mel filterbanks, and corpus normalization."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 128
LOG_FLOOR = 1e-10


class AudioError(ValueError):
    """Input audio or features violate the ingestion contract."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample rate {self.sample_rate} unsupported (need {SAMPLE_RATE})")
        if len(self.samples) < WIN_LENGTH:
            raise AudioError(f"clip of {len(self.samples)} samples is shorter than one {WIN_LENGTH}-sample window")


@dataclass(frozen=True)
class Spectrogram:
    """Log-Mel energies, ``values`` shaped [n_mels, n_frames]."""

    values: np.ndarray
    normalized: bool = False
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise AudioError(f"spectrogram must be [{N_MELS}, n_frames], got {self.values.shape}")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM 16 kHz RIFF/WAVE file, scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate, n = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            if channels != 1:
                raise AudioError(f"{path}: {channels} channels unsupported (mono only)")
            if width != 2:
                raise AudioError(f"{path}: {8 * width}-bit samples unsupported (PCM16 only)")
            if rate != SAMPLE_RATE:
                raise AudioError(f"{path}: sample rate {rate} unsupported (need {SAMPLE_RATE})")
            raw = wf.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise AudioError(f"{path}: not a readable PCM WAVE file ({exc})") from exc
    if len(raw) != 2 * n:
        raise AudioError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def n_frames_for(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        raise AudioError(f"clip of {n_samples} samples is shorter than one window")
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=4)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """HTK-scale triangular filters, [n_mels, n_fft // 2 + 1], unit peak height."""
    bin_hz = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def _frames(samples: np.ndarray) -> np.ndarray:
    n = n_frames_for(len(samples))
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    return samples[idx]


def log_mel(w: Waveform) -> Spectrogram:
    """Unnormalized natural-log Mel energies with a Hann window and 512-point power spectrum."""
    frames = _frames(np.asarray(w.samples, dtype=np.float64))
    window = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=-1)) ** 2
    mel = power @ mel_filterbank().T
    return Spectrogram(np.log(mel + LOG_FLOOR).T.copy())


def fit_normalizer(specs: Iterable[Spectrogram]) -> tuple[float, float]:
    """Corpus-level scalar mean and (population) standard deviation over every value."""
    total = 0.0
    count = 0
    chunks = []
    for s in specs:
        chunks.append(s.values)
        total += float(s.values.sum())
        count += s.values.size
    if not count:
        raise AudioError("cannot fit a normalizer on an empty corpus")
    mean = total / count
    sq = sum(float(((c - mean) ** 2).sum()) for c in chunks)
    return mean, float(np.sqrt(sq / count))


def normalize(s: Spectrogram, mean: float, std: float) -> Spectrogram:
    """Map to corpus mean 0 and standard deviation 1/2."""
    if not std > 0:
        raise AudioError("degenerate corpus: standard deviation is zero")
    return replace(s, values=(s.values - mean) / (2.0 * std), normalized=True)


def denormalize(s: Spectrogram, mean: float, std: float) -> Spectrogram:
    return replace(s, values=s.values * (2.0 * std) + mean, normalized=False)


# .fbank files: uint32 n_frames, uint32 n_mels, then float32 [n_frames, n_mels] row-major, little-endian

_HEADER = struct.Struct("<II")


def write_fbank(path, s: Spectrogram) -> None:
    body = np.ascontiguousarray(s.values.T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(s.n_frames, s.n_mels))
        fh.write(body.tobytes())


def read_fbank(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise AudioError(f"{path}: missing fbank header")
    n_frames, n_mels = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 4 * n_frames * n_mels
    if len(raw) != expected:
        raise AudioError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_frames, n_mels)
    return Spectrogram(values.T.astype(np.float64))

"""Frame-level features: 39-dimensional MFCCs for acoustic unit discovery.

All analysis constants are pinned here so that any reimplementation (e.g. the
test-suite reference oracle) can target the exact same contract:

* input at 16 kHz, analysis window 25 ms (400 samples), hop 10 ms (160)
* frame count T = floor((n - 400) / 160) + 1, frames fully inside the signal
* pre-emphasis 0.97 applied to the whole signal before framing
* Hamming window, FFT size 512, power spectrum |X|^2
* 26 triangular filters, HTK mel scale (2595*log10(1+f/700)), 0-8000 Hz,
  integer FFT-bin ramps
* natural log with floor 1e-10, DCT-II (orthonormal), 13 coefficients
* C0 replaced by the log energy of the pre-emphasized, windowed frame
* deltas: +-2-frame linear regression with edge replication; delta-deltas are
  deltas of the deltas
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.fft import dct

from .audio import AudioClip

SAMPLE_RATE = 16000
WIN_SAMPLES = 400
HOP_SAMPLES = 160
FRAME_RATE = SAMPLE_RATE // HOP_SAMPLES  # 100 fps
NFFT = 512
N_FILTERS = 26
N_CEPSTRA = 13
PREEMPH = 0.97
LOG_FLOOR = 1e-10
DELTA_REACH = 2


class FeatureError(ValueError):
    """Raised for inputs that violate feature-extraction preconditions."""


@dataclass(frozen=True)
class FrameFeatures:
    """A (T x D) matrix of per-frame feature vectors."""

    data: np.ndarray
    frame_rate: float
    source_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise FeatureError(f"feature matrix must be (T>=1, D>=1), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FeatureError("feature matrix contains NaN or Inf")
        if self.frame_rate <= 0:
            raise FeatureError(f"frame_rate must be positive, got {self.frame_rate}")
        object.__setattr__(self, "data", data)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FeatureStats:
    """Per-dimension mean/std used by :func:`standardize`."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise FeatureError("stats mean/std must be 1-D and the same shape")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def mel_filterbank(
    n_filters: int = N_FILTERS,
    nfft: int = NFFT,
    rate: int = SAMPLE_RATE,
    low_hz: float = 0.0,
    high_hz: float = 8000.0,
) -> np.ndarray:
    """Triangular mel filter bank, shape (n_filters, nfft//2 + 1)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    mel_edges = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2)
    bin_edges = np.floor((nfft + 1) * mel_to_hz(mel_edges) / rate).astype(int)
    bank = np.zeros((n_filters, nfft // 2 + 1))
    for j in range(n_filters):
        left, center, right = bin_edges[j], bin_edges[j + 1], bin_edges[j + 2]
        for i in range(left, center):
            bank[j, i] = (i - left) / (center - left)
        for i in range(center, right):
            bank[j, i] = (right - i) / (right - center)
    return bank


def frame_signal(samples: np.ndarray, win: int = WIN_SAMPLES, hop: int = HOP_SAMPLES) -> np.ndarray:
    """Slice a 1-D signal into fully contained frames, shape (T, win)."""
    n = samples.size
    if n < win:
        raise FeatureError(
            f"signal of {n} samples is shorter than one analysis window ({win})"
        )
    n_frames = (n - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def delta(coeffs: np.ndarray, reach: int = DELTA_REACH) -> np.ndarray:
    """Regression deltas over +-reach frames with edge replication."""
    T = coeffs.shape[0]
    denom = 2.0 * sum(n * n for n in range(1, reach + 1))
    out = np.zeros_like(coeffs)
    for n in range(1, reach + 1):
        plus = coeffs[np.minimum(np.arange(T) + n, T - 1)]
        minus = coeffs[np.maximum(np.arange(T) - n, 0)]
        out += n * (plus - minus)
    return out / denom


def mfcc39(clip: AudioClip) -> FrameFeatures:
    """13 MFCCs (C0 -> log energy) + deltas + delta-deltas, at 100 fps."""
    if clip.sample_rate != SAMPLE_RATE:
        raise FeatureError(
            f"mfcc39 expects {SAMPLE_RATE} Hz input, got {clip.sample_rate}; "
            "resample first"
        )
    emphasized = np.append(clip.samples[0], clip.samples[1:] - PREEMPH * clip.samples[:-1])
    frames = frame_signal(emphasized) * np.hamming(WIN_SAMPLES)

    energy = np.log(np.maximum(np.sum(frames * frames, axis=1), LOG_FLOOR))
    power = np.abs(np.fft.rfft(frames, NFFT)) ** 2
    mel_energy = power @ mel_filterbank().T
    cepstra = dct(np.log(np.maximum(mel_energy, LOG_FLOOR)), type=2, norm="ortho", axis=1)
    static = cepstra[:, :N_CEPSTRA].copy()
    static[:, 0] = energy

    d1 = delta(static)
    d2 = delta(d1)
    data = np.concatenate([static, d1, d2], axis=1)
    return FrameFeatures(data=data, frame_rate=FRAME_RATE, source_id=clip.source_id)


def compute_stats(feats: Iterable[FrameFeatures]) -> FeatureStats:
    """Pooled per-dimension mean/std (population) over a feature collection."""
    stacked = np.concatenate([f.data for f in feats], axis=0)
    return FeatureStats(mean=stacked.mean(axis=0), std=stacked.std(axis=0))


def standardize(feats: FrameFeatures, stats: FeatureStats) -> FrameFeatures:
    """Per-dimension (x - mean) / std; near-constant dims are only centered."""
    if stats.mean.shape[0] != feats.dim:
        raise FeatureError(
            f"stats dimension {stats.mean.shape[0]} != feature dimension {feats.dim}"
        )
    safe_std = np.where(stats.std < 1e-8, 1.0, stats.std)
    data = (feats.data - stats.mean) / safe_std
    return FrameFeatures(data=data, frame_rate=feats.frame_rate, source_id=feats.source_id)

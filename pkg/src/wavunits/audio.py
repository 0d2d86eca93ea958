"""Audio loading, resampling, and segmentation.

Everything downstream consumes mono waveforms in [-1, 1]. WAV is the only
supported container (RIFF little-endian, PCM16 or float32).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly


class AudioError(ValueError):
    """Raised for unreadable, empty, or malformed audio inputs."""


@dataclass(frozen=True)
class AudioClip:
    """Decoded mono waveform."""

    samples: np.ndarray  # float64, shape (n,), values in [-1, 1]
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError(f"clip must be mono 1-D, got shape {samples.shape}")
        if samples.size == 0:
            raise AudioError("clip has zero samples")
        if not np.all(np.isfinite(samples)):
            raise AudioError("clip contains NaN or Inf samples")
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class Segment:
    """A windowed slice of a parent recording.

    ``clip`` holds the (possibly zero-padded) window samples; onset/offset are
    in seconds relative to the parent and never exceed the parent duration.
    """

    clip: AudioClip
    onset_s: float
    offset_s: float
    parent_id: str

    def __post_init__(self):
        if not (0.0 <= self.onset_s < self.offset_s):
            raise AudioError(
                f"invalid segment bounds [{self.onset_s}, {self.offset_s}]"
            )


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file as a normalized mono clip.

    Multi-channel input is mixed down by unweighted channel averaging.
    Integer samples are scaled by 1/32768 so full-scale PCM16 maps to
    ~[-1, 1).
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"audio file not found: {path}") from None
    except Exception as exc:
        raise AudioError(f"cannot decode WAV file {path}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"zero-length audio: {path}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        raise AudioError(
            f"unsupported WAV sample format {data.dtype} in {path}; "
            "expected PCM16 or float32"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioClip(samples=samples, sample_rate=int(rate), source_id=str(path))


def save_wav(path, clip: AudioClip) -> None:
    """Write a clip as a float32 WAV (readable back by :func:`load_wav`)."""
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


# Polyphase anti-aliasing filter: Kaiser windowed sinc, 64 taps per output
# phase. Beta 8.0 gives ~80 dB stopband, plenty for the 16 kHz target.
_RESAMPLE_TAPS_PER_PHASE = 64
_RESAMPLE_KAISER_BETA = 8.0


def _design_lowpass(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half = (_RESAMPLE_TAPS_PER_PHASE // 2) * max_rate
    return firwin(2 * half + 1, 1.0 / max_rate, window=("kaiser", _RESAMPLE_KAISER_BETA))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Band-limited polyphase resampling to ``target_rate``.

    A clip already at the target rate is returned unchanged (same object), so
    resampling is idempotent in the sample rate. Output length is
    round(n_in * target_rate / in_rate).
    """
    if target_rate <= 0:
        raise AudioError(f"target_rate must be positive, got {target_rate}")
    if clip.sample_rate == target_rate:
        return clip
    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    h = _design_lowpass(up, down)
    out = resample_poly(clip.samples, up, down, window=h)
    n_out = int(round(clip.samples.size * target_rate / clip.sample_rate))
    if n_out < 1:
        raise AudioError("clip too short to resample at the requested rate")
    out = out[:n_out]
    return AudioClip(samples=out, sample_rate=int(target_rate), source_id=clip.source_id)


def window(clip: AudioClip, win_s: float, hop_s: float) -> list[Segment]:
    """Cut a clip into fixed-length, possibly overlapping segments.

    Onsets advance by ``hop_s`` while a full window fits. If the last full
    window stops short of the clip end, one extra tail segment is emitted,
    zero-padded to the window length; its ``offset_s`` is the true clip end.
    A clip shorter than the window yields a single zero-padded segment.
    """
    if not (0.0 < hop_s <= win_s):
        raise AudioError(f"need 0 < hop_s <= win_s, got hop={hop_s} win={win_s}")
    duration = clip.duration_s
    rate = clip.sample_rate
    win_n = int(round(win_s * rate))
    hop_n = int(round(hop_s * rate))
    if win_n < 1 or hop_n < 1:
        raise AudioError("window/hop shorter than one sample")

    def make(start_n: int) -> Segment:
        piece = clip.samples[start_n : start_n + win_n]
        if piece.size < win_n:
            piece = np.concatenate([piece, np.zeros(win_n - piece.size)])
        true_end = min(start_n + win_n, clip.samples.size)
        return Segment(
            clip=AudioClip(piece, rate, source_id=f"{clip.source_id}[{start_n}]"),
            onset_s=start_n / rate,
            offset_s=true_end / rate,
            parent_id=clip.source_id,
        )

    if win_s > duration:
        return [make(0)]

    segments = []
    start = 0
    while start + win_n <= clip.samples.size:
        segments.append(make(start))
        start += hop_n
    covered_end = (start - hop_n) + win_n
    if covered_end < clip.samples.size:
        segments.append(make(start))
    return segments

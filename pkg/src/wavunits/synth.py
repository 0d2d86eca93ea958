"""Deterministic synthetic corpora: tones, chirps, and noise at 16 kHz.

Generates three datasets under one root, each with its own manifest:

* ``pretrain/``  unlabeled clips built from random tone/chirp/noise syllables
* ``classify/``  1 s tone-in-noise clips in three frequency classes
* ``detect/``    long recordings with timed tone bursts and event annotations

The repo ships no audio assets; every test and demo builds its corpus here.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import AudioClip, save_wav
from .manifest import DatasetManifest, ManifestEntry, ManifestEvent, save_manifest

RATE = 16000
CLASS_FREQS = {"tone_500": 500.0, "tone_1000": 1000.0, "tone_2000": 2000.0}
BURST_FREQS = {"burst_1000": 1000.0, "burst_2000": 2000.0}


def _tone(freq, n, rng, amplitude=None):
    amp = amplitude if amplitude is not None else rng.uniform(0.3, 0.8)
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n) / RATE
    return amp * np.sin(2 * np.pi * freq * t + phase)


def _chirp(f0, f1, n, rng):
    amp = rng.uniform(0.3, 0.8)
    t = np.arange(n) / RATE
    sweep = f0 + (f1 - f0) * t / (n / RATE) / 2.0
    return amp * np.sin(2 * np.pi * sweep * t + rng.uniform(0, 2 * np.pi))


def _syllable_clip(seconds, rng):
    """A sequence of random syllables separated by near-silence."""
    n_total = int(seconds * RATE)
    out = rng.normal(0.0, 1e-3, n_total)
    pos = 0
    kinds = ["tone", "tone", "chirp", "noise"]
    while pos < n_total:
        gap = int(rng.uniform(0.05, 0.2) * RATE)
        dur = int(rng.uniform(0.2, 0.6) * RATE)
        start = pos + gap
        stop = min(start + dur, n_total)
        if stop <= start:
            break
        kind = kinds[rng.integers(len(kinds))]
        if kind == "tone":
            freq = list(CLASS_FREQS.values())[rng.integers(3)]
            piece = _tone(freq, stop - start, rng)
        elif kind == "chirp":
            piece = _chirp(500.0, 2000.0, stop - start, rng)
        else:
            piece = rng.normal(0.0, rng.uniform(0.05, 0.15), stop - start)
        out[start:stop] += piece
        pos = stop
    return np.clip(out, -1.0, 1.0)


def _write(path: Path, samples) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_wav(path, AudioClip(samples=samples, sample_rate=RATE, source_id=path.stem))


def build_pretrain_corpus(root: Path, rng, n_clips=20, clip_seconds=3.0) -> Path:
    entries = []
    for i in range(n_clips):
        rel = Path("wavs") / f"clip_{i:03d}.wav"
        _write(root / rel, _syllable_clip(clip_seconds, rng))
        entries.append(ManifestEntry(path=(root / rel).resolve(),
                                     recording_id=f"clip_{i:03d}"))
    manifest = DatasetManifest(task="pretrain", entries=tuple(entries),
                               dataset_id="synth-pretrain")
    out = root / "pretrain.json"
    save_manifest(out, manifest)
    return out


def build_classification_dataset(root: Path, rng, per_class=(8, 4, 4),
                                 clip_seconds=1.0) -> Path:
    entries = []
    counts = dict(zip(("train", "valid", "test"), per_class))
    n = int(clip_seconds * RATE)
    for label, freq in CLASS_FREQS.items():
        index = 0
        for split, count in counts.items():
            for _ in range(count):
                samples = _tone(freq, n, rng) + rng.normal(0.0, rng.uniform(0.01, 0.05), n)
                rid = f"{label}_{index:03d}"
                rel = Path("wavs") / f"{rid}.wav"
                _write(root / rel, np.clip(samples, -1.0, 1.0))
                entries.append(ManifestEntry(path=(root / rel).resolve(),
                                             recording_id=rid, split=split, label=label))
                index += 1
    manifest = DatasetManifest(task="classification",
                               classes=tuple(CLASS_FREQS),
                               entries=tuple(entries),
                               dataset_id="synth-tones")
    out = root / "classify.json"
    save_manifest(out, manifest)
    return out


def build_detection_dataset(root: Path, rng, per_split=(6, 2, 2),
                            recording_seconds=10.0, window_s=2.0, hop_s=1.0) -> Path:
    entries = []
    counts = dict(zip(("train", "valid", "test"), per_split))
    n = int(recording_seconds * RATE)
    index = 0
    for split, count in counts.items():
        for _ in range(count):
            samples = rng.normal(0.0, 0.01, n)
            events = []
            for class_name, freq in BURST_FREQS.items():
                for _ in range(int(rng.integers(1, 3))):
                    dur = rng.uniform(1.0, 2.0)
                    onset = rng.uniform(0.0, recording_seconds - dur)
                    a = int(onset * RATE)
                    b = a + int(dur * RATE)
                    samples[a:b] += _tone(freq, b - a, rng, amplitude=rng.uniform(0.4, 0.7))
                    events.append(ManifestEvent(class_name=class_name,
                                                onset_s=round(onset, 3),
                                                offset_s=round(onset + dur, 3)))
            rid = f"rec_{index:03d}"
            rel = Path("wavs") / f"{rid}.wav"
            _write(root / rel, np.clip(samples, -1.0, 1.0))
            entries.append(ManifestEntry(path=(root / rel).resolve(), recording_id=rid,
                                         split=split,
                                         events=tuple(sorted(events, key=lambda e: e.onset_s))))
            index += 1
    manifest = DatasetManifest(task="detection", classes=tuple(BURST_FREQS),
                               entries=tuple(entries), window_s=window_s, hop_s=hop_s,
                               dataset_id="synth-bursts")
    out = root / "detect.json"
    save_manifest(out, manifest)
    return out


def build_all(out_dir, seed: int = 0, pretrain_clips: int = 20,
              pretrain_clip_seconds: float = 3.0) -> dict:
    """Build the three corpora; returns {"pretrain": path, ...}."""
    out_dir = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))
    return {
        "pretrain": build_pretrain_corpus(out_dir / "pretrain", rng,
                                          n_clips=pretrain_clips,
                                          clip_seconds=pretrain_clip_seconds),
        "classify": build_classification_dataset(out_dir / "classify", rng),
        "detect": build_detection_dataset(out_dir / "detect", rng),
    }

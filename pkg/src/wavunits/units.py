"""Discrete acoustic unit discovery via k-means over frame features.

Stage 1 clusters MFCC features; stage 2 re-clusters hidden states taken from
an internal transformer layer of a pretrained encoder. Unit sequences are the
per-frame prediction targets for masked pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .features import FeatureStats, FrameFeatures, compute_stats, standardize

_ASSIGN_CHUNK = 8192


class UnitError(ValueError):
    """Raised for invalid clustering inputs or codebook/feature mismatches."""


@dataclass(frozen=True)
class FitMeta:
    """Bookkeeping from a k-means fit."""

    iterations: int
    final_distortion: float
    seed: int
    distortion_trace: tuple = ()
    # per-dimension standardization applied to the fitted features, if any
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None


@dataclass(frozen=True)
class Codebook:
    """k centroid vectors defining the acoustic unit inventory."""

    centroids: np.ndarray  # (k, D)
    stage: int
    fit_meta: FitMeta

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.ndim != 2 or centroids.shape[0] < 2:
            raise UnitError(f"codebook needs k >= 2 centroid rows, got {centroids.shape}")
        if not np.all(np.isfinite(centroids)):
            raise UnitError("codebook contains non-finite centroids")
        diff = centroids[:, None, :] - centroids[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= 0.0:
            raise UnitError("codebook contains duplicate centroid rows")
        if self.stage not in (1, 2):
            raise UnitError(f"stage must be 1 or 2, got {self.stage}")
        object.__setattr__(self, "centroids", centroids)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class UnitSequence:
    """Per-frame discrete targets, values in [0, k)."""

    units: np.ndarray
    source_id: str = ""
    frame_rate: float = 0.0

    def __post_init__(self):
        units = np.asarray(self.units, dtype=np.int64)
        if units.ndim != 1 or units.size < 1:
            raise UnitError(f"unit sequence must be non-empty 1-D, got {units.shape}")
        if units.min() < 0:
            raise UnitError("unit indices must be non-negative")
        object.__setattr__(self, "units", units)

    def __len__(self) -> int:
        return self.units.size


def _pool_frames(feats: Iterable[FrameFeatures]) -> np.ndarray:
    mats = [f.data for f in feats]
    if not mats:
        raise UnitError("no feature matrices given")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise UnitError(f"feature dimensions differ across inputs: {sorted(dims)}")
    return np.concatenate(mats, axis=0)


def _nearest(points: np.ndarray, centroids: np.ndarray):
    """Chunked argmin over squared L2; ties go to the lowest centroid index."""
    c_sq = (centroids * centroids).sum(axis=1)
    labels = np.empty(points.shape[0], dtype=np.int64)
    best = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], _ASSIGN_CHUNK):
        chunk = points[lo : lo + _ASSIGN_CHUNK]
        d = c_sq[None, :] - 2.0 * (chunk @ centroids.T)
        labels[lo : lo + _ASSIGN_CHUNK] = np.argmin(d, axis=1)
        row = np.arange(chunk.shape[0])
        best[lo : lo + _ASSIGN_CHUNK] = (
            d[row, labels[lo : lo + _ASSIGN_CHUNK]] + (chunk * chunk).sum(axis=1)
        )
    return labels, np.maximum(best, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise UnitError(
                f"cannot seed {k} distinct centroids: only {j} distinct points"
            )
        centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(
    feats: Iterable[FrameFeatures] | Sequence[FrameFeatures],
    k: int,
    max_iters: int = 100,
    seed: int = 0,
    stage: int = 1,
    sample_cap: int = 200_000,
) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments are unchanged or after ``max_iters`` rounds. A
    cluster that loses all members is re-seeded to the point currently
    farthest from its assigned centroid. The mean squared distance to the
    assigned centroid is recorded per iteration and is non-increasing.

    At most ``sample_cap`` frames (uniform, seeded) are used for fitting.
    """
    points = _pool_frames(feats)
    if k < 2:
        raise UnitError(f"k must be >= 2, got {k}")
    if points.shape[0] < k:
        raise UnitError(f"{points.shape[0]} frames < k={k}")
    rng = np.random.default_rng(seed)
    if points.shape[0] > sample_cap:
        keep = rng.choice(points.shape[0], size=sample_cap, replace=False)
        points = points[np.sort(keep)]

    centroids = _kmeans_pp_init(points, k, rng)
    trace = []
    prev_labels = None
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        labels, d2 = _nearest(points, centroids)
        trace.append(float(d2.mean()))
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        prev_labels = labels

        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empties = np.flatnonzero(~nonempty)
        if empties.size:
            farthest = np.argsort(-d2, kind="stable")
            for slot, point_idx in zip(empties, farthest):
                centroids[slot] = points[point_idx]

    meta = FitMeta(
        iterations=iterations,
        final_distortion=trace[-1],
        seed=seed,
        distortion_trace=tuple(trace),
    )
    return Codebook(centroids=centroids, stage=stage, fit_meta=meta)


def assign(codebook: Codebook, feats: FrameFeatures) -> UnitSequence:
    """Map each frame to its nearest centroid (squared L2, lowest-index ties)."""
    if feats.dim != codebook.feature_dim:
        raise UnitError(
            f"feature dim {feats.dim} != codebook dim {codebook.feature_dim}"
        )
    labels, _ = _nearest(feats.data, codebook.centroids)
    return UnitSequence(units=labels, source_id=feats.source_id, frame_rate=feats.frame_rate)


def align_to_frame_count(seq: UnitSequence, n_frames: int, target_rate: float) -> UnitSequence:
    """Re-index a unit sequence onto ``n_frames`` frames at ``target_rate``.

    Target frame t takes the unit of the nearest source frame by start time,
    clamped to the sequence end. Used to align 100 fps MFCC units with the
    50 fps encoder frames.
    """
    if n_frames < 1:
        raise UnitError("n_frames must be >= 1")
    src = np.round(np.arange(n_frames) * seq.frame_rate / target_rate).astype(np.int64)
    src = np.minimum(src, len(seq) - 1)
    return UnitSequence(units=seq.units[src], source_id=seq.source_id, frame_rate=target_rate)


def discover_units(
    feats: Sequence[FrameFeatures],
    k: int,
    seed: int = 0,
    stage: int = 1,
    max_iters: int = 100,
    sample_cap: int = 200_000,
) -> tuple[Codebook, FeatureStats, list[UnitSequence]]:
    """Standardize features, fit a codebook, and assign units per input.

    The standardization stats are stored in the codebook's fit metadata so a
    checkpoint can reproduce the assignment space exactly.
    """
    stats = compute_stats(feats)
    standardized = [standardize(f, stats) for f in feats]
    codebook = kmeans_fit(standardized, k=k, max_iters=max_iters, seed=seed,
                          stage=stage, sample_cap=sample_cap)
    meta = FitMeta(
        iterations=codebook.fit_meta.iterations,
        final_distortion=codebook.fit_meta.final_distortion,
        seed=codebook.fit_meta.seed,
        distortion_trace=codebook.fit_meta.distortion_trace,
        feature_mean=stats.mean,
        feature_std=stats.std,
    )
    codebook = Codebook(centroids=codebook.centroids, stage=stage, fit_meta=meta)
    sequences = [assign(codebook, f) for f in standardized]
    return codebook, stats, sequences


def relabel_from_model(model, clips, layer: int | None = None, k: int = 32,
                       seed: int = 0, max_iters: int = 100,
                       sample_cap: int = 200_000):
    """Second-stage unit discovery from an internal encoder layer.

    Runs the model with no masking, takes hidden states after ``layer``
    transformer blocks (default: depth // 2), standardizes them, fits a
    stage-2 codebook, and assigns per-clip units at the encoder frame rate.
    """
    from .model import hidden_states_after_layer

    depth = model.cfg.transformer_depth
    if layer is None:
        layer = depth // 2
    if not 0 <= layer < depth:
        raise UnitError(f"layer {layer} out of range [0, {depth})")
    feats = [hidden_states_after_layer(model, clip, layer) for clip in clips]
    codebook, _, sequences = discover_units(
        feats, k=k, seed=seed, stage=2, max_iters=max_iters, sample_cap=sample_cap
    )
    return codebook, sequences

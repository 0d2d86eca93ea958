"""Metrics and sliding-window detection inference.

Classification is scored with exact-match accuracy, detection with
non-interpolated mean average precision over segment-level predictions, and
cross-model tables are normalized to T-scores (per-dataset mean 50, std 10).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .audio import AudioClip, Segment, window
from .model import EncoderModel, classify

logger = logging.getLogger(__name__)


class MetricError(ValueError):
    """Raised for inputs on which a metric is undefined."""


@dataclass(frozen=True)
class DetectionEvent:
    class_id: int
    onset_s: float
    offset_s: float
    recording_id: str = ""

    def __post_init__(self):
        if not self.onset_s < self.offset_s:
            raise MetricError(
                f"event onset {self.onset_s} must precede offset {self.offset_s}"
            )


@dataclass(frozen=True)
class EvalReport:
    dataset_id: str
    task: str
    metric_name: str
    value: float
    per_class: dict | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise MetricError(f"metric value {self.value} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "dataset_id": self.dataset_id,
            "task": self.task,
            "metric_name": self.metric_name,
            "value": self.value,
            "per_class": self.per_class,
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True, indent=2)


def accuracy(pred, gold) -> float:
    """Fraction of exactly matching entries."""
    pred = np.asarray(pred)
    gold = np.asarray(gold)
    if pred.shape != gold.shape or pred.ndim != 1:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gold.shape}")
    if pred.size == 0:
        raise MetricError("accuracy undefined on empty inputs")
    return float(np.mean(pred == gold))


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score with ties broken by original index
    (stable sort), which makes the value deterministic under ties.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-D and the same length")
    if not np.any(labels == 1):
        raise MetricError("average precision undefined for a class with no positives")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    cumulative = np.cumsum(ranked)
    precision_at = cumulative / np.arange(1, ranked.size + 1)
    return float(precision_at[ranked == 1].mean())


def mean_average_precision(scores, labels) -> float:
    """Unweighted mean AP over classes that have at least one positive.

    ``scores`` and ``labels`` are (n_segments, n_classes). Classes without
    positives are skipped with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise MetricError("scores and labels must be matching (segments, classes)")
    values = []
    for c in range(scores.shape[1]):
        try:
            values.append(average_precision(scores[:, c], labels[:, c]))
        except MetricError:
            logger.warning("class %d has no positives; excluded from mAP", c)
    if not values:
        raise MetricError("mAP undefined: no class has a positive label")
    return float(np.mean(values))


def per_class_average_precision(scores, labels) -> dict:
    """AP per class index, skipping classes without positives."""
    out = {}
    for c in range(np.asarray(scores).shape[1]):
        try:
            out[c] = average_precision(np.asarray(scores)[:, c], np.asarray(labels)[:, c])
        except MetricError:
            continue
    return out


def t_scores(metric_table) -> np.ndarray:
    """Normalize each dataset column to mean 50, std 10 (population std).

    Degenerate columns (std < 1e-12) map to all 50s. Requires at least two
    model rows per column.
    """
    table = np.asarray(metric_table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2:
        raise MetricError("T-scores need a (models >= 2, datasets) table")
    mean = table.mean(axis=0, keepdims=True)
    std = table.std(axis=0, keepdims=True)
    out = np.full_like(table, 50.0)
    ok = std >= 1e-12
    cols = np.broadcast_to(ok, table.shape)
    out[cols] = 50.0 + 10.0 * ((table - mean) / np.where(ok, std, 1.0))[cols]
    return out


def segment_labels(events, segments, n_classes: int, min_overlap_s: float = 0.0) -> np.ndarray:
    """Per-segment multi-hot labels from timed events.

    A segment is positive for class c iff its temporal overlap with any
    class-c event exceeds ``min_overlap_s`` (default: any positive overlap).
    """
    labels = np.zeros((len(segments), n_classes), dtype=np.int64)
    for event in events:
        if not 0 <= event.class_id < n_classes:
            raise MetricError(f"event class {event.class_id} outside [0, {n_classes})")
        for i, seg in enumerate(segments):
            overlap = min(event.offset_s, seg.offset_s) - max(event.onset_s, seg.onset_s)
            if overlap > min_overlap_s:
                labels[i, event.class_id] = 1
    return labels


def detect(model: EncoderModel, recording: AudioClip, win_s: float, hop_s: float,
           threshold: float = 0.5):
    """Sliding-window multi-label detection over a long recording.

    Returns (segments, scores, events): sigmoid scores per segment and class,
    and per-class events formed by merging maximal runs of consecutive
    segments whose score meets the threshold (event span = union of their
    extents).
    """
    head = model.classifier_head()
    if head.mode != "sigmoid_bce":
        raise MetricError("detect requires a model fine-tuned with a sigmoid head")
    segments = window(recording, win_s, hop_s)
    scores = np.stack([expit(classify(model, seg.clip)) for seg in segments])

    events = []
    for c in range(scores.shape[1]):
        hot = scores[:, c] >= threshold
        i = 0
        while i < len(segments):
            if hot[i]:
                j = i
                while j + 1 < len(segments) and hot[j + 1]:
                    j += 1
                events.append(DetectionEvent(
                    class_id=c,
                    onset_s=segments[i].onset_s,
                    offset_s=segments[j].offset_s,
                    recording_id=recording.source_id,
                ))
                i = j + 1
            else:
                i += 1
    return segments, scores, events

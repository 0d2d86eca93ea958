"""Dataset manifests: a small JSON header plus a JSONL entries file.

Header fields: ``task`` (pretrain | classification | detection), ``classes``
(ordered label list; empty for pretrain), ``window_s``/``hop_s`` (detection
only), and ``entries`` (path of the JSONL file, relative to the header).

Each JSONL line describes one recording: ``path`` (relative to the header),
``recording_id``, ``split`` (train/valid/test; optional for pretrain), and
either ``label`` (classification) or ``events``
(list of {"class", "onset_s", "offset_s"}; detection).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

TASKS = ("pretrain", "classification", "detection")
SPLITS = ("train", "valid", "test")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent dataset manifests."""


@dataclass(frozen=True)
class ManifestEvent:
    class_name: str
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if not self.onset_s < self.offset_s:
            raise ManifestError(
                f"event onset {self.onset_s} must precede offset {self.offset_s}"
            )


@dataclass(frozen=True)
class ManifestEntry:
    path: Path  # resolved, absolute
    recording_id: str
    split: str | None = None
    label: str | None = None
    events: tuple = ()


@dataclass(frozen=True)
class DatasetManifest:
    task: str
    classes: tuple = ()
    entries: tuple = ()
    window_s: float | None = None
    hop_s: float | None = None
    dataset_id: str = ""

    def for_split(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def class_index(self, name: str) -> int:
        return self.classes.index(name)


def _validate(manifest: DatasetManifest) -> None:
    if manifest.task not in TASKS:
        raise ManifestError(f"unknown task {manifest.task!r}; expected one of {TASKS}")
    class_set = set(manifest.classes)
    if len(class_set) != len(manifest.classes):
        raise ManifestError("duplicate class names")
    if manifest.task == "detection":
        if not manifest.window_s or not manifest.hop_s:
            raise ManifestError("detection manifests need window_s and hop_s")
        if manifest.hop_s > manifest.window_s:
            raise ManifestError("hop_s must not exceed window_s")
    if manifest.task != "pretrain" and not manifest.classes:
        raise ManifestError(f"{manifest.task} manifest needs a classes list")

    split_of: dict = {}
    for entry in manifest.entries:
        if not entry.path.exists():
            raise ManifestError(f"audio path does not exist: {entry.path}")
        if entry.split is not None:
            if entry.split not in SPLITS:
                raise ManifestError(f"unknown split {entry.split!r} for {entry.recording_id}")
            previous = split_of.setdefault(entry.recording_id, entry.split)
            if previous != entry.split:
                raise ManifestError(
                    f"recording {entry.recording_id!r} appears in splits "
                    f"{previous!r} and {entry.split!r}"
                )
        if manifest.task == "classification":
            if entry.label is None:
                raise ManifestError(f"entry {entry.recording_id!r} is missing a label")
            if entry.label not in class_set:
                raise ManifestError(
                    f"label {entry.label!r} of {entry.recording_id!r} not in classes"
                )
        if manifest.task == "detection":
            for event in entry.events:
                if event.class_name not in class_set:
                    raise ManifestError(
                        f"event class {event.class_name!r} of "
                        f"{entry.recording_id!r} not in classes"
                    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc

    base = path.parent
    entries_name = header.get("entries", "entries.jsonl")
    entries_path = base / entries_name
    if not entries_path.exists():
        raise ManifestError(f"entries file not found: {entries_path}")

    entries = []
    with open(entries_path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(
                    f"{entries_path}:{line_no}: invalid JSON: {exc}"
                ) from exc
            events = tuple(
                ManifestEvent(class_name=e["class"], onset_s=float(e["onset_s"]),
                              offset_s=float(e["offset_s"]))
                for e in row.get("events", ())
            )
            entries.append(ManifestEntry(
                path=(base / row["path"]).resolve(),
                recording_id=str(row.get("recording_id", row["path"])),
                split=row.get("split"),
                label=row.get("label"),
                events=events,
            ))

    manifest = DatasetManifest(
        task=header.get("task", ""),
        classes=tuple(header.get("classes", ())),
        entries=tuple(entries),
        window_s=header.get("window_s"),
        hop_s=header.get("hop_s"),
        dataset_id=header.get("dataset_id", path.stem),
    )
    _validate(manifest)
    return manifest


def save_manifest(path, manifest: DatasetManifest, entry_paths_relative_to=None) -> None:
    """Write header + entries.jsonl next to each other."""
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    rel_base = Path(entry_paths_relative_to) if entry_paths_relative_to else base
    entries_name = path.stem + "_entries.jsonl"

    header = {
        "task": manifest.task,
        "classes": list(manifest.classes),
        "entries": entries_name,
        "dataset_id": manifest.dataset_id or path.stem,
    }
    if manifest.window_s is not None:
        header["window_s"] = manifest.window_s
    if manifest.hop_s is not None:
        header["hop_s"] = manifest.hop_s

    lines = []
    for entry in manifest.entries:
        row = {
            "path": os.path.relpath(entry.path, rel_base),
            "recording_id": entry.recording_id,
        }
        if entry.split is not None:
            row["split"] = entry.split
        if entry.label is not None:
            row["label"] = entry.label
        if entry.events:
            row["events"] = [
                {"class": e.class_name, "onset_s": e.onset_s, "offset_s": e.offset_s}
                for e in entry.events
            ]
        lines.append(json.dumps(row, sort_keys=True))

    (base / entries_name).write_text("\n".join(lines) + "\n")
    path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")

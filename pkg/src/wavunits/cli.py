"""Command-line surface.

Subcommands: ``synth | pretrain | finetune | eval | detect | embed | tscore``.
Global flags: ``--seed``, ``--deterministic``, ``--config`` (flat key=value
file, keys documented in the README). Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .audio import AudioError, load_wav, resample
from .checkpoint import CheckpointError, load_model, save_model
from .evaluation import (
    MetricError,
    detect,
    mean_average_precision,
    per_class_average_precision,
    t_scores,
)
from .features import FeatureError
from .manifest import ManifestError, load_manifest
from .model import ModelConfig, ModelError, classify, forward, mean_pool
from .synth import build_all
from .train import FinetuneConfig, PretrainConfig, TrainError, finetune, run_two_stage
from .units import UnitError


class UsageError(ValueError):
    pass


class ConfigError(ValueError):
    pass


DATA_ERRORS = (ManifestError, CheckpointError, AudioError, FeatureError,
               UnitError, ModelError, MetricError, ConfigError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config file -------------------------------------------------------------


def _int_tuple(raw):
    return tuple(int(x) for x in raw.replace(" ", "").split(","))


def _float_tuple(raw):
    return tuple(float(x) for x in raw.replace(" ", "").split(","))


def _bool(raw):
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


# key -> (section, field, parser); sections map onto the config dataclasses
CONFIG_SCHEMA = {
    "model.cnn_channels": ("model", "cnn_channels", _int_tuple),
    "model.transformer_depth": ("model", "transformer_depth", int),
    "model.hidden_dim": ("model", "hidden_dim", int),
    "model.heads": ("model", "heads", int),
    "model.ffn_dim": ("model", "ffn_dim", int),
    "model.num_units": ("model", "num_units", int),
    "model.proj_dim": ("model", "proj_dim", int),
    "model.temperature": ("model", "temperature", float),
    "model.mask_span": ("model", "mask_span", int),
    "model.mask_start_prob": ("model", "mask_start_prob", float),
    "model.dropout": ("model", "dropout", float),
    "model.use_positional": ("model", "use_positional", _bool),
    "pretrain.lr": ("pretrain", "lr", float),
    "pretrain.batch_seconds": ("pretrain", "batch_seconds", float),
    "pretrain.total_steps": ("pretrain", "total_steps", int),
    "pretrain.warmup_steps": ("pretrain", "warmup_steps", int),
    "pretrain.clip_grad_norm": ("pretrain", "clip_grad_norm", float),
    "pretrain.checkpoint_every": ("pretrain", "checkpoint_every", int),
    "stage1.lr": ("stage1", "lr", float),
    "stage1.total_steps": ("stage1", "total_steps", int),
    "stage1.batch_seconds": ("stage1", "batch_seconds", float),
    "stage1.warmup_steps": ("stage1", "warmup_steps", int),
    "stage2.lr": ("stage2", "lr", float),
    "stage2.total_steps": ("stage2", "total_steps", int),
    "stage2.batch_seconds": ("stage2", "batch_seconds", float),
    "stage2.warmup_steps": ("stage2", "warmup_steps", int),
    "finetune.lrs": ("finetune", "lrs", _float_tuple),
    "finetune.epochs": ("finetune", "epochs", int),
    "finetune.batch_size": ("finetune", "batch_size", int),
    "finetune.freeze_cnn": ("finetune", "freeze_cnn", _bool),
    "relabel.layer": ("relabel", "layer", int),
}


def parse_config_file(path) -> dict:
    """Flat ``key = value`` file -> {section: {field: value}}."""
    sections: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
        section, fieldname, caster = CONFIG_SCHEMA[key]
        try:
            value = caster(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{line_no}: bad value for {key!r}: {exc}") from exc
        sections.setdefault(section, {})[fieldname] = value
    return sections


def _build_configs(args) -> tuple:
    sections = parse_config_file(args.config) if args.config else {}
    try:
        model_cfg = ModelConfig(**sections.get("model", {}))
        base = dict(sections.get("pretrain", {}))
        cfg1 = PretrainConfig(**{**base, **sections.get("stage1", {}),
                                 "stage": 1, "seed": args.seed})
        cfg2 = PretrainConfig(**{**base, **sections.get("stage2", {}),
                                 "stage": 2, "seed": args.seed})
        ft = FinetuneConfig(**sections.get("finetune", {}), seed=args.seed)
    except (TypeError, ModelError, TrainError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    layer = sections.get("relabel", {}).get("layer")
    return model_cfg, cfg1, cfg2, ft, layer


# -- small helpers -------------------------------------------------------------


def _write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _load_clips(manifest, entries=None):
    clips = []
    for entry in entries if entries is not None else manifest.entries:
        clips.append(resample(load_wav(entry.path), 16000))
    return clips


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=1)
    except Exception:
        pass  # determinism still holds within one configuration


# -- subcommands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    paths = build_all(args.out, seed=args.seed, pretrain_clips=args.clips,
                      pretrain_clip_seconds=args.clip_seconds)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_pretrain(args) -> int:
    model_cfg, cfg1, cfg2, _, layer = _build_configs(args)
    if args.layer is not None:
        layer = args.layer
    manifest = load_manifest(args.manifest)
    clips = _load_clips(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train_log.jsonl", "w") as log:
        result = run_two_stage(
            clips, model_cfg, cfg1, cfg2, layer=layer,
            stage2_init=args.init, checkpoint_dir=str(out), log_writer=log,
            stages=1 if args.stage == "1-only" else 2,
        )
    print(f"final checkpoint: {result['final_checkpoint']}")
    for stage_key in ("stage1", "stage2"):
        stage = result[stage_key]
        if stage is None:
            continue
        trace = stage["loss_trace"]
        print(f"{stage_key}: {len(trace)} steps, "
              f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return 0


def cmd_finetune(args) -> int:
    _, _, _, ft_cfg, _ = _build_configs(args)
    manifest = load_manifest(args.manifest)
    ft_cfg = dataclasses.replace(ft_cfg, task=manifest.task)
    model, _, _ = load_model(args.checkpoint)
    result = finetune(model, manifest, ft_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "finetuned.avsc"
    save_model(best_path, result["model"],
               extra_metadata={"finetune_report": result["report"],
                               "dataset_id": manifest.dataset_id})
    _write_text_atomic(out / "sweep_report.json",
                       json.dumps(result["report"], sort_keys=True, indent=2) + "\n")
    best = result["report"]["best"]
    print(f"best lr={best['lr']} epoch={best['epoch']} "
          f"{result['report']['selection_metric']}={best['val_metric']:.4f}")
    print(f"model: {best_path}")
    return 0


def _eval_classification(model, manifest, split):
    entries = manifest.for_split(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    preds, gold = [], []
    for entry in entries:
        clip = resample(load_wav(entry.path), 16000)
        preds.append(int(np.argmax(classify(model, clip))))
        gold.append(manifest.class_index(entry.label))
    value = float(np.mean(np.asarray(preds) == np.asarray(gold)))
    return value, None


def _eval_detection(model, manifest, split):
    from .evaluation import DetectionEvent, segment_labels
    from .audio import window

    entries = manifest.for_split(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    all_scores, all_labels = [], []
    for entry in entries:
        clip = resample(load_wav(entry.path), 16000)
        segments, scores, _ = detect(model, clip, manifest.window_s, manifest.hop_s)
        events = [DetectionEvent(class_id=manifest.class_index(e.class_name),
                                 onset_s=e.onset_s, offset_s=e.offset_s,
                                 recording_id=entry.recording_id)
                  for e in entry.events]
        labels = segment_labels(events, segments, len(manifest.classes))
        all_scores.append(scores)
        all_labels.append(labels)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    value = mean_average_precision(scores, labels)
    per_class = {manifest.classes[c]: ap
                 for c, ap in per_class_average_precision(scores, labels).items()}
    return value, per_class


def cmd_eval(args) -> int:
    from .evaluation import EvalReport

    model, meta, _ = load_model(args.model)
    manifest = load_manifest(args.manifest)
    if manifest.task == "classification":
        value, per_class = _eval_classification(model, manifest, args.split)
        metric_name = "accuracy"
    elif manifest.task == "detection":
        value, per_class = _eval_detection(model, manifest, args.split)
        metric_name = "map"
    else:
        raise ManifestError(f"cannot evaluate a {manifest.task!r} manifest")
    report = EvalReport(dataset_id=manifest.dataset_id, task=manifest.task,
                        metric_name=metric_name, value=value, per_class=per_class,
                        config={"split": args.split, "model": str(args.model),
                                "model_id": args.model_id})
    if args.out_json:
        _write_text_atomic(args.out_json, report.to_json() + "\n")
    if args.out_csv:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["model_id", "dataset_id", "task", "metric", "value"])
        writer.writerow([args.model_id, manifest.dataset_id, manifest.task,
                         metric_name, f"{value:.6f}"])
        _write_text_atomic(args.out_csv, buf.getvalue())
    print(f"{metric_name}: {value:.6f}")
    return 0


def cmd_detect(args) -> int:
    model, _, _ = load_model(args.model)
    clip = resample(load_wav(args.input), 16000)
    segments, scores, events = detect(model, clip, args.win, args.hop,
                                      threshold=args.threshold)
    payload = {
        "recording": str(args.input),
        "window_s": args.win,
        "hop_s": args.hop,
        "threshold": args.threshold,
        "segments": [{"onset_s": s.onset_s, "offset_s": s.offset_s} for s in segments],
        "scores": scores.tolist(),
        "events": [{"class_id": e.class_id, "onset_s": e.onset_s,
                    "offset_s": e.offset_s} for e in events],
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text_atomic(args.out, text)
    else:
        print(text, end="")
    return 0


def cmd_embed(args) -> int:
    model, _, _ = load_model(args.model)
    manifest = load_manifest(args.manifest)
    rows = []
    for entry in manifest.entries:
        clip = resample(load_wav(entry.path), 16000)
        vector = mean_pool(forward(model, clip))
        rows.append((entry.recording_id, entry.label or "", vector))
    out = Path(args.out)
    if out.suffix == ".jsonl":
        lines = [json.dumps({"recording_id": rid, "label": label,
                             "embedding": vec.tolist()})
                 for rid, label, vec in rows]
        _write_text_atomic(out, "\n".join(lines) + "\n")
    else:
        dim = rows[0][2].size if rows else 0
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["recording_id", "label"] + [f"e{i}" for i in range(dim)])
        for rid, label, vec in rows:
            writer.writerow([rid, label] + [f"{x:.8g}" for x in vec])
        _write_text_atomic(out, buf.getvalue())
    print(f"wrote {len(rows)} embeddings to {out}")
    return 0


def cmd_tscore(args) -> int:
    cells: dict = {}
    models: list = []
    datasets: list = []
    for path in args.inputs:
        try:
            with open(path) as f:
                reader = csv.DictReader(f)
                for row in reader:
                    model_id = row["model_id"]
                    dataset_id = row["dataset_id"]
                    cells[(model_id, dataset_id)] = float(row["value"])
                    if model_id not in models:
                        models.append(model_id)
                    if dataset_id not in datasets:
                        datasets.append(dataset_id)
        except (OSError, KeyError, ValueError) as exc:
            raise MetricError(f"cannot parse metric CSV {path}: {exc}") from exc
    if len(models) < 2:
        raise MetricError("T-scores need at least two model rows")
    table = np.empty((len(models), len(datasets)))
    for i, m in enumerate(models):
        for j, d in enumerate(datasets):
            if (m, d) not in cells:
                raise MetricError(f"missing value for model {m!r} on dataset {d!r}")
            table[i, j] = cells[(m, d)]
    normalized = t_scores(table)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["model_id"] + datasets)
    for i, m in enumerate(models):
        writer.writerow([m] + [f"{x:.4f}" for x in normalized[i]])
    if args.out:
        _write_text_atomic(args.out, buf.getvalue())
    else:
        print(buf.getvalue(), end="")
    return 0


# -- argument parsing -------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="wavunits", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="global run seed")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded, fixed-order execution")
    parser.add_argument("--config", default=None, help="flat key=value config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=20)
    p.add_argument("--clip-seconds", type=float, default=3.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="two-stage masked unit pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["both", "1-only"], default="both")
    p.add_argument("--init", choices=["continue", "fresh"], default="continue",
                   help="stage-2 parameter initialization")
    p.add_argument("--layer", type=int, default=None,
                   help="transformer layer for stage-2 relabeling")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning with an lr sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model on a split")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--model-id", default="model")
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="sliding-window detection over a recording")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--win", type=float, required=True)
    p.add_argument("--hop", type=float, required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("embed", help="export pooled embeddings per recording")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("tscore", help="normalize metric CSVs to T-scores")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_tscore)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if args.deterministic:
        _limit_threads()
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

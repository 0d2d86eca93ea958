"""Training orchestration: Adam, masked-unit pretraining (two stages), and
supervised fine-tuning with a learning-rate sweep.

All randomness is derived from explicit seeds through ``np.random.SeedSequence``
spawn keys, so identical configs give identical runs (and byte-identical
checkpoints).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import AudioClip
from .evaluation import mean_average_precision, segment_labels
from .features import mfcc39
from .model import (
    EncoderModel,
    ModelConfig,
    attach_classifier,
    classification_loss_graph,
    classify,
    conv_features,
    detection_loss_graph,
    init_model,
    masked_unit_loss_graph,
    n_encoder_frames,
    sample_mask,
)
from .units import UnitSequence, align_to_frame_count, discover_units, relabel_from_model


class TrainError(RuntimeError):
    """Raised for invalid training inputs or numeric failures."""


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    batch_seconds: float = 20.0
    total_steps: int = 200
    stage: int = 1
    seed: int = 0
    warmup_steps: int | None = None  # defaults to 8% of total_steps
    clip_grad_norm: float = 1.0
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.lr <= 0 or self.batch_seconds <= 0 or self.total_steps < 1:
            raise TrainError("lr and batch_seconds must be positive, total_steps >= 1")

    @property
    def effective_warmup(self) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return max(1, int(0.08 * self.total_steps))


@dataclass(frozen=True)
class FinetuneConfig:
    lrs: tuple = (1e-5, 5e-5, 1e-4)
    epochs: int = 50
    batch_size: int = 32
    task: str = "classification"
    freeze_cnn: bool = True
    selection_metric: str | None = None  # accuracy | map; default per task
    seed: int = 0

    def __post_init__(self):
        if not self.lrs or self.epochs < 1 or self.batch_size < 1:
            raise TrainError("need non-empty lrs, epochs >= 1, batch_size >= 1")
        if self.task not in ("classification", "detection"):
            raise TrainError(f"unknown task {self.task!r}")
        object.__setattr__(self, "lrs", tuple(float(x) for x in self.lrs))

    @property
    def metric_name(self) -> str:
        if self.selection_metric:
            return self.selection_metric
        return "accuracy" if self.task == "classification" else "map"


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update, in fixed name order, float64 accumulators.

    Mutates parameter tensors and state in place; returns both for
    convenience. Non-finite gradients abort the step naming the parameter.
    """
    for name in sorted(grads):
        if not np.all(np.isfinite(grads[name])):
            raise TrainError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        g = grads[name].astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        tensor = params[name]
        tensor.data = (tensor.data.astype(np.float64) - update).astype(tensor.data.dtype)
    return params, state


class Adam:
    """Optimizer over a model's trainable registry subset."""

    def __init__(self, params: dict, lr: float, warmup_steps: int = 0,
                 clip_grad_norm: float | None = None):
        self.params = dict(params)
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.clip_grad_norm = clip_grad_norm
        self.state = AdamState()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def current_lr(self) -> float:
        step = self.state.step + 1
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr

    def step(self) -> None:
        grads = {}
        for name, tensor in self.params.items():
            if tensor.grad is not None:
                grads[name] = tensor.grad
        if not grads:
            return
        if self.clip_grad_norm is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                for g in grads.values()))
            if total > self.clip_grad_norm:
                scale = self.clip_grad_norm / total
                grads = {n: g * scale for n, g in grads.items()}
        adam_step(self.params, grads, self.state, self.current_lr())


def _derived_seed(*key) -> int:
    return int(np.random.SeedSequence(entropy=key[0], spawn_key=tuple(key[1:]))
               .generate_state(1)[0])


def _nonempty_mask(T: int, cfg: ModelConfig, base_seed: int):
    for retry in range(64):
        spec = sample_mask(T, cfg, seed=base_seed + retry)
        if len(spec):
            return spec
    raise TrainError(f"could not draw a non-empty mask for T={T}")


def clone_model(model: EncoderModel) -> EncoderModel:
    params = {
        name: ad.Tensor(tensor.data.copy(), requires_grad=tensor.requires_grad)
        for name, tensor in model.params.items()
    }
    return EncoderModel(cfg=model.cfg, params=params,
                        classifier_mode=model.classifier_mode)


def _batch_stream(clips, units, batch_seconds: float, seed: int):
    """Greedy duration packing over an endless shuffled stream of the corpus."""
    order_rng = np.random.default_rng(_derived_seed(seed, 1))
    indexes = np.arange(len(clips))
    queue: list = []
    while True:
        batch = []
        duration = 0.0
        while duration < batch_seconds:
            if not queue:
                order_rng.shuffle(indexes)
                queue = list(indexes)
            i = queue.pop(0)
            batch.append((clips[i], units[i]))
            duration += clips[i].duration_s
        yield batch


def pretrain(model: EncoderModel, clips, units, cfg: PretrainConfig,
             checkpoint_dir=None, checkpoint_meta: dict | None = None,
             log_writer=None, codebooks: dict | None = None) -> dict:
    """Masked unit-prediction training.

    Each step packs shuffled clips up to ``batch_seconds``, samples a fresh
    non-empty mask per clip, averages the per-clip masked losses, and takes
    one Adam step (linear warmup, global-norm gradient clipping). Returns
    {"loss_trace": [...], "checkpoints": [paths]}.
    """
    from .checkpoint import save_model

    if len(clips) == 0:
        raise TrainError("empty pretraining corpus")
    if len(clips) != len(units):
        raise TrainError(f"{len(clips)} clips but {len(units)} unit sequences")
    for clip, seq in zip(clips, units):
        expected = n_encoder_frames(len(clip))
        if len(seq) != expected:
            raise TrainError(
                f"clip {clip.source_id!r}: unit sequence length {len(seq)} != "
                f"encoder frame count {expected}"
            )
        if seq.units.max() >= model.cfg.num_units:
            raise TrainError(
                f"clip {clip.source_id!r}: unit id {seq.units.max()} >= "
                f"k={model.cfg.num_units}"
            )

    optimizer = Adam(model.trainable_params(), lr=cfg.lr,
                     warmup_steps=cfg.effective_warmup,
                     clip_grad_norm=cfg.clip_grad_norm)
    stream = _batch_stream(clips, units, cfg.batch_seconds, cfg.seed)
    trace = []
    checkpoints = []

    def save(tag):
        if checkpoint_dir is None:
            return
        path = f"{checkpoint_dir}/stage{cfg.stage}_{tag}.avsc"
        meta = dict(checkpoint_meta or {})
        meta.setdefault("stage", cfg.stage)
        meta["loss_trace"] = trace
        save_model(path, model, extra_metadata=meta, codebooks=codebooks)
        checkpoints.append(path)

    for step in range(1, cfg.total_steps + 1):
        t0 = time.monotonic()
        batch = next(stream)
        dropout_rng = (np.random.default_rng(_derived_seed(cfg.seed, 2, step))
                       if model.cfg.dropout > 0 else None)
        total = None
        for idx, (clip, seq) in enumerate(batch):
            T = n_encoder_frames(len(clip))
            mask = _nonempty_mask(T, model.cfg, _derived_seed(cfg.seed, 3, step, idx))
            loss = masked_unit_loss_graph(model, clip, mask, seq,
                                          dropout_rng=dropout_rng)
            total = loss if total is None else total + loss
        total = total * (1.0 / len(batch))
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainError(f"non-finite pretraining loss at step {step}")
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        trace.append(value)
        if log_writer is not None:
            log_writer.write(json.dumps({
                "step": step, "stage": cfg.stage, "loss": value,
                "lr": optimizer.current_lr(),
                "wall_ms": round(1000 * (time.monotonic() - t0), 3),
            }) + "\n")
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 \
                and step < cfg.total_steps:
            save(f"step{step:06d}")
    save("final")
    return {"loss_trace": trace, "checkpoints": checkpoints}


def run_two_stage(clips, model_cfg: ModelConfig, cfg1: PretrainConfig,
                  cfg2: PretrainConfig, layer: int | None = None,
                  stage2_init: str = "continue", checkpoint_dir=None,
                  log_writer=None, kmeans_iters: int = 100,
                  stages: int = 2) -> dict:
    """Full pretraining pipeline.

    Stage 1: MFCC features -> standardize -> k-means -> aligned 50 fps units
    -> masked pretraining. Stage 2: re-cluster hidden states from an internal
    layer (default depth // 2) of the stage-1 model and pretrain again,
    either continuing from the stage-1 weights or from a fresh init.
    ``stages=1`` stops after stage 1 (no stage-2 artifacts).
    """
    if stage2_init not in ("continue", "fresh"):
        raise TrainError(f"stage2_init must be 'continue' or 'fresh', got {stage2_init!r}")
    if stages not in (1, 2):
        raise TrainError(f"stages must be 1 or 2, got {stages}")
    cfg1 = replace(cfg1, stage=1)
    cfg2 = replace(cfg2, stage=2)
    k = model_cfg.num_units

    feats = [mfcc39(clip) for clip in clips]
    codebook1, _, mfcc_units = discover_units(feats, k=k, seed=cfg1.seed, stage=1,
                                              max_iters=kmeans_iters)
    units1 = [
        align_to_frame_count(seq, n_encoder_frames(len(clip)), model_cfg.frame_rate)
        for clip, seq in zip(clips, mfcc_units)
    ]

    model = init_model(model_cfg, seed=cfg1.seed)
    meta1 = {"pretrain_config": cfg1.__dict__ | {"warmup_steps": cfg1.effective_warmup}}
    result1 = pretrain(model, clips, units1, cfg1, checkpoint_dir=checkpoint_dir,
                       checkpoint_meta=meta1, log_writer=log_writer,
                       codebooks={"stage1": codebook1})
    if stages == 1:
        return {
            "model": model,
            "stage1": result1,
            "stage2": None,
            "codebooks": {"stage1": codebook1},
            "relabel_layer": None,
            "final_checkpoint": result1["checkpoints"][-1] if result1["checkpoints"] else None,
        }

    if layer is None:
        layer = model_cfg.transformer_depth // 2
    codebook2, units2 = relabel_from_model(model, clips, layer=layer, k=k,
                                           seed=cfg2.seed, max_iters=kmeans_iters)

    if stage2_init == "fresh":
        model = init_model(model_cfg, seed=cfg2.seed)
    meta2 = {
        "pretrain_config": cfg2.__dict__ | {"warmup_steps": cfg2.effective_warmup},
        "stage1_config": cfg1.__dict__,
        "stage1_loss_trace": result1["loss_trace"],
        "relabel_layer": layer,
        "stage2_init": stage2_init,
    }
    result2 = pretrain(model, clips, units2, cfg2, checkpoint_dir=checkpoint_dir,
                       checkpoint_meta=meta2, log_writer=log_writer,
                       codebooks={"stage1": codebook1, "stage2": codebook2})
    return {
        "model": model,
        "stage1": result1,
        "stage2": result2,
        "codebooks": {"stage1": codebook1, "stage2": codebook2},
        "relabel_layer": layer,
        "final_checkpoint": result2["checkpoints"][-1] if result2["checkpoints"] else None,
    }


# -- fine-tuning --------------------------------------------------------------


def _classification_instances(manifest, split, prepare_clip):
    entries = manifest.for_split(split)
    instances = []
    for entry in entries:
        clip = prepare_clip(entry)
        instances.append((clip, manifest.class_index(entry.label)))
    return instances


def _detection_instances(manifest, split, prepare_clip):
    from .audio import window
    from .evaluation import DetectionEvent

    instances = []
    for entry in manifest.for_split(split):
        clip = prepare_clip(entry)
        segments = window(clip, manifest.window_s, manifest.hop_s)
        events = [
            DetectionEvent(class_id=manifest.class_index(e.class_name),
                           onset_s=e.onset_s, offset_s=e.offset_s,
                           recording_id=entry.recording_id)
            for e in entry.events
        ]
        labels = segment_labels(events, segments, len(manifest.classes))
        instances.extend((seg.clip, labels[i]) for i, seg in enumerate(segments))
    return instances


def _default_prepare(entry):
    from .audio import load_wav, resample

    return resample(load_wav(entry.path), 16000)


def _validation_metric(model, instances, task: str) -> float:
    if task == "classification":
        preds = [int(np.argmax(classify(model, clip, conv=conv)))
                 for clip, conv, _ in instances]
        gold = [label for _, _, label in instances]
        return float(np.mean(np.asarray(preds) == np.asarray(gold)))
    from scipy.special import expit

    scores = np.stack([expit(classify(model, clip, conv=conv))
                       for clip, conv, _ in instances])
    labels = np.stack([y for _, _, y in instances])
    return mean_average_precision(scores, labels)


def finetune(base_model: EncoderModel, manifest, cfg: FinetuneConfig,
             prepare_clip=None) -> dict:
    """Sweep learning rates, train a task head per the manifest, report all
    validation scores, and return the globally best (lr, epoch) model.

    The classifier mode follows the task (softmax cross entropy for
    classification, sigmoid binary cross entropy for detection). With
    ``freeze_cnn`` the conv-stack parameters are excluded from the optimizer
    and asserted untouched.
    """
    if manifest.task != cfg.task:
        raise TrainError(f"manifest task {manifest.task!r} != config task {cfg.task!r}")
    prepare = prepare_clip or _default_prepare
    build = (_classification_instances if cfg.task == "classification"
             else _detection_instances)
    train_instances = build(manifest, "train", prepare)
    valid_instances = build(manifest, "valid", prepare)
    if not train_instances or not valid_instances:
        raise TrainError("train and valid splits must both be non-empty")

    # with a frozen conv stack its outputs never change: compute them once
    def with_conv_cache(instances):
        if not cfg.freeze_cnn:
            return [(clip, None, target) for clip, target in instances]
        return [(clip, conv_features(base_model, clip), target)
                for clip, target in instances]

    train_instances = with_conv_cache(train_instances)
    valid_instances = with_conv_cache(valid_instances)

    mode = "softmax_ce" if cfg.task == "classification" else "sigmoid_bce"
    loss_graph = (classification_loss_graph if cfg.task == "classification"
                  else detection_loss_graph)
    n_classes = len(manifest.classes)

    best = None  # (metric, lr_index, epoch, params_snapshot, mode)
    report_runs = []
    for lr_index, lr in enumerate(cfg.lrs):
        model = clone_model(base_model)
        attach_classifier(model, n_classes, mode, seed=_derived_seed(cfg.seed, 10))
        if cfg.freeze_cnn:
            model.set_trainable("cnn.", False)
        optimizer = Adam(model.trainable_params(), lr=lr)
        if cfg.freeze_cnn:
            frozen_overlap = [n for n in optimizer.params if n.startswith("cnn.")]
            assert not frozen_overlap, f"frozen CNN params in optimizer: {frozen_overlap}"

        epoch_metrics = []
        shuffle_rng = np.random.default_rng(_derived_seed(cfg.seed, 11, lr_index))
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_instances))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_instances[i] for i in order[lo : lo + cfg.batch_size]]
                total = None
                for clip, conv, target in batch:
                    loss = loss_graph(model, clip, target, conv=conv)
                    total = loss if total is None else total + loss
                total = total * (1.0 / len(batch))
                if not np.isfinite(float(total.data)):
                    raise TrainError(f"non-finite fine-tuning loss at lr={lr}")
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
            metric = _validation_metric(model, valid_instances, cfg.task)
            epoch_metrics.append(metric)
            if best is None or metric > best[0]:
                snapshot = {n: t.data.copy() for n, t in model.params.items()}
                best = (metric, lr_index, epoch, snapshot)
        report_runs.append({"lr": lr, "val_metrics": epoch_metrics})

    metric, lr_index, epoch, snapshot = best
    best_model = clone_model(base_model)
    attach_classifier(best_model, n_classes, mode, seed=_derived_seed(cfg.seed, 10))
    if cfg.freeze_cnn:
        best_model.set_trainable("cnn.", False)
    for name, data in snapshot.items():
        best_model.params[name].data = data.copy()

    report = {
        "task": cfg.task,
        "selection_metric": cfg.metric_name,
        "classes": list(manifest.classes),
        "runs": report_runs,
        "best": {"lr": cfg.lrs[lr_index], "epoch": epoch, "val_metric": metric},
    }
    return {"model": best_model, "report": report}

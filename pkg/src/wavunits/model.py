"""Encoder model: CNN frontend, transformer stack, masking, and heads.

The CNN turns a 16 kHz waveform into 50 fps frame embeddings (cumulative
stride 320). Masked frames are replaced by a learned embedding, a pre-norm
transformer produces hidden states, and the predictor head scores each frame
against the unit inventory with a temperature-scaled cosine softmax.

All parameters live in a flat name -> Tensor registry; a tensor's
``requires_grad`` flag is its trainable flag. Names are grouped by prefix:
``cnn.`` (conv stack, frozen during fine-tuning), ``frontend.`` (post-conv
norm + projection), ``enc.`` (transformer), ``mask_embedding``, ``head.``
(unit predictor), ``classifier.`` (task head).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .audio import AudioClip
from .features import FrameFeatures
from .units import UnitSequence

CNN_STRIDES = (5, 4, 4, 4)  # cumulative 320 -> 16000/320 = 50 fps
COSINE_EPS = 1e-8


class ModelError(ValueError):
    """Raised for invalid configurations or shape mismatches."""


@dataclass(frozen=True)
class ModelConfig:
    frame_rate: int = 50
    cnn_channels: tuple = (32, 64, 96, 128)
    transformer_depth: int = 4
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    num_units: int = 32
    proj_dim: int = 64
    temperature: float = 0.1
    mask_span: int = 10
    mask_start_prob: float = 0.08
    dropout: float = 0.0
    use_positional: bool = True

    def __post_init__(self):
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))
        if self.frame_rate != 50:
            raise ModelError("frame_rate is fixed at 50 fps")
        if len(self.cnn_channels) != len(CNN_STRIDES):
            raise ModelError(f"cnn_channels must have {len(CNN_STRIDES)} entries")
        if self.hidden_dim % self.heads != 0:
            raise ModelError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.temperature <= 0:
            raise ModelError("temperature must be > 0")
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ModelError("mask_start_prob must be in [0, 1]")
        if self.mask_span < 1:
            raise ModelError("mask_span must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cnn_channels"] = tuple(d["cnn_channels"])
        return cls(**d)


@dataclass(frozen=True)
class MaskSpec:
    """The set of masked frame positions for one sequence."""

    positions: np.ndarray  # sorted unique ints in [0, seq_len)
    seq_len: int

    def __post_init__(self):
        pos = np.unique(np.asarray(self.positions, dtype=np.int64))
        if pos.size and (pos[0] < 0 or pos[-1] >= self.seq_len):
            raise ModelError("mask positions out of range")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.size

    def as_column(self) -> np.ndarray:
        """Float (seq_len, 1) indicator, 1 at masked positions."""
        col = np.zeros((self.seq_len, 1))
        col[self.positions] = 1.0
        return col


@dataclass(frozen=True)
class PredictorHead:
    """Unit-prediction head: projection, unit embeddings, temperature."""

    projection: np.ndarray  # (hidden, proj_dim)
    unit_embeddings: np.ndarray  # (k, proj_dim)
    temperature: float

    def __post_init__(self):
        if self.projection.ndim != 2 or self.unit_embeddings.ndim != 2:
            raise ModelError("head matrices must be 2-D")
        if self.projection.shape[1] != self.unit_embeddings.shape[1]:
            raise ModelError("projection and unit embeddings disagree on proj_dim")
        if np.all(np.linalg.norm(self.unit_embeddings, axis=1) == 0.0):
            raise ModelError("unit embeddings are all zero")
        if self.temperature <= 0:
            raise ModelError("temperature must be > 0")


@dataclass(frozen=True)
class ClassifierHead:
    weight: np.ndarray  # (hidden, C)
    bias: np.ndarray  # (C,)
    mode: str  # softmax_ce | sigmoid_bce

    def __post_init__(self):
        if self.mode not in ("softmax_ce", "sigmoid_bce"):
            raise ModelError(f"unknown classifier mode {self.mode!r}")
        if self.weight.shape[1] != self.bias.shape[0] or self.bias.shape[0] < 1:
            raise ModelError("classifier weight/bias shapes disagree")


@dataclass
class EncoderModel:
    cfg: ModelConfig
    params: dict  # name -> ad.Tensor, requires_grad == trainable flag
    classifier_mode: str | None = None

    def predictor_head(self) -> PredictorHead:
        return PredictorHead(
            projection=self.params["head.projection"].data,
            unit_embeddings=self.params["head.unit_embeddings"].data,
            temperature=self.cfg.temperature,
        )

    def classifier_head(self) -> ClassifierHead:
        if self.classifier_mode is None:
            raise ModelError("model has no classifier head attached")
        return ClassifierHead(
            weight=self.params["classifier.weight"].data,
            bias=self.params["classifier.bias"].data,
            mode=self.classifier_mode,
        )

    def param_names(self, prefix: str = "") -> list:
        return sorted(n for n in self.params if n.startswith(prefix))

    def trainable_params(self) -> dict:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name, tensor in self.params.items():
            if name.startswith(prefix):
                tensor.requires_grad = flag

    def validate_finite(self) -> None:
        for name, tensor in self.params.items():
            if not np.all(np.isfinite(tensor.data)):
                raise ModelError(f"parameter {name} contains NaN/Inf")


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> EncoderModel:
    """Seeded parameter initialization.

    Unit embeddings start as a shared random direction plus small per-unit
    noise so that initial unit predictions are near-uniform (cosine scores are
    scale-invariant, so spread is controlled through direction, not norm).
    """
    rng = np.random.default_rng(seed)
    params: dict = {}

    def add(name, array):
        params[name] = ad.Tensor(np.asarray(array, dtype=dtype), requires_grad=True)

    def normal(*shape, std):
        return rng.standard_normal(shape) * std

    in_c = 1
    for i, (out_c, stride) in enumerate(zip(cfg.cnn_channels, CNN_STRIDES)):
        fan_in = in_c * stride
        add(f"cnn.{i}.weight", normal(fan_in, out_c, std=1.0 / np.sqrt(fan_in)))
        add(f"cnn.{i}.bias", np.zeros(out_c))
        in_c = out_c
    add("frontend.norm.gamma", np.ones(in_c))
    add("frontend.norm.beta", np.zeros(in_c))
    add("frontend.proj.weight", normal(in_c, cfg.hidden_dim, std=1.0 / np.sqrt(in_c)))
    add("frontend.proj.bias", np.zeros(cfg.hidden_dim))

    add("mask_embedding", normal(cfg.hidden_dim, std=0.1))

    D, F = cfg.hidden_dim, cfg.ffn_dim
    for layer in range(cfg.transformer_depth):
        p = f"enc.{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            add(f"{p}.attn.{name}", normal(D, D, std=1.0 / np.sqrt(D)))
            add(f"{p}.attn.{name[1]}bias", np.zeros(D))
        add(f"{p}.norm1.gamma", np.ones(D))
        add(f"{p}.norm1.beta", np.zeros(D))
        add(f"{p}.norm2.gamma", np.ones(D))
        add(f"{p}.norm2.beta", np.zeros(D))
        add(f"{p}.ffn.w1", normal(D, F, std=1.0 / np.sqrt(D)))
        add(f"{p}.ffn.b1", np.zeros(F))
        add(f"{p}.ffn.w2", normal(F, D, std=1.0 / np.sqrt(F)))
        add(f"{p}.ffn.b2", np.zeros(D))
    add("enc.final_norm.gamma", np.ones(D))
    add("enc.final_norm.beta", np.zeros(D))

    add("head.projection", normal(D, cfg.proj_dim, std=1.0 / np.sqrt(D)))
    base = rng.standard_normal(cfg.proj_dim)
    noise = rng.standard_normal((cfg.num_units, cfg.proj_dim))
    add("head.unit_embeddings", base[None, :] + 0.1 * noise)

    return EncoderModel(cfg=cfg, params=params)


def attach_classifier(model: EncoderModel, n_classes: int, mode: str,
                      seed: int = 0) -> None:
    """Add (or replace) the task head. Does not touch other parameters."""
    if mode not in ("softmax_ce", "sigmoid_bce"):
        raise ModelError(f"unknown classifier mode {mode!r}")
    if n_classes < 1:
        raise ModelError("classifier needs at least one class")
    rng = np.random.default_rng(seed)
    dtype = model.params["head.projection"].data.dtype
    weight = (rng.standard_normal((model.cfg.hidden_dim, n_classes)) * 0.01).astype(dtype)
    model.params["classifier.weight"] = ad.Tensor(weight, requires_grad=True)
    model.params["classifier.bias"] = ad.Tensor(np.zeros(n_classes, dtype=dtype),
                                                requires_grad=True)
    model.classifier_mode = mode


# -- frame arithmetic -------------------------------------------------------


def receptive_field() -> int:
    out = 1
    for s in CNN_STRIDES:
        out *= s
    return out


def n_encoder_frames(n_samples: int) -> int:
    """Output frame count of the conv stack for an n-sample input."""
    t = n_samples
    for s in CNN_STRIDES:
        t //= s
    return t


# -- graph builders ---------------------------------------------------------


def _check_input(model: EncoderModel, clip: AudioClip) -> np.ndarray:
    if clip.sample_rate != 16000:
        raise ModelError(f"encoder expects 16 kHz input, got {clip.sample_rate}")
    if len(clip) < receptive_field():
        raise ModelError(
            f"clip of {len(clip)} samples shorter than the receptive field "
            f"({receptive_field()} samples)"
        )
    dtype = model.params["frontend.proj.weight"].data.dtype
    return clip.samples.astype(dtype)


def _conv_stack_graph(model: EncoderModel, samples: np.ndarray) -> ad.Tensor:
    p = model.params
    h = ad.Tensor(samples.reshape(-1, 1))
    for i, stride in enumerate(CNN_STRIDES):
        t_out = h.shape[0] // stride
        h = h[: t_out * stride].reshape(t_out, stride * h.shape[1])
        h = ad.gelu(h @ p[f"cnn.{i}.weight"] + p[f"cnn.{i}.bias"])
    return h


def conv_features(model: EncoderModel, clip: AudioClip) -> np.ndarray:
    """Raw conv-stack output (T, channels[-1]), before norm and projection.

    Valid as a forward-pass cache only while the conv stack is frozen.
    """
    samples = _check_input(model, clip)
    with ad.no_grad():
        return _conv_stack_graph(model, samples).data


def _frontend_graph(model: EncoderModel, samples: np.ndarray,
                    conv: np.ndarray | None = None) -> ad.Tensor:
    """Conv stack + norm + projection: (n,) -> (T, hidden)."""
    p = model.params
    if conv is None:
        h = _conv_stack_graph(model, samples)
    else:
        if any(p[n].requires_grad for n in model.param_names("cnn.")):
            raise ModelError("conv-feature cache requires a frozen conv stack")
        h = ad.Tensor(conv)
    h = ad.layer_norm(h, p["frontend.norm.gamma"], p["frontend.norm.beta"])
    return h @ p["frontend.proj.weight"] + p["frontend.proj.bias"]


_PE_CACHE: dict = {}


def _sinusoidal(T: int, D: int) -> np.ndarray:
    key = (T, D)
    if key not in _PE_CACHE:
        position = np.arange(T)[:, None]
        rates = np.exp(np.arange(0, D, 2) * (-np.log(10000.0) / D))
        pe = np.zeros((T, D))
        pe[:, 0::2] = np.sin(position * rates)
        pe[:, 1::2] = np.cos(position * rates[: D // 2])
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def _dropout(t: ad.Tensor, p: float, rng) -> ad.Tensor:
    if p <= 0.0 or rng is None:
        return t
    keep = (rng.random(t.shape) >= p).astype(t.data.dtype) / (1.0 - p)
    return t * keep


def encode_graph(model: EncoderModel, clip: AudioClip, mask: MaskSpec | None = None,
                 collect_layers: bool = False, dropout_rng=None,
                 conv: np.ndarray | None = None):
    """Full differentiable forward pass.

    Returns (final hidden states after the last norm, list of raw per-block
    states). ``states[i]`` is the residual stream after i transformer blocks;
    ``states[0]`` is the (masked, position-encoded) frame embedding input.
    ``conv`` short-circuits the (frozen) conv stack with cached features.
    """
    samples = None if conv is not None else _check_input(model, clip)
    p = model.params
    cfg = model.cfg
    x = _frontend_graph(model, samples, conv=conv)
    T = x.shape[0]

    if mask is not None:
        if mask.seq_len != T:
            raise ModelError(f"mask length {mask.seq_len} != frame count {T}")
        if len(mask):
            col = mask.as_column().astype(x.data.dtype)
            x = x * (1.0 - col) + p["mask_embedding"] * col
    if cfg.use_positional:
        x = x + _sinusoidal(T, cfg.hidden_dim).astype(x.data.dtype)

    states = [x] if collect_layers else []
    H = cfg.heads
    dh = cfg.hidden_dim // H
    scale = 1.0 / np.sqrt(dh)
    for layer in range(cfg.transformer_depth):
        pre = f"enc.{layer}"
        a = ad.layer_norm(x, p[f"{pre}.norm1.gamma"], p[f"{pre}.norm1.beta"])
        q = (a @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.qbias"]).reshape(T, H, dh).transpose(1, 0, 2)
        k = (a @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.kbias"]).reshape(T, H, dh).transpose(1, 0, 2)
        v = (a @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.vbias"]).reshape(T, H, dh).transpose(1, 0, 2)
        att = ad.softmax((q @ k.transpose(0, 2, 1)) * scale, axis=-1)
        o = (att @ v).transpose(1, 0, 2).reshape(T, cfg.hidden_dim)
        o = o @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.obias"]
        x = x + _dropout(o, cfg.dropout, dropout_rng)

        f = ad.layer_norm(x, p[f"{pre}.norm2.gamma"], p[f"{pre}.norm2.beta"])
        f = ad.gelu(f @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
        x = x + _dropout(f, cfg.dropout, dropout_rng)
        if collect_layers:
            states.append(x)

    final = ad.layer_norm(x, p["enc.final_norm.gamma"], p["enc.final_norm.beta"])
    return final, states


def unit_logits_graph(model: EncoderModel, hidden: ad.Tensor) -> ad.Tensor:
    """Temperature-scaled cosine scores of hidden states vs unit embeddings."""
    p = model.params
    proj = hidden @ p["head.projection"]  # (T, proj_dim)
    emb = p["head.unit_embeddings"]  # (k, proj_dim)
    pn = ((proj * proj).sum(axis=1, keepdims=True)).sqrt() + COSINE_EPS  # (T, 1)
    en = ((emb * emb).sum(axis=1, keepdims=True)).sqrt() + COSINE_EPS  # (k, 1)
    cos = (proj @ emb.transpose(1, 0)) / (pn @ en.transpose(1, 0))
    return cos * (1.0 / model.cfg.temperature)


def masked_unit_loss_graph(model: EncoderModel, clip: AudioClip, mask: MaskSpec,
                           targets: UnitSequence, dropout_rng=None) -> ad.Tensor:
    """Mean negative log-probability of the target unit at masked positions."""
    if len(mask) == 0:
        raise ModelError("loss undefined for an empty mask")
    hidden, _ = encode_graph(model, clip, mask=mask, dropout_rng=dropout_rng)
    if len(targets) != mask.seq_len:
        raise ModelError(
            f"target length {len(targets)} != frame count {mask.seq_len}"
        )
    logits = unit_logits_graph(model, hidden)
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_pairs(logp, mask.positions, targets.units[mask.positions])
    return -picked.mean()


def classifier_logits_graph(model: EncoderModel, clip: AudioClip,
                            dropout_rng=None, conv: np.ndarray | None = None) -> ad.Tensor:
    if model.classifier_mode is None:
        raise ModelError("model has no classifier head attached")
    hidden, _ = encode_graph(model, clip, mask=None, dropout_rng=dropout_rng, conv=conv)
    pooled = hidden.mean(axis=0)  # (hidden,)
    return pooled.reshape(1, -1) @ model.params["classifier.weight"] + model.params["classifier.bias"]


def classification_loss_graph(model: EncoderModel, clip: AudioClip, label: int,
                              dropout_rng=None, conv: np.ndarray | None = None) -> ad.Tensor:
    """Softmax cross entropy against a single class index."""
    logits = classifier_logits_graph(model, clip, dropout_rng, conv=conv)  # (1, C)
    return ad.logsumexp(logits, axis=-1).sum() - logits[0, int(label)]


def detection_loss_graph(model: EncoderModel, clip: AudioClip, targets: np.ndarray,
                         dropout_rng=None, conv: np.ndarray | None = None) -> ad.Tensor:
    """Mean binary cross entropy from logits against a multi-hot target."""
    logits = classifier_logits_graph(model, clip, dropout_rng, conv=conv).reshape(-1)
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ModelError(f"target shape {y.shape} != logit shape {logits.shape}")
    return (logits.softplus() - logits * y).mean()


# -- public (inference) operations ------------------------------------------


def cnn_encode(model: EncoderModel, clip: AudioClip) -> FrameFeatures:
    """Frame embeddings from the conv frontend alone, at 50 fps."""
    samples = _check_input(model, clip)
    with ad.no_grad():
        frames = _frontend_graph(model, samples).data
    return FrameFeatures(data=frames, frame_rate=model.cfg.frame_rate,
                         source_id=clip.source_id)


def sample_mask(T: int, cfg: ModelConfig, seed: int) -> MaskSpec:
    """Independent span starts with prob ``mask_start_prob``, span length
    ``mask_span``, clipped at the sequence end. Deterministic in the seed."""
    if T < 1:
        raise ModelError("sequence length must be >= 1")
    rng = np.random.default_rng(seed)
    starts = np.flatnonzero(rng.random(T) < cfg.mask_start_prob)
    if starts.size == 0:
        return MaskSpec(positions=np.empty(0, dtype=np.int64), seq_len=T)
    offsets = np.arange(cfg.mask_span)
    positions = (starts[:, None] + offsets[None, :]).reshape(-1)
    return MaskSpec(positions=positions[positions < T], seq_len=T)


def forward(model: EncoderModel, clip: AudioClip, mask: MaskSpec | None = None,
            return_layers: bool = False):
    """Hidden states h_t as FrameFeatures; optionally all per-block states."""
    with ad.no_grad():
        final, states = encode_graph(model, clip, mask=mask,
                                     collect_layers=return_layers)
    fps = model.cfg.frame_rate
    out = FrameFeatures(data=final.data, frame_rate=fps, source_id=clip.source_id)
    if not return_layers:
        return out
    layers = [FrameFeatures(data=s.data, frame_rate=fps, source_id=clip.source_id)
              for s in states]
    return out, layers


def hidden_states_after_layer(model: EncoderModel, clip: AudioClip,
                              layer: int) -> FrameFeatures:
    """Residual-stream states after ``layer`` transformer blocks (no mask)."""
    if not 0 <= layer <= model.cfg.transformer_depth:
        raise ModelError(f"layer {layer} out of range")
    _, states = forward(model, clip, mask=None, return_layers=True)
    return states[layer]


def unit_probs(hidden: FrameFeatures, head: PredictorHead) -> np.ndarray:
    """Row-stochastic (T, k) matrix: softmax over temperature-scaled cosines."""
    if hidden.dim != head.projection.shape[0]:
        raise ModelError(
            f"hidden dim {hidden.dim} != head input dim {head.projection.shape[0]}"
        )
    proj = hidden.data @ head.projection
    pn = np.linalg.norm(proj, axis=1, keepdims=True) + COSINE_EPS
    en = np.linalg.norm(head.unit_embeddings, axis=1, keepdims=True) + COSINE_EPS
    cos = (proj @ head.unit_embeddings.T) / (pn @ en.T)
    logits = cos / head.temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def pretrain_loss(probs: np.ndarray, targets: UnitSequence, mask: MaskSpec) -> float:
    """Mean negative log target probability over masked positions only."""
    probs = np.asarray(probs)
    if probs.shape[0] != len(targets):
        raise ModelError(f"probs rows {probs.shape[0]} != targets {len(targets)}")
    if len(mask) == 0:
        raise ModelError("loss undefined for an empty mask")
    if mask.seq_len != probs.shape[0]:
        raise ModelError("mask length disagrees with probs")
    picked = probs[mask.positions, targets.units[mask.positions]]
    return float(-np.mean(np.log(picked)))


def mean_pool(hidden: FrameFeatures) -> np.ndarray:
    """Arithmetic mean over frames: the clip summary vector."""
    return hidden.data.mean(axis=0)


def classify(model: EncoderModel, clip: AudioClip,
             conv: np.ndarray | None = None) -> np.ndarray:
    """Task-head logits for one clip (no masking, no activation applied)."""
    with ad.no_grad():
        logits = classifier_logits_graph(model, clip, conv=conv)
    return logits.data.reshape(-1)

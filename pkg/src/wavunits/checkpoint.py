"""Binary checkpoint container: magic "AVSC", canonical JSON metadata, and
named float32 tensor blobs.

The layout is fully canonical (sorted metadata keys, sorted tensor names,
fixed little-endian encoding), so identical state always serializes to
identical bytes and save -> load -> save round-trips are byte-stable.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import EncoderModel, ModelConfig
from .units import Codebook, FitMeta

MAGIC = b"AVSC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed or unreadable checkpoint files."""


@dataclass
class CheckpointContainer:
    metadata: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)  # name -> float32 ndarray


def _atomic_write(path, payload: bytes) -> None:
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, container: CheckpointContainer) -> None:
    meta = json.dumps(container.metadata, sort_keys=True,
                      separators=(",", ":"), allow_nan=False).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<Q", len(meta)), meta,
              struct.pack("<I", len(container.tensors))]
    for name in sorted(container.tensors):
        arr = np.ascontiguousarray(container.tensors[name], dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(b"f32")
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    _atomic_write(path, b"".join(chunks))


def read_container(path) -> CheckpointContainer:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<Q", blob, 8)
    offset = 16
    metadata = json.loads(blob[offset : offset + meta_len].decode("utf-8"))
    offset += meta_len
    (n_tensors,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        dtype_tag = blob[offset : offset + 3]
        offset += 3
        if dtype_tag != b"f32":
            raise CheckpointError(f"unsupported tensor dtype {dtype_tag!r}")
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.copy()
    return CheckpointContainer(metadata=metadata, tensors=tensors)


# -- model-level helpers -----------------------------------------------------


def _codebook_meta(cb: Codebook) -> dict:
    return {
        "stage": cb.stage,
        "k": cb.k,
        "feature_dim": cb.feature_dim,
        "iterations": cb.fit_meta.iterations,
        "final_distortion": cb.fit_meta.final_distortion,
        "seed": cb.fit_meta.seed,
        "distortion_trace": list(cb.fit_meta.distortion_trace),
    }


def save_model(path, model: EncoderModel, extra_metadata: dict | None = None,
               codebooks: dict | None = None) -> None:
    """Serialize a model (and optional codebooks/provenance) to ``path``."""
    metadata = {
        "kind": "wavunits-checkpoint",
        "model_config": model.cfg.to_dict(),
        "classifier_mode": model.classifier_mode,
        "frozen_params": sorted(n for n, t in model.params.items()
                                if not t.requires_grad),
        "codebooks": {},
    }
    tensors = {f"param.{name}": t.data for name, t in model.params.items()}
    for key, cb in (codebooks or {}).items():
        metadata["codebooks"][key] = _codebook_meta(cb)
        tensors[f"codebook.{key}.centroids"] = cb.centroids
        if cb.fit_meta.feature_mean is not None:
            tensors[f"codebook.{key}.feature_mean"] = cb.fit_meta.feature_mean
            tensors[f"codebook.{key}.feature_std"] = cb.fit_meta.feature_std
    metadata.update(extra_metadata or {})
    write_container(path, CheckpointContainer(metadata=metadata, tensors=tensors))


def load_model(path):
    """Rebuild (model, metadata, codebooks) from a checkpoint file."""
    container = read_container(path)
    meta = container.metadata
    if meta.get("kind") != "wavunits-checkpoint":
        raise CheckpointError(f"{path} is not a model checkpoint")
    cfg = ModelConfig.from_dict(meta["model_config"])
    frozen = set(meta.get("frozen_params", ()))
    params = {}
    for name, arr in container.tensors.items():
        if name.startswith("param."):
            bare = name[len("param."):]
            params[bare] = ad.Tensor(arr.astype(np.float32),
                                     requires_grad=bare not in frozen)
    model = EncoderModel(cfg=cfg, params=params,
                         classifier_mode=meta.get("classifier_mode"))
    model.validate_finite()

    codebooks = {}
    for key, cb_meta in meta.get("codebooks", {}).items():
        centroids = container.tensors[f"codebook.{key}.centroids"].astype(np.float64)
        mean = container.tensors.get(f"codebook.{key}.feature_mean")
        std = container.tensors.get(f"codebook.{key}.feature_std")
        fit = FitMeta(
            iterations=cb_meta["iterations"],
            final_distortion=cb_meta["final_distortion"],
            seed=cb_meta["seed"],
            distortion_trace=tuple(cb_meta["distortion_trace"]),
            feature_mean=None if mean is None else mean.astype(np.float64),
            feature_std=None if std is None else std.astype(np.float64),
        )
        codebooks[key] = Codebook(centroids=centroids, stage=cb_meta["stage"], fit_meta=fit)
    return model, meta, codebooks

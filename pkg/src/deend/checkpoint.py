"""Checkpoint archive: JSON header plus raw little-endian tensor payloads.

The archive is a zip file with three members:

``header.json``   config, epoch and a manifest ``[{name, shape, dtype, offset, nbytes}]``
``payload.bin``   tensors concatenated in manifest order
``rng_state.bin`` opaque RNG state bytes

Floating-point tensors are stored as float32; integer buffers (BatchNorm
batch counters) keep their int64 dtype.
"""

from __future__ import annotations

import json
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, validate_config

FORMAT_VERSION = 1
_NP_DTYPES = {"float32": "<f4", "int64": "<i8"}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    parameters: "OrderedDict[str, torch.Tensor]"
    epoch: int = 0
    rng_state: bytes = b""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_bundle(cls, bundle, epoch: int = 0, rng_state=b"") -> "Checkpoint":
        if torch.is_tensor(rng_state):
            rng_state = rng_state.numpy().tobytes()
        params = OrderedDict((k, v.detach().clone()) for k, v in bundle.state_dict().items())
        return cls(bundle.config, params, epoch, bytes(rng_state))

    def to_bundle(self, **config_overrides):
        from .networks import make_variant

        config = self.config.replace(**config_overrides) if config_overrides else self.config
        bundle = make_variant(config)
        load_parameters(bundle, self.parameters)
        bundle.eval()
        return bundle


def load_parameters(bundle, parameters) -> None:
    """Copy named tensors into ``bundle``; names and shapes must match exactly."""
    expected = bundle.state_dict()
    missing = set(expected) - set(parameters)
    unknown = set(parameters) - set(expected)
    if missing or unknown:
        raise CheckpointError(f"parameter names do not match: missing={sorted(missing)} unknown={sorted(unknown)}")
    for name, t in parameters.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"{name}: shape {tuple(t.shape)} != {tuple(expected[name].shape)}")
    bundle.load_state_dict({k: v.to(expected[k].dtype) for k, v in parameters.items()})


def _storage_dtype(t: torch.Tensor) -> str:
    return "float32" if t.is_floating_point() else "int64"


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = []
    chunks = []
    offset = 0
    for name, t in ckpt.parameters.items():
        dtype = _storage_dtype(t)
        raw = t.detach().cpu().numpy().astype(_NP_DTYPES[dtype]).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "manifest": manifest,
        "extra": ckpt.extra,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    # fixed timestamps keep the archive bytes reproducible
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for member, data in (
            ("header.json", json.dumps(header, indent=1, sort_keys=True).encode()),
            ("payload.bin", b"".join(chunks)),
            ("rng_state.bin", ckpt.rng_state),
        ):
            zf.writestr(zipfile.ZipInfo(member, date_time=(1980, 1, 1, 0, 0, 0)), data)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            payload = zf.read("payload.bin")
            rng_state = zf.read("rng_state.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    config = validate_config(TrainConfig.from_dict(header["config"]))
    params = OrderedDict()
    for entry in header["manifest"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype=_NP_DTYPES[entry["dtype"]])
        params[entry["name"]] = torch.from_numpy(arr.copy()).reshape(entry["shape"])
    return Checkpoint(config, params, header["epoch"], rng_state, header.get("extra", {}))

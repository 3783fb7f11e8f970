"""Domain types and configuration shared across the package.

Images are ``torch`` tensors in ``[0, 1]`` laid out ``C x H x W`` (or with a
leading batch dimension).  Messages are ``{0, 1}`` bit vectors.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import torch

NOISE_KINDS = (
    "identity",
    "cropout",
    "dropout",
    "gaussian_noise",
    "salt_pepper",
    "gaussian_blur",
    "median_blur",
    "jpeg_simulated",
    "jpeg_real",
    "jpeg_mbrs",
)
VARIANTS = ("deend", "end_baseline", "de_a_end_b", "e_w_nd")
UPSAMPLE_MODES = ("unpool", "transpose_conv", "nearest_interp")
IMAGE_ROLES = ("host", "watermarked", "distorted")
JPEG_SUBSAMPLING = ("4:4:4", "4:2:0")

_PARAM_NAMES = {
    "identity": (),
    "cropout": ("ratio",),
    "dropout": ("ratio",),
    "gaussian_noise": ("variance",),
    "salt_pepper": ("ratio",),
    "gaussian_blur": ("sigma",),
    "median_blur": ("window",),
    "jpeg_simulated": ("quality_factor",),
    "jpeg_real": ("quality_factor", "subsampling"),
    "jpeg_mbrs": ("quality_factor", "subsampling"),
}
# used when a spec omits its parameter (the standard training values per kind)
DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "identity": {},
    "cropout": {"ratio": 0.4},
    "dropout": {"ratio": 0.4},
    "gaussian_noise": {"variance": [0.001, 0.04]},
    "salt_pepper": {"ratio": [0.001, 0.04]},
    "gaussian_blur": {"sigma": 2.0},
    "median_blur": {"window": 7},
    "jpeg_simulated": {"quality_factor": 50},
    "jpeg_real": {"quality_factor": 50},
    "jpeg_mbrs": {"quality_factor": 50},
}


class MessageLengthError(ValueError):
    """A message does not have the L bits the model expects."""


class ConfigError(ValueError):
    """Raised for invalid configuration or noise parameters."""


def _check_scalar(kind: str, name: str, value: Any) -> None:
    if name == "subsampling":
        if value not in JPEG_SUBSAMPLING:
            raise ConfigError(f"subsampling must be one of {JPEG_SUBSAMPLING}, got {value!r}")
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(f"{kind}.{name} must be a finite number, got {value!r}")
    if name == "ratio" and not 0.0 <= value <= 1.0:
        raise ConfigError(f"ratio out of [0,1]: {value}")
    if name in ("variance", "sigma") and value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}")
    if name == "window" and (int(value) != value or value < 1 or int(value) % 2 == 0):
        raise ConfigError(f"window must be an odd integer >= 1, got {value}")
    if name == "quality_factor" and not 1 <= value <= 100:
        raise ConfigError(f"quality_factor out of [1,100]: {value}")


def is_range(value: Any) -> bool:
    return isinstance(value, (list, tuple))


@dataclass(frozen=True)
class NoiseSpec:
    """One distortion family plus its parameters.

    A parameter given as a two-element ``[low, high]`` sequence is a training
    range; :func:`deend.noise.sample_training_spec` draws a point value from it.
    """

    kind: str = "identity"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {self.kind!r}")
        params = dict(DEFAULT_PARAMS[self.kind])
        params.update(self.params)
        allowed = _PARAM_NAMES[self.kind]
        for name, value in params.items():
            if name not in allowed:
                raise ConfigError(f"{self.kind} does not take parameter {name!r}")
            if is_range(value):
                if len(value) != 2:
                    raise ConfigError(f"{self.kind}.{name} range must have two elements")
                if name in ("window", "subsampling"):
                    raise ConfigError(f"{name} cannot be range-valued")
                lo, hi = value
                _check_scalar(self.kind, name, lo)
                _check_scalar(self.kind, name, hi)
                if lo > hi:
                    raise ConfigError(f"{self.kind}.{name} range is inverted: {value}")
                params[name] = [lo, hi]
            else:
                _check_scalar(self.kind, name, value)
        object.__setattr__(self, "params", params)

    @property
    def is_point(self) -> bool:
        return not any(is_range(v) for v in self.params.values())

    def param(self, name: str) -> Any:
        return self.params[name]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: (list(v) if is_range(v) else v) for k, v in self.params.items()}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NoiseSpec":
        return cls(kind=d.get("kind", "identity"), params=dict(d.get("params", {})))

    @classmethod
    def point(cls, kind: str, value: Any = None) -> "NoiseSpec":
        """Spec with the kind's primary parameter set to ``value``."""
        names = _PARAM_NAMES[kind]
        if value is None or not names:
            return cls(kind)
        return cls(kind, {names[0]: value})


@dataclass(frozen=True)
class TrainConfig:
    H: int = 128
    W: int = 128
    C: int = 3
    L: int = 64
    alpha: float = 1.0
    lambda_phase1: tuple[float, float, float] = (1.0, 10.0, 0.0001)
    lambda_phase2: tuple[float, float, float] = (10.0, 1.0, 0.0001)
    phase_switch_epoch: int = 20
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    variant: str = "deend"
    decoder_unions: int = 5
    upsample_mode: str = "nearest_interp"
    literal_gan: bool = False
    # pair every training image with one seeded message for the whole run
    # instead of drawing a fresh message per sample and step
    fixed_messages: bool = False

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise"] = self.noise.to_dict()
        d["lambda_phase1"] = list(self.lambda_phase1)
        d["lambda_phase2"] = list(self.lambda_phase2)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "noise" in kwargs and not isinstance(kwargs["noise"], NoiseSpec):
            kwargs["noise"] = NoiseSpec.from_dict(kwargs["noise"])
        for key in ("lambda_phase1", "lambda_phase2"):
            if key in kwargs:
                kwargs[key] = tuple(float(x) for x in kwargs[key])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return validate_config(cls.from_dict(json.loads(Path(path).read_text())))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def validate_config(config: TrainConfig) -> TrainConfig:
    """Return ``config`` unchanged if every invariant holds, else raise ConfigError."""
    for name in ("H", "W"):
        value = getattr(config, name)
        if not isinstance(value, int) or value <= 0 or value % 8:
            raise ConfigError(f"{name} not divisible by 8: {value}")
    if config.C < 1:
        raise ConfigError(f"C must be >= 1, got {config.C}")
    if config.L < 1:
        raise ConfigError(f"L must be >= 1, got {config.L}")
    if not config.alpha >= 0:
        raise ConfigError(f"alpha must be >= 0, got {config.alpha}")
    for name in ("lambda_phase1", "lambda_phase2"):
        lams = getattr(config, name)
        if len(lams) != 3 or any(not math.isfinite(x) or x < 0 for x in lams):
            raise ConfigError(f"invalid lambda triple {name}={lams}")
    if config.phase_switch_epoch < 0:
        raise ConfigError("phase_switch_epoch must be >= 0")
    if config.epochs < 0 or config.batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    if not config.learning_rate > 0:
        raise ConfigError("learning_rate must be > 0")
    if not isinstance(config.noise, NoiseSpec):
        raise ConfigError("noise must be a NoiseSpec")
    if config.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {config.variant!r}")
    if not 3 <= config.decoder_unions <= 7:
        raise ConfigError(f"decoder_unions must be in [3, 7], got {config.decoder_unions}")
    if config.upsample_mode not in UPSAMPLE_MODES:
        raise ConfigError(f"unknown upsample_mode {config.upsample_mode!r}")
    return config


@dataclass(frozen=True)
class ImageArray:
    """A ``C x H x W`` image in ``[0, 1]`` tagged with its role in the pipeline."""

    data: torch.Tensor
    role: str = "host"
    name: str = ""

    def __post_init__(self):
        if self.role not in IMAGE_ROLES:
            raise ValueError(f"unknown image role {self.role!r}")
        check_image(self.data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def check_image(x: torch.Tensor) -> None:
    if x.dim() != 3:
        raise ValueError(f"expected C x H x W image, got shape {tuple(x.shape)}")
    c, h, w = x.shape
    if c < 1 or h % 8 or w % 8:
        raise ValueError(f"image shape {tuple(x.shape)} needs C >= 1 and H, W divisible by 8")
    if not torch.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")


_HEX_RE = re.compile(r"^[0-9a-fA-F]+$")


@dataclass(frozen=True)
class WatermarkMessage:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise ValueError("message must have at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise ValueError("message bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "WatermarkMessage":
        return cls(tuple(int(v) for v in t.flatten().tolist()))

    @classmethod
    def from_hex(cls, text: str, L: int) -> "WatermarkMessage":
        return message_from_hex(text, L)

    def to_hex(self) -> str:
        return message_to_hex(self)


def message_from_hex(text: str, L: int) -> WatermarkMessage:
    """Big-endian bit expansion of ``text``, truncated to the first ``L`` bits."""
    text = text.strip()
    if text.lower().startswith("0x"):
        text = text[2:]
    if not _HEX_RE.match(text):
        raise ValueError(f"not a hex string: {text!r}")
    if 4 * len(text) < L:
        raise MessageLengthError(f"hex string encodes {4 * len(text)} bits, need {L}")
    bits = [int(b) for ch in text for b in format(int(ch, 16), "04b")]
    return WatermarkMessage(tuple(bits[:L]))


def message_to_hex(message: WatermarkMessage) -> str:
    """Inverse of :func:`message_from_hex`; a trailing partial nibble is zero-padded."""
    bits = list(message.bits)
    bits += [0] * (-len(bits) % 4)
    return "".join(
        format(int("".join(map(str, bits[i : i + 4])), 2), "X") for i in range(0, len(bits), 4)
    )

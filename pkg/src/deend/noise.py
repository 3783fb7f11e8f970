"""The noise layer: image distortions applied between embedding and extraction.

Every transform maps ``[0, 1]`` images to ``[0, 1]`` images and is
deterministic given the context seed.  Distortions without a useful derivative
(real JPEG, salt & pepper, median blur) pass gradients straight through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import NoiseSpec, is_range
from .jpeg import jpeg_real, jpeg_simulate


@dataclass(frozen=True)
class DistortionContext:
    host: torch.Tensor | None = None
    rng_seed: int = 0
    training: bool = False


def straight_through(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``y`` in the forward pass, identity gradient w.r.t. ``x``."""
    return x + (y - x).detach()


def _rand(shape, g, dtype):
    return torch.rand(shape, generator=g, dtype=torch.float64).to(dtype)


def cropout(x, host, ratio, g):
    """Replace one rectangle covering ``ratio`` of each image with the host."""
    B, _, H, W = x.shape
    mask = torch.zeros(B, 1, H, W, dtype=x.dtype)
    area = round(ratio * H * W)
    for i in range(B):
        if area == 0:
            continue
        if area >= H * W:
            mask[i] = 1.0
            continue
        aspect = math.exp(float(torch.empty(1, dtype=torch.float64).uniform_(math.log(0.5), math.log(2.0), generator=g)))
        h = min(H, max(1, round(math.sqrt(area * aspect))))
        w = min(W, max(1, round(area / h)))
        h = min(H, max(1, round(area / w)))
        top = int(torch.randint(0, H - h + 1, (1,), generator=g))
        left = int(torch.randint(0, W - w + 1, (1,), generator=g))
        mask[i, :, top : top + h, left : left + w] = 1.0
    return x * (1 - mask) + host * mask


def dropout(x, host, ratio, g):
    """Replace each pixel with the host pixel with probability ``ratio``."""
    B, _, H, W = x.shape
    mask = (_rand((B, 1, H, W), g, torch.float64) < ratio).to(x.dtype)
    return x * (1 - mask) + host * mask


def gaussian_noise(x, variance, g):
    if variance == 0:
        return x
    noise = torch.randn(x.shape, generator=g, dtype=torch.float64).to(x.dtype)
    return torch.clamp(x + math.sqrt(variance) * noise, 0.0, 1.0)


def salt_pepper(x, ratio, g):
    B, _, H, W = x.shape
    hit = _rand((B, 1, H, W), g, torch.float64) < ratio
    salt = (_rand((B, 1, H, W), g, torch.float64) < 0.5).to(x.dtype)
    noisy = torch.where(hit, salt.expand_as(x), x.detach())
    return straight_through(x, noisy)


def gaussian_kernel(sigma: float, dtype=torch.float64) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x, sigma):
    """Separable Gaussian blur, half-width ceil(3 sigma), reflect padding."""
    if sigma == 0:
        return x
    C = x.shape[1]
    k = gaussian_kernel(sigma, x.dtype)
    r = (k.numel() - 1) // 2
    if r >= min(x.shape[2:]):
        raise ValueError(f"blur radius {r} too large for image of size {tuple(x.shape[2:])}")
    x = F.pad(x, (r, r, r, r), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(C, 1, 1, -1), groups=C)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(C, 1, -1, 1), groups=C)
    return torch.clamp(x, 0.0, 1.0)


def median_blur(x, window):
    window = int(window)
    if window == 1:
        return x
    r = window // 2
    padded = F.pad(x.detach(), (r, r, r, r), mode="reflect")
    patches = padded.unfold(2, window, 1).unfold(3, window, 1)
    med = patches.reshape(*patches.shape[:4], -1).median(dim=-1).values
    return straight_through(x, med)


def apply_noise(spec: NoiseSpec, watermarked: torch.Tensor, ctx: DistortionContext) -> torch.Tensor:
    """Distort ``watermarked`` (one image or a batch) according to ``spec``.

    Range-valued specs are only accepted in training mode, where a point value
    is drawn per image from the context seed.
    """
    single = watermarked.dim() == 3
    x = watermarked[None] if single else watermarked
    host = ctx.host
    if host is not None:
        host = (host[None] if host.dim() == 3 else host).to(x.dtype)
        if host.shape != x.shape:
            raise ValueError(f"host shape {tuple(host.shape)} differs from watermarked {tuple(x.shape)}")

    if not spec.is_point:
        if not ctx.training:
            raise ValueError(f"range-valued {spec.kind} parameters need training mode")
        rng = np.random.default_rng(ctx.rng_seed)
        outs = []
        for i in range(x.shape[0]):
            sub = DistortionContext(
                None if host is None else host[i : i + 1], int(rng.integers(2**31)), ctx.training
            )
            outs.append(_apply_point(sample_training_spec(spec, rng), x[i : i + 1], sub.host, sub.rng_seed))
        out = torch.cat(outs)
    else:
        out = _apply_point(spec, x, host, ctx.rng_seed)
    return out[0] if single else out


def _apply_point(spec, x, host, seed):
    g = torch.Generator().manual_seed(int(seed))
    kind, p = spec.kind, spec.params
    if kind in ("cropout", "dropout") and host is None:
        raise ValueError(f"{kind} needs the host image in the distortion context")
    if kind == "identity":
        return x
    if kind == "cropout":
        return cropout(x, host, p["ratio"], g)
    if kind == "dropout":
        return dropout(x, host, p["ratio"], g)
    if kind == "gaussian_noise":
        return gaussian_noise(x, p["variance"], g)
    if kind == "salt_pepper":
        return salt_pepper(x, p["ratio"], g)
    if kind == "gaussian_blur":
        return gaussian_blur(x, p["sigma"])
    if kind == "median_blur":
        return median_blur(x, p["window"])
    if kind == "jpeg_simulated":
        return jpeg_simulate(x, p["quality_factor"])
    if kind == "jpeg_real":
        return jpeg_real(x, p["quality_factor"], p.get("subsampling", "4:2:0"))
    if kind == "jpeg_mbrs":
        if torch.rand(1, generator=g).item() < 0.5:
            return jpeg_real(x, p["quality_factor"], p.get("subsampling", "4:2:0"))
        return jpeg_simulate(x, p["quality_factor"])
    raise ValueError(f"unknown noise kind {kind!r}")


def sample_training_spec(spec: NoiseSpec, rng: np.random.Generator) -> NoiseSpec:
    """Draw each range-valued parameter uniformly from its closed range."""
    if spec.is_point:
        return spec
    params = {}
    for name, value in spec.params.items():
        if is_range(value):
            lo, hi = value
            if lo > hi:
                raise ValueError(f"inverted range for {name}: {value}")
            value = float(rng.uniform(lo, hi)) if hi > lo else lo
            if name == "quality_factor":
                value = int(round(value))
        params[name] = value
    return NoiseSpec(spec.kind, params)

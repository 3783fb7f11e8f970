"""Differentiable JPEG simulation and a real-codec round trip.

The simulation follows baseline JPEG without chroma subsampling: full-range
YCbCr, level shift, orthonormal 8x8 block DCT, division by the IJG tables
scaled for the quality factor, rounding, and the inverse path.  Rounding uses a
straight-through surrogate (``round`` forward, identity backward).
"""

from __future__ import annotations

import io
import math

import numpy as np
import torch
from PIL import Image

QTABLE_LUMA = torch.tensor(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=torch.float64,
)

QTABLE_CHROMA = torch.full((8, 8), 99.0, dtype=torch.float64)
QTABLE_CHROMA[:4, :4] = torch.tensor(
    [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]], dtype=torch.float64
)

_PIL_SUBSAMPLING = {"4:4:4": 0, "4:2:0": 2}


def quality_scale(quality: float) -> float:
    """IJG percentage scaling: 5000/QF below 50, else 200 - 2 QF."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality factor out of [1, 100]: {quality}")
    quality = int(quality)
    return 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality


def scaled_table(base: torch.Tensor, quality: float) -> torch.Tensor:
    table = torch.floor((base * quality_scale(quality) + 50.0) / 100.0)
    return table.clamp(1.0, 255.0)


def dct_matrix(dtype=torch.float64) -> torch.Tensor:
    """Orthonormal DCT-II basis; row k is frequency k."""
    n = torch.arange(8, dtype=torch.float64)
    k = n[:, None]
    m = torch.cos((2 * n[None, :] + 1) * k * math.pi / 16) * math.sqrt(2 / 8)
    m[0] /= math.sqrt(2)
    return m.to(dtype)


def rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x.unbind(-3)
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168735892 * r - 0.331264108 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418687589 * g - 0.081312411 * b + 128.0
    return torch.stack([y, cb, cr], dim=-3)


def ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x.unbind(-3)
    cb = cb - 128.0
    cr = cr - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136286 * cb - 0.714136286 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=-3)


def _blocks(x: torch.Tensor) -> torch.Tensor:
    # B x C x H x W -> B x C x H/8 x W/8 x 8 x 8
    B, C, H, W = x.shape
    return x.view(B, C, H // 8, 8, W // 8, 8).permute(0, 1, 2, 4, 3, 5)


def _unblocks(x: torch.Tensor) -> torch.Tensor:
    B, C, h, w = x.shape[:4]
    return x.permute(0, 1, 2, 4, 3, 5).reshape(B, C, h * 8, w * 8)


def ste_round(x: torch.Tensor) -> torch.Tensor:
    return x + (torch.round(x) - x).detach()


def jpeg_simulate(
    image: torch.Tensor,
    quality: float = 50,
    rounding: bool = True,
    tables: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Differentiable JPEG round trip of a ``B x C x H x W`` batch in ``[0, 1]``.

    ``tables`` overrides the (luma, chroma) quantization tables; with unit
    tables and ``rounding=False`` the transform is an identity up to
    floating-point error.  Single-channel input is treated as luma only.
    """
    B, C, H, W = image.shape
    if H % 8 or W % 8:
        raise ValueError("JPEG simulation needs H and W divisible by 8")
    if C not in (1, 3):
        raise ValueError(f"JPEG simulation supports 1 or 3 channels, got {C}")
    dtype = image.dtype
    if tables is None:
        luma, chroma = scaled_table(QTABLE_LUMA, quality), scaled_table(QTABLE_CHROMA, quality)
    else:
        luma, chroma = tables
    qt = torch.stack([luma, chroma, chroma])[:C].to(dtype)[None, :, None, None]
    d = dct_matrix(dtype)

    x = image * 255.0
    if C == 3:
        x = rgb_to_ycbcr(x)
    blocks = _blocks(x - 128.0)
    coeffs = d @ blocks @ d.T
    q = coeffs / qt
    if rounding:
        q = ste_round(q)
    blocks = d.T @ (q * qt) @ d
    x = _unblocks(blocks) + 128.0
    if C == 3:
        x = ycbcr_to_rgb(x)
    return torch.clamp(x / 255.0, 0.0, 1.0)


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    return (image.detach().cpu().double().clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()


def jpeg_codec(image: torch.Tensor, quality: int = 50, subsampling: str = "4:2:0") -> torch.Tensor:
    """Encode/decode each image of a batch with libjpeg (via Pillow); no gradient."""
    B, C, H, W = image.shape
    arrays = _to_uint8(image)
    out = []
    for arr in arrays:
        if C == 1:
            pil = Image.fromarray(arr[0], mode="L")
        elif C == 3:
            pil = Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB")
        else:
            raise ValueError(f"JPEG codec supports 1 or 3 channels, got {C}")
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(quality), subsampling=_PIL_SUBSAMPLING[subsampling])
        buf.seek(0)
        dec = np.asarray(Image.open(buf).convert(pil.mode), dtype=np.uint8)
        if C == 1:
            dec = dec[None]
        else:
            dec = dec.transpose(2, 0, 1)
        out.append(torch.from_numpy(dec.copy()))
    return torch.stack(out).to(image.dtype).div_(255.0)


def jpeg_real(image: torch.Tensor, quality: int = 50, subsampling: str = "4:2:0") -> torch.Tensor:
    """Real-codec round trip with a straight-through gradient."""
    return image + (jpeg_codec(image, quality, subsampling).to(image.device) - image).detach()

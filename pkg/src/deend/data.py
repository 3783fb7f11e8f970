"""Image loading and saving."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .config import ImageArray

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def center_crop_resize(pil: Image.Image, H: int, W: int) -> Image.Image:
    """Crop the largest centered square, then resize bilinearly to ``W x H``.

    No resampling happens when the crop already has the target size.
    """
    w, h = pil.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    if (w, h) != (s, s):
        pil = pil.crop((left, top, left + s, top + s))
    if pil.size != (W, H):
        pil = pil.resize((W, H), Image.BILINEAR)
    return pil


def to_tensor(pil: Image.Image) -> torch.Tensor:
    arr = np.asarray(pil.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def load_image(path, H: int, W: int) -> ImageArray:
    with Image.open(path) as pil:
        pil = pil.convert("RGB")
        return ImageArray(to_tensor(center_crop_resize(pil, H, W)), "host", Path(path).stem)


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(directory, H: int, W: int) -> list[ImageArray]:
    """Every decodable image in ``directory`` (alphabetical), as ``3 x H x W`` arrays in [0, 1]."""
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images in {directory}")
    images = []
    for path in paths:
        try:
            images.append(load_image(path, H, W))
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping %s: %s", path, exc)
    if not images:
        raise ValueError(f"none of the {len(paths)} files in {directory} could be decoded")
    return images


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """``C x H x W`` in [0, 1] to an ``H x W x C`` uint8 array (round half to even)."""
    arr = torch.round(image.detach().double().clamp(0, 1) * 255.0).to(torch.uint8).numpy()
    return arr.transpose(1, 2, 0)


def save_png(image: torch.Tensor, path) -> None:
    arr = to_uint8(image)
    mode = "L" if arr.shape[2] == 1 else "RGB"
    Image.fromarray(arr[:, :, 0] if mode == "L" else arr, mode).save(path, format="PNG")

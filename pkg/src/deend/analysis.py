"""Per-image coupling analysis: residual map vs decoder-needed map."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .metrics import (
    bit_accuracy_batch,
    coupling_consistency,
    decoder_needed_map,
    encoded_residual_map,
    normalize_map,
    psnr,
)
from .networks import threshold_bits


@dataclass
class CouplingRecord:
    image_id: str
    consistency: float
    psnr: float
    bitacc: float


def analysis_messages(n: int, L: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, 7]).generate_state(1)[0]))
    return torch.randint(0, 2, (n, L), generator=g).float()


def analyze_image(bundle, host, message, alpha=None):
    """Maps, watermarked image and record fields for one ``C x H x W`` host."""
    bundle.eval()
    residual = encoded_residual_map(bundle, host, message, alpha)
    watermarked = host + residual
    needed = decoder_needed_map(bundle.decoder, host, message)
    r_n, g_n = normalize_map(residual), normalize_map(needed)
    with torch.no_grad():
        bits = threshold_bits(bundle.decoder(watermarked[None]))[0]
    return {
        "watermarked": watermarked,
        "residual": r_n,
        "needed": g_n,
        "consistency": coupling_consistency(r_n, g_n),
        "psnr": psnr(host, watermarked),
        "bitacc": bit_accuracy_batch(message, bits).item(),
    }


def mean_consistency(bundle, images, messages, alpha=None) -> float:
    return float(np.mean([analyze_image(bundle, h, m, alpha)["consistency"] for h, m in zip(images, messages)]))


def run_analysis(bundle, images, image_ids, out_dir, messages=None, seed=0, alpha=None, plots=True):
    """Writes ``<image_id>_coupling.png`` per image and ``coupling.json``; returns the records."""
    from .plotting import plot_coupling_grid

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if messages is None:
        messages = analysis_messages(len(images), bundle.config.L, seed)
    records = []
    for image_id, host, msg in zip(image_ids, images, messages):
        res = analyze_image(bundle, host, msg, alpha)
        rec = CouplingRecord(image_id, res["consistency"], res["psnr"], res["bitacc"])
        records.append(rec)
        if plots:
            title = f"{image_id}  consistency {rec.consistency:+.3f}"
            plot_coupling_grid(host, res["watermarked"], res["residual"], res["needed"],
                               out_dir / f"{image_id}_coupling.png", title)
    (out_dir / "coupling.json").write_text(json.dumps([asdict(r) for r in records], indent=1) + "\n")
    return records

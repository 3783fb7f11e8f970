"""Robustness benchmark: accuracy-vs-parameter sweeps over a set of test images.

For every image and trial a random message is embedded once; each
(kind, parameter) distortion is then applied with its own seed and the message
is extracted.  Each (image, kind, parameter, trial) gives one CSV row.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import MessageLengthError, NoiseSpec
from .metrics import psnr
from .noise import DistortionContext, apply_noise

CSV_COLUMNS = ("image_id", "kind", "param", "trial", "bit_accuracy", "psnr_embed")

DEFAULT_SWEEPS = (
    ("cropout", (0.1, 0.2, 0.3, 0.4, 0.5)),
    ("dropout", (0.2, 0.3, 0.4, 0.5, 0.6)),
    ("gaussian_noise", (0.01, 0.02, 0.03, 0.04, 0.05)),
    ("salt_pepper", (0.01, 0.02, 0.03, 0.04, 0.05)),
    ("gaussian_blur", (0.0001, 0.5, 1.0, 2.0)),
    ("median_blur", (3, 5, 7)),
    ("jpeg_real", (40, 50, 60, 70, 80, 90)),
)


@dataclass
class BenchmarkPlan:
    checkpoint: str | None = None
    images_dir: str | None = None
    sweeps: list = field(default_factory=lambda: [(k, list(v)) for k, v in DEFAULT_SWEEPS])
    trials: int = 1
    seed: int = 0
    alpha: float | None = None
    # "random": fresh seeded message per (image, trial); "training": the fixed
    # messages stored in the checkpoint, one per image in load order
    messages: str = "random"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.messages not in ("random", "training"):
            raise ValueError(f"messages must be 'random' or 'training', got {self.messages!r}")
        self.sweeps = [(kind, list(values)) for kind, values in self.sweeps]
        for kind, values in self.sweeps:
            for v in values:
                NoiseSpec.point(kind, v)  # raises on invalid values

    def specs(self):
        return [(kind, v, NoiseSpec.point(kind, v)) for kind, values in self.sweeps for v in values]

    def to_dict(self) -> dict:
        return {
            "checkpoint": self.checkpoint,
            "images_dir": self.images_dir,
            "sweeps": [[k, list(v)] for k, v in self.sweeps],
            "trials": self.trials,
            "seed": self.seed,
            "alpha": self.alpha,
            "messages": self.messages,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkPlan":
        return cls(**d)


@dataclass
class BenchmarkReport:
    rows: list[dict]
    aggregates: list[dict]
    config: dict

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r["image_id"],
                    r["kind"],
                    format_param(r["param"]),
                    r["trial"],
                    f"{r['bit_accuracy']:.6f}",
                    f"{r['psnr_embed']:.4f}",
                ]
            )
        return buf.getvalue()

    def summary(self) -> dict:
        return {"config": self.config, "aggregates": self.aggregates}

    def lookup(self, kind, param) -> dict:
        for a in self.aggregates:
            if a["kind"] == kind and _pkey(a["param"]) == _pkey(param):
                return a
        raise KeyError((kind, param))


def format_param(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return f"{float(value):g}"


def _pkey(value) -> float:
    # identity has no parameter; it sorts before everything else
    return -1.0 if value is None else float(value)


def num_threads() -> int:
    """Evaluation worker cap from ``WM_NUM_THREADS`` (default 1)."""
    raw = os.environ.get("WM_NUM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"WM_NUM_THREADS must be an integer, got {raw!r}") from None


def _seed(*keys) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@torch.no_grad()
def _evaluate_image(bundle, plan, specs, index, image_id, host, message_override):
    rows = []
    L = bundle.config.L
    for trial in range(plan.trials):
        if message_override is not None:
            msg = message_override
        else:
            g = torch.Generator().manual_seed(_seed(plan.seed, index, trial))
            msg = torch.randint(0, 2, (L,), generator=g).to(host.dtype)
        wm = bundle.embed(host[None], msg[None], plan.alpha)
        p = psnr(host, wm[0])
        for s_i, (kind, value, spec) in enumerate(specs):
            ctx = DistortionContext(host[None], _seed(plan.seed, index, trial, s_i, 1), training=False)
            bits = (bundle.decoder(apply_noise(spec, wm, ctx))[0] > 0.5).long()
            rows.append(
                {
                    "image_id": image_id,
                    "kind": kind,
                    "param": value,
                    "trial": trial,
                    "bit_accuracy": (bits == msg.long()).double().mean().item(),
                    "psnr_embed": p,
                }
            )
    return rows


def run_benchmark(plan: BenchmarkPlan, bundle, images, image_ids=None, messages=None, threads=None):
    """Evaluate ``bundle`` on ``images`` (``N x C x H x W``) for every sweep point.

    ``messages`` (``N x L``) fixes the payload per image instead of drawing a
    random one per (image, trial).
    """
    images = torch.stack([getattr(im, "data", im) for im in images]) if not torch.is_tensor(images) else images
    n = images.shape[0]
    if image_ids is None:
        image_ids = [f"img{i:04d}" for i in range(n)]
    if len(image_ids) != n:
        raise ValueError("one id per image required")
    L = bundle.config.L
    if messages is not None:
        messages = torch.as_tensor(messages).to(images.dtype)
        if messages.shape != (n, L):
            raise MessageLengthError(f"message length mismatch: expected {(n, L)}, got {tuple(messages.shape)}")
    bundle.eval()
    specs = plan.specs()
    workers = min(threads or num_threads(), n)

    def job(i):
        override = None if messages is None else messages[i]
        return _evaluate_image(bundle, plan, specs, i, image_ids[i], images[i], override)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(job, range(n)))
    else:
        per_image = [job(i) for i in range(n)]

    # canonical row order: image, sweep order, trial
    order = {(k, _pkey(v)): j for j, (k, v, _) in enumerate(specs)}
    rows = sorted(
        (r for rs in per_image for r in rs),
        key=lambda r: (r["image_id"], order[(r["kind"], _pkey(r["param"]))], r["trial"]),
    )
    return BenchmarkReport(rows, aggregate(rows, specs), {"plan": plan.to_dict(), "model": bundle.config.to_dict()})


def aggregate(rows, specs=None) -> list[dict]:
    groups = {}
    for r in rows:
        groups.setdefault((r["kind"], _pkey(r["param"])), []).append(r)
    keys = [(k, _pkey(v)) for k, v, _ in specs] if specs else sorted(groups)
    out = []
    for key in keys:
        g = groups.get(key, [])
        acc = np.array([r["bit_accuracy"] for r in g], dtype=np.float64)
        ps = np.array([r["psnr_embed"] for r in g], dtype=np.float64)
        out.append(
            {
                "kind": key[0],
                "param": g[0]["param"] if g else None,
                "n": len(g),
                "mean_bit_accuracy": float(acc.mean()) if len(g) else float("nan"),
                "std_bit_accuracy": float(acc.std()) if len(g) else float("nan"),
                "mean_psnr": float(ps.mean()) if len(g) else float("nan"),
            }
        )
    return out


def write_report(report: BenchmarkReport, out_dir, plots: bool = True, prefix: str = "benchmark") -> dict:
    """``<prefix>.csv``, ``<prefix>.json`` and one PNG per distortion kind."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{prefix}.csv"
    csv_path.write_text(report.csv_text())
    json_path = out_dir / f"{prefix}.json"
    json_path.write_text(json.dumps(report.summary(), indent=1, sort_keys=True) + "\n")
    figures = []
    if plots:
        from .plotting import plot_sweeps

        figures = plot_sweeps(report.aggregates, out_dir, prefix)
    return {"csv": csv_path, "json": json_path, "figures": figures}

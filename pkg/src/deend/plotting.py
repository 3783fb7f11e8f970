"""Figures written next to the CSV/JSON reports (PNG, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

PARAM_LABELS = {
    "cropout": "cropped ratio",
    "dropout": "dropped ratio",
    "gaussian_noise": "variance",
    "salt_pepper": "ratio",
    "gaussian_blur": "sigma",
    "median_blur": "window",
    "jpeg_real": "quality factor",
    "jpeg_simulated": "quality factor",
    "jpeg_mbrs": "quality factor",
    "identity": "",
}


def _save(fig, path) -> Path:
    path = Path(path)
    # no software/version tag, so identical figures give identical bytes
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def _to_hwc(image) -> np.ndarray:
    arr = np.asarray(image.detach().cpu().double() if hasattr(image, "detach") else image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return np.clip(arr, 0.0, 1.0)


def plot_sweeps(aggregates: list[dict], out_dir, prefix: str = "benchmark") -> list[Path]:
    """One accuracy-vs-parameter figure per distortion kind.

    ``aggregates`` rows carry ``kind``, ``param``, ``mean_bit_accuracy`` and
    ``std_bit_accuracy``; an optional ``label`` column draws one line per label.
    """
    out_dir = Path(out_dir)
    paths = []
    kinds = sorted({row["kind"] for row in aggregates})
    with plt.rc_context(STYLE):
        for kind in kinds:
            rows = [r for r in aggregates if r["kind"] == kind]
            fig, ax = plt.subplots(figsize=(3.6, 2.6))
            for label in sorted({r.get("label", "") for r in rows}):
                sub = [r for r in rows if r.get("label", "") == label]
                sub.sort(key=lambda r: float(r["param"] or 0))
                x = [float(r["param"] or 0) for r in sub]
                y = np.array([r["mean_bit_accuracy"] for r in sub])
                e = np.array([r.get("std_bit_accuracy", 0.0) for r in sub])
                ax.errorbar(x, y, yerr=e, marker="o", ms=3, capsize=2, label=label or None)
            ax.set_xlabel(PARAM_LABELS.get(kind, "parameter"))
            ax.set_ylabel("bit accuracy")
            ax.set_ylim(0.4, 1.02)
            ax.set_title(kind)
            if any(r.get("label") for r in rows):
                ax.legend(frameon=False)
            fig.tight_layout()
            paths.append(_save(fig, out_dir / f"{prefix}_{kind}.png"))
    return paths


def plot_coupling_grid(host, watermarked, residual_map, needed_map, path, title: str = "") -> Path:
    """``host | watermarked | normalized residual | normalized decoder gradient``."""
    panels = [
        (host, "host"),
        (watermarked, "watermarked"),
        (residual_map, "encoded residual"),
        (needed_map, "decoder-needed"),
    ]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(8, 2.3))
        for ax, (img, name) in zip(axes, panels):
            arr = _to_hwc(img)
            if arr.ndim == 3 and name in ("encoded residual", "decoder-needed"):
                # maps are shown as a single intensity channel
                arr = arr.mean(axis=2)
            ax.imshow(arr, cmap="gray" if arr.ndim == 2 else None, vmin=0, vmax=1, interpolation="nearest")
            ax.set_title(name)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_training_curves(history: list[dict], path) -> Path:
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7, 2.6))
        for key in ("l_e", "l_d"):
            ax1.semilogy(epochs, [max(r[key], 1e-12) for r in history], label=key)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.plot(epochs, [r["bitacc_train"] for r in history], color="C2")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("train bit accuracy", color="C2")
        twin = ax2.twinx()
        twin.plot(epochs, [r["psnr_train"] for r in history], color="C3")
        twin.set_ylabel("PSNR (dB)", color="C3")
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows: list[dict], columns: list[str], path) -> Path:
    """Grouped bars: one group per accuracy column, one bar per variant."""
    variants = [r["variant"] for r in rows]
    width = 0.8 / max(1, len(variants))
    x = np.arange(len(columns))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.6, 0.9 * len(columns) + 1.5), 2.8))
        for i, row in enumerate(rows):
            ax.bar(x + i * width, [row[c] for c in columns], width, label=row["variant"])
        ax.set_xticks(x + width * (len(variants) - 1) / 2)
        ax.set_xticklabels(columns, rotation=30, ha="right")
        ax.set_ylim(0.4, 1.02)
        ax.set_ylabel("bit accuracy")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)

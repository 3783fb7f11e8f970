"""Train several architecture variants on identical data and compare them."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .benchmark import BenchmarkPlan, format_param, run_benchmark
from .config import VARIANTS, TrainConfig
from .networks import describe
from .training import train

ABLATION_VARIANTS = ("deend", "de_a_end_b", "e_w_nd")


def column_name(kind, param) -> str:
    return kind if param is None else f"{kind}@{format_param(param)}"


def run_ablation(config: TrainConfig, variants, images, plan: BenchmarkPlan, image_ids=None, messages=None,
                 out_dir=None, log=None):
    """One row per variant: parameter counts, mean PSNR and accuracy per sweep point.

    Every variant is trained from ``config.seed`` on the same images (and the
    same fixed ``messages`` when given) and evaluated with the same plan.
    """
    variants = list(variants)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variant(s): {unknown}")
    rows, reports = [], {}
    for variant in variants:
        cfg = config.replace(variant=variant)
        sub = None if out_dir is None else Path(out_dir) / variant
        _, history, bundle = train(cfg, images, out_dir=sub, messages=messages)
        report = run_benchmark(plan, bundle, images, image_ids, messages=messages)
        reports[variant] = report
        info = describe(bundle)
        row = {
            "variant": variant,
            "param_count": info["param_count"],
            "decoder_params": info["param_count_by_net"]["decoder"] + info["param_count_by_net"].get("decoder_a", 0),
            "shared_decoder": info["shared_decoder"],
            "final_total_loss": history[-1]["total"] if history else float("nan"),
            "psnr": float(np.mean([r["psnr_embed"] for r in report.rows])),
        }
        for a in report.aggregates:
            row[column_name(a["kind"], a["param"])] = a["mean_bit_accuracy"]
        rows.append(row)
        if log is not None:
            log(row)
    return rows, reports


def accuracy_columns(rows) -> list[str]:
    fixed = {"variant", "param_count", "decoder_params", "shared_decoder", "final_total_loss", "psnr"}
    return [k for k in rows[0] if k not in fixed] if rows else []


def table_text(rows) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def write_ablation(rows, out_dir, plots=True) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "ablation.csv"
    csv_path.write_text(table_text(rows))
    json_path = out_dir / "ablation.json"
    json_path.write_text(json.dumps(rows, indent=1) + "\n")
    figures = []
    if plots and rows:
        from .plotting import plot_ablation

        figures.append(plot_ablation(rows, accuracy_columns(rows), out_dir / "ablation.png"))
    return {"csv": csv_path, "json": json_path, "figures": figures}

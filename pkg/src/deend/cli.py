"""Command-line interface: ``deend <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 message-length mismatch,
3 unreadable checkpoint.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ConfigError,
    MessageLengthError,
    TrainConfig,
    WatermarkMessage,
    message_from_hex,
    message_to_hex,
)

log = logging.getLogger("deend")

EXIT_ERROR = 1
EXIT_LENGTH = 2
EXIT_CHECKPOINT = 3


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (CheckpointError, ConfigError) as exc:
        raise CheckpointError(str(exc)) from exc


def _bundle(args):
    ckpt = _load_checkpoint(args.checkpoint)
    try:
        return ckpt, ckpt.to_bundle()
    except (CheckpointError, ConfigError, RuntimeError) as exc:
        raise CheckpointError(f"cannot restore {args.checkpoint}: {exc}") from exc


def parse_message(text: str, L: int) -> WatermarkMessage:
    digits = text[2:] if text.lower().startswith("0x") else text
    if len(digits) != math.ceil(L / 4):
        raise MessageLengthError(f"model expects L={L} bits ({math.ceil(L / 4)} hex digits), got {len(digits)} digits")
    return message_from_hex(digits, L)


def _apply_threads():
    from .benchmark import num_threads

    torch.set_num_threads(num_threads())


def cmd_train(args):
    from .data import load_dataset
    from .plotting import plot_training_curves
    from .training import train

    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    images = load_dataset(args.images, config.H, config.W)
    out = Path(args.out)
    ckpt, history, _ = train(config, images, out_dir=out)
    if history:
        plot_training_curves(history, out / "training.png")
        last = history[-1]
        print("epoch,l_e,l_d,l_ad,l_dis,total,psnr_train,bitacc_train")
        print(",".join(f"{last[k]:.6g}" for k in ("epoch", "l_e", "l_d", "l_ad", "l_dis", "total", "psnr_train",
                                                  "bitacc_train")))
    print(f"checkpoint={out / 'checkpoint.ckpt'}")
    return 0


def cmd_embed(args):
    from .data import load_image, save_png
    from .metrics import psnr

    ckpt, bundle = _bundle(args)
    cfg = bundle.config
    if args.message is None:
        raise ValueError("--message is required")
    msg = parse_message(args.message, cfg.L)
    host = load_image(args.image, cfg.H, cfg.W).data
    alpha = cfg.alpha if args.alpha is None else args.alpha
    with torch.no_grad():
        wm = bundle.embed(host[None], msg.tensor()[None], alpha)[0]
    save_png(wm, args.out)
    print(f"psnr={psnr(host, wm):.4f}")
    print(f"out={args.out}")
    return 0


def cmd_extract(args):
    from .data import load_image

    _, bundle = _bundle(args)
    cfg = bundle.config
    img = load_image(args.image, cfg.H, cfg.W).data
    with torch.no_grad():
        out = bundle.decoder(img[None])[0]
    bits = (out > 0.5).long()
    print(f"message={message_to_hex(WatermarkMessage.from_tensor(bits))}")
    print("bit,value,output,confidence")
    for i, (b, y) in enumerate(zip(bits.tolist(), out.tolist())):
        # distance from the threshold, scaled so 0 and 1 map to full confidence
        print(f"{i},{b},{y:.6f},{min(1.0, abs(y - 0.5) * 2):.6f}")
    return 0


def _plan(args):
    from .benchmark import BenchmarkPlan

    plan = BenchmarkPlan.from_dict(json.loads(Path(args.config).read_text())) if args.config else BenchmarkPlan()
    if args.seed is not None:
        plan.seed = args.seed
    if getattr(args, "trials", None) is not None:
        plan.trials = args.trials
    if getattr(args, "messages", None) is not None:
        plan.messages = args.messages
    if args.alpha is not None:
        plan.alpha = args.alpha
    plan.__post_init__()
    return plan


def _messages_for(source, ckpt, n):
    from .training import stored_messages

    if source != "training":
        return None
    stored = stored_messages(ckpt)
    if stored is None:
        raise ValueError("checkpoint has no fixed training messages")
    if stored.shape[0] != n:
        raise ValueError(f"checkpoint holds {stored.shape[0]} training messages for {n} images")
    return stored


def _print_aggregates(aggregates, label=None):
    from .benchmark import format_param

    head = "kind,param,n,mean_bit_accuracy,std_bit_accuracy,mean_psnr"
    print(("variant," if label else "") + head)
    for a in aggregates:
        cells = [a["kind"], format_param(a["param"]), str(a["n"]), f"{a['mean_bit_accuracy']:.6f}",
                 f"{a['std_bit_accuracy']:.6f}", f"{a['mean_psnr']:.4f}"]
        print(",".join(([label] if label else []) + cells))


def cmd_benchmark(args):
    from .benchmark import run_benchmark, write_report
    from .data import load_dataset

    _apply_threads()
    ckpt, bundle = _bundle(args)
    plan = _plan(args)
    plan.checkpoint, plan.images_dir = str(args.checkpoint), str(args.images)
    cfg = bundle.config
    images = load_dataset(args.images, cfg.H, cfg.W)
    messages = _messages_for(plan.messages, ckpt, len(images))
    report = run_benchmark(plan, bundle, [im.data for im in images], [im.name for im in images], messages)
    paths = write_report(report, args.out)
    _print_aggregates(report.aggregates)
    print(f"csv={paths['csv']}")
    return 0


def cmd_ablate(args):
    from .ablation import ABLATION_VARIANTS, run_ablation, table_text, write_ablation
    from .benchmark import BenchmarkPlan
    from .data import load_dataset

    _apply_threads()
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    plan = BenchmarkPlan.from_dict(json.loads(Path(args.plan).read_text())) if args.plan else BenchmarkPlan(
        sweeps=[("identity", [None]), ("jpeg_real", [50])], messages="training" if config.fixed_messages else "random"
    )
    if args.alpha is not None:
        plan.alpha = args.alpha
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    images = load_dataset(args.images, config.H, config.W)
    messages = None
    if plan.messages == "training":
        if not config.fixed_messages:
            raise ValueError("plan uses training messages but the config has fixed_messages=false")
        from .training import training_messages

        messages = training_messages(len(images), config)
    rows, _ = run_ablation(config, variants, [im.data for im in images], plan, [im.name for im in images],
                           messages, out_dir=args.out)
    write_ablation(rows, args.out)
    sys.stdout.write(table_text(rows))
    return 0


def cmd_analyze(args):
    from .analysis import run_analysis
    from .data import load_dataset

    ckpt, bundle = _bundle(args)
    cfg = bundle.config
    images = load_dataset(args.images, cfg.H, cfg.W)
    messages = _messages_for(args.messages, ckpt, len(images))
    seed = 0 if args.seed is None else args.seed
    records = run_analysis(bundle, [im.data for im in images], [im.name for im in images], args.out,
                           messages=messages, seed=seed, alpha=args.alpha)
    print("image_id,consistency,psnr,bitacc")
    for r in records:
        print(f"{r.image_id},{r.consistency:.6f},{r.psnr:.4f},{r.bitacc:.6f}")
    return 0


def cmd_describe(args):
    from .networks import describe, make_variant

    if args.checkpoint:
        _, bundle = _bundle(args)
    elif args.config:
        bundle = make_variant(TrainConfig.load(args.config))
    else:
        bundle = make_variant(TrainConfig())
    info = describe(bundle)
    info["config"] = bundle.config.to_dict()
    print(json.dumps(info, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deend", description="Decoder-driven image watermarking")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=False, checkpoint=False, out=False, seed=False, alpha=False):
        if config:
            sp.add_argument("--config", help="JSON file")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint archive")
        if out:
            sp.add_argument("--out", required=True, help="output path")
        if seed:
            sp.add_argument("--seed", type=int, default=None)
        if alpha:
            sp.add_argument("--alpha", type=float, default=None, help="strength factor override")

    sp = sub.add_parser("train", help="train a model from a config and an image directory")
    common(sp, config=True, out=True, seed=True)
    sp.add_argument("--images", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("embed", help="watermark one image")
    common(sp, checkpoint=True, out=True, alpha=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--message", help="hex payload, ceil(L/4) digits")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("extract", help="read the message from one image")
    common(sp, checkpoint=True)
    sp.add_argument("--image", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("benchmark", help="robustness sweeps; writes CSV, JSON and PNG figures")
    common(sp, config=True, checkpoint=True, out=True, seed=True, alpha=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--messages", choices=("random", "training"), default=None)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("ablate", help="train and benchmark several variants")
    common(sp, config=True, out=True, seed=True, alpha=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--variants", default=None, help="comma separated (default deend,de_a_end_b,e_w_nd)")
    sp.add_argument("--plan", default=None, help="benchmark plan JSON")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("analyze", help="coupling maps and consistency scores")
    common(sp, checkpoint=True, out=True, seed=True, alpha=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--messages", choices=("random", "training"), default="random")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("describe", help="print the parameter manifest as JSON")
    common(sp, config=True, checkpoint=True)
    sp.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "checkpoint", "") is None and args.command in ("embed", "extract", "benchmark", "analyze"):
        parser.error("--checkpoint is required")
    if args.command in ("train", "ablate") and not args.config:
        parser.error("--config is required")
    try:
        return args.func(args)
    except MessageLengthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LENGTH
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""Losses, the two-phase loss-weight schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .config import (
    NoiseSpec,
    TrainConfig,
    WatermarkMessage,
    message_to_hex,
    validate_config,
)
from .metrics import bit_accuracy_batch, psnr_batch
from .networks import ModelBundle, make_variant, threshold_bits
from .noise import DistortionContext, apply_noise

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossReport:
    l_e: float
    l_d: float
    l_ad: float
    l_dis: float
    total: float
    lambdas: tuple[float, float, float]
    bit_accuracy: float = float("nan")
    psnr: float = float("nan")


def loss_decoder(message: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Mean squared error between message bits and decoder outputs."""
    if message.shape != logits.shape:
        raise ValueError(f"message shape {tuple(message.shape)} != logits shape {tuple(logits.shape)}")
    return torch.mean((logits - message.to(logits.dtype)) ** 2)


def loss_encoder(host: torch.Tensor, watermarked: torch.Tensor) -> torch.Tensor:
    if host.shape != watermarked.shape:
        raise ValueError(f"host shape {tuple(host.shape)} != watermarked shape {tuple(watermarked.shape)}")
    return torch.mean((watermarked - host) ** 2)


def _clamp_prob(p) -> torch.Tensor:
    # float64 so that 1 - PROB_EPS is representable
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p.double()
    if torch.isnan(p).any():
        raise FloatingPointError("non-finite discriminator probability")
    if (p < 0).any() or (p > 1).any():
        raise ValueError("discriminator probability outside [0, 1]")
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def loss_adversarial(p_em, literal: bool = False) -> torch.Tensor:
    """Generator loss given the discriminator's watermark probability on I_em.

    Default: ``-log(1 - p_em)``, pushing watermarked images to look unmarked.
    ``literal`` returns the unsigned form ``log(p_em)``.
    """
    dtype = p_em.dtype if torch.is_tensor(p_em) else torch.get_default_dtype()
    p = _clamp_prob(p_em)
    loss = torch.log(p).mean() if literal else -torch.log1p(-p).mean()
    return loss.to(dtype)


def loss_discriminator(p_em, p_host, literal: bool = False) -> torch.Tensor:
    """Discriminator loss: ``-log(p_em) - log(1 - p_host)``.

    ``literal`` drops the host term and returns ``log(1 - p_em)``.
    """
    dtype = p_em.dtype if torch.is_tensor(p_em) else torch.get_default_dtype()
    pe = _clamp_prob(p_em)
    if literal:
        return torch.log1p(-pe).mean().to(dtype)
    ph = _clamp_prob(p_host)
    return (-torch.log(pe).mean() - torch.log1p(-ph).mean()).to(dtype)


def lambda_schedule(epoch: int, config: TrainConfig) -> tuple[float, float, float]:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return tuple(config.lambda_phase1 if epoch < config.phase_switch_epoch else config.lambda_phase2)


class Optimizers:
    """Adam for the generator (encoder + decoders) and for the discriminator."""

    def __init__(self, bundle: ModelBundle, lr: float):
        self.generator = torch.optim.Adam(bundle.generator_parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
        self.discriminator = torch.optim.Adam(
            bundle.discriminator.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8
        )


def _finite(name, value):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite {name} loss: {value}")


def train_step(
    bundle: ModelBundle,
    host: torch.Tensor,
    message: torch.Tensor,
    noise: NoiseSpec,
    lambdas: Sequence[float],
    optimizers: Optimizers,
    rng_seed: int = 0,
) -> LossReport:
    """One discriminator update followed by one generator update."""
    cfg = bundle.config
    literal = cfg.literal_gan
    lam1, lam2, lam3 = lambdas
    bundle.train()

    watermarked = bundle.embed(host, message)

    # discriminator; the generator graph is untouched because I_em is detached
    opt_d = optimizers.discriminator
    opt_d.zero_grad(set_to_none=True)
    l_dis = loss_discriminator(
        bundle.discriminator(watermarked.detach()), bundle.discriminator(host), literal
    )
    _finite("discriminator", l_dis.item())
    l_dis.backward()
    opt_d.step()

    # generator: encoder and decoder(s) jointly, discriminator frozen
    disc = bundle.discriminator
    disc.requires_grad_(False)
    try:
        distorted = apply_noise(noise, watermarked, DistortionContext(host, rng_seed, training=True))
        logits = bundle.decoder(distorted)
        l_e = loss_encoder(host, watermarked)
        l_d = loss_decoder(message, logits)
        l_ad = loss_adversarial(disc(watermarked), literal)
        total = lam1 * l_e + lam2 * l_d + lam3 * l_ad
        _finite("generator", total.item())
        opt_g = optimizers.generator
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
    finally:
        disc.requires_grad_(True)

    with torch.no_grad():
        acc = bit_accuracy_batch(message, threshold_bits(logits)).item()
        psnr = psnr_batch(host, watermarked).item()
    return LossReport(
        l_e=l_e.item(),
        l_d=l_d.item(),
        l_ad=l_ad.item(),
        l_dis=l_dis.item(),
        total=total.item(),
        lambdas=(lam1, lam2, lam3),
        bit_accuracy=acc,
        psnr=psnr,
    )


def random_messages(n: int, L: int, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, 2, (n, L), generator=generator).float()


def training_messages(n: int, config: TrainConfig) -> torch.Tensor:
    """The seeded fixed pairing used when ``config.fixed_messages`` is set."""
    return random_messages(n, config.L, torch.Generator().manual_seed(config.seed + 2))


def stored_messages(checkpoint: Checkpoint) -> torch.Tensor | None:
    """Fixed training messages recorded in a checkpoint, if any (``N x L``)."""
    hexes = checkpoint.extra.get("messages")
    if not hexes:
        return None
    L = checkpoint.config.L
    return torch.stack([WatermarkMessage.from_hex(h, L).tensor() for h in hexes])


def stack_images(dataset) -> torch.Tensor:
    """Accept a tensor batch or a sequence of ImageArray / C x H x W tensors."""
    if torch.is_tensor(dataset):
        return dataset.float()
    return torch.stack([getattr(im, "data", im) for im in dataset]).float()


def train(
    config: TrainConfig,
    dataset,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    messages: torch.Tensor | None = None,
) -> tuple[Checkpoint, list[dict], ModelBundle]:
    """Train a bundle from scratch; returns the final checkpoint, metrics log and model.

    ``messages`` (``N x L``) pairs each image with a fixed message.  Without it,
    ``config.fixed_messages`` draws such a pairing from the seed, and otherwise a
    fresh random message is drawn for every sample of every step.  A fixed
    pairing is stored in the checkpoint (``extra["messages"]``, hex strings).

    With ``out_dir`` set, ``checkpoint.ckpt`` is rewritten after every epoch and
    one JSON line per epoch is appended to ``metrics.jsonl``.
    """
    validate_config(config)
    images = stack_images(dataset)
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    if tuple(images.shape[1:]) != (config.C, config.H, config.W):
        raise ValueError(
            f"dataset images are {tuple(images.shape[1:])}, config expects {(config.C, config.H, config.W)}"
        )
    if messages is None and config.fixed_messages:
        messages = training_messages(images.shape[0], config)
    if messages is not None:
        messages = torch.as_tensor(messages).float()
        if tuple(messages.shape) != (images.shape[0], config.L):
            raise ValueError(f"messages must be {(images.shape[0], config.L)}, got {tuple(messages.shape)}")

    torch.manual_seed(config.seed)
    bundle = make_variant(config)
    optimizers = Optimizers(bundle, config.learning_rate)
    order_rng = np.random.default_rng(config.seed)
    msg_gen = torch.Generator().manual_seed(config.seed + 1)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "metrics.jsonl").write_text("")
        config.save(out_path / "config.json")

    extra = {}
    if messages is not None:
        extra["messages"] = [message_to_hex(WatermarkMessage.from_tensor(m)) for m in messages]
    n = images.shape[0]
    history = []
    checkpoint = None
    for epoch in range(config.epochs):
        lambdas = lambda_schedule(epoch, config)
        perm = order_rng.permutation(n)
        reports = []
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(perm[start : start + config.batch_size])
            host = images[idx]
            message = messages[idx] if messages is not None else random_messages(len(idx), config.L, msg_gen)
            seed = int(order_rng.integers(2**31))
            reports.append(train_step(bundle, host, message, config.noise, lambdas, optimizers, seed))
        record = {"epoch": epoch}
        for key in ("l_e", "l_d", "l_ad", "l_dis", "total"):
            record[key] = float(np.mean([getattr(r, key) for r in reports]))
        record["psnr_train"] = float(np.mean([r.psnr for r in reports]))
        record["bitacc_train"] = float(np.mean([r.bit_accuracy for r in reports]))
        record["lambdas"] = list(lambdas)
        history.append(record)
        log.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
        checkpoint = Checkpoint.from_bundle(bundle, epoch=epoch, rng_state=msg_gen.get_state())
        checkpoint.extra.update(extra)
        if out_path is not None:
            with open(out_path / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            save_checkpoint(checkpoint, out_path / "checkpoint.ckpt")
    if checkpoint is None:
        checkpoint = Checkpoint.from_bundle(bundle, epoch=-1, rng_state=msg_gen.get_state())
        checkpoint.extra.update(extra)
    bundle.eval()
    return checkpoint, history, bundle


@torch.no_grad()
def evaluate(
    bundle: ModelBundle,
    images: torch.Tensor,
    messages: torch.Tensor,
    noise: NoiseSpec | None = None,
    seed: int = 0,
    alpha: float | None = None,
) -> dict:
    """Inference-mode bit accuracy and PSNR over a batch."""
    bundle.eval()
    noise = noise or NoiseSpec()
    watermarked = bundle.embed(images, messages, alpha)
    distorted = apply_noise(noise, watermarked, DistortionContext(images, seed, training=False))
    bits = threshold_bits(bundle.decoder(distorted))
    return {
        "bit_accuracy": bit_accuracy_batch(messages, bits).item(),
        "psnr": psnr_batch(images, watermarked).item(),
        "per_image_accuracy": (bits == messages.long()).float().mean(dim=1).tolist(),
    }


def report_dict(report: LossReport) -> dict:
    return asdict(report)

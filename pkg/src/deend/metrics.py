"""Quality metrics and the encoder/decoder coupling analysis.

The coupling analysis compares two maps over the host image:

* the encoded residual ``I_em - I_o`` (what the encoder actually embeds), and
* the decoder-needed map, the gradient of ``MSE(D(I_o), M)`` w.r.t. ``I_o``
  (which pixels the decoder is sensitive to when reading ``M``).

Both are normalized by taking absolute values and min-max scaling to [0, 1];
their agreement is scored with a centered cosine similarity.
"""

from __future__ import annotations

import math

import torch

PSNR_CAP = 100.0


def quantize8(x: torch.Tensor) -> torch.Tensor:
    return torch.round(x.detach().double().clamp(0, 1) * 255.0)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB between two images after 8-bit quantization (MAX = 255).

    Identical quantized images give ``PSNR_CAP``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean((quantize8(a) - quantize8(b)) ** 2).item()
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0**2 / mse))


def psnr_batch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean per-image PSNR over a ``B x C x H x W`` batch."""
    return torch.tensor([psnr(x, y) for x, y in zip(a, b)], dtype=torch.float64).mean()


def _bits(m) -> torch.Tensor:
    if hasattr(m, "bits"):
        return torch.tensor(m.bits)
    return torch.as_tensor(m).long()


def bit_accuracy(sent, received) -> float:
    s, r = _bits(sent).flatten(), _bits(received).flatten()
    if s.shape != r.shape:
        raise ValueError(f"message lengths differ: {s.numel()} vs {r.numel()}")
    return (s == r).double().mean().item()


def bit_accuracy_batch(sent: torch.Tensor, received: torch.Tensor) -> torch.Tensor:
    return (sent.long() == received.long()).double().mean()


def decoder_needed_map(decoder, host: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
    """Gradient of ``MSE(D(host), message)`` w.r.t. the host image (raw map).

    ``decoder`` is any callable mapping a ``B x C x H x W`` batch to ``B x L``;
    modules are switched to inference mode for the pass.
    """
    was_training = getattr(decoder, "training", False)
    if hasattr(decoder, "eval"):
        decoder.eval()
    try:
        x = host.detach().clone()
        single = x.dim() == 3
        if single:
            x = x[None]
        x.requires_grad_(True)
        m = torch.as_tensor(message).to(x.dtype)
        if m.dim() == 1:
            m = m[None]
        out = decoder(x)
        if out.shape != m.shape:
            raise ValueError(f"decoder output {tuple(out.shape)} does not match message {tuple(m.shape)}")
        # per-image MSE so each map is independent of the batch size
        loss = ((out - m) ** 2).mean(dim=1).sum()
        (grad,) = torch.autograd.grad(loss, x)
    finally:
        if was_training:
            decoder.train()
    return grad[0] if single else grad


@torch.no_grad()
def encoded_residual_map(bundle, host: torch.Tensor, message: torch.Tensor, alpha: float | None = None):
    """``I_em - I_o``, so clamping at the image bounds is reflected."""
    bundle.eval()
    single = host.dim() == 3
    h = host[None] if single else host
    m = message[None] if message.dim() == 1 else message
    out = bundle.embed(h, m.to(h.dtype), alpha) - h
    return out[0] if single else out


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    """``|m|`` min-max scaled to [0, 1]; a constant map becomes all zeros."""
    a = m.detach().abs()
    lo, hi = a.min(), a.max()
    if hi == lo:
        return torch.zeros_like(a)
    return (a - lo) / (hi - lo)


def coupling_consistency(r: torch.Tensor, g: torch.Tensor) -> float:
    """Cosine similarity of the mean-centered flattened maps; 0 if either is flat."""
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(r.shape)} vs {tuple(g.shape)}")
    a = r.detach().double().flatten()
    b = g.detach().double().flatten()
    a = a - a.mean()
    b = b - b.mean()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return 0.0
    return float(torch.clamp(a @ b / (na * nb), -1.0, 1.0))


def coupling_score(bundle, host: torch.Tensor, message: torch.Tensor, alpha: float | None = None) -> float:
    """Consistency between the normalized residual and decoder-needed maps of one image."""
    r = normalize_map(encoded_residual_map(bundle, host, message, alpha))
    g = normalize_map(decoder_needed_map(bundle.decoder, host, message))
    return coupling_consistency(r, g)

"""Shared decoder, encoder, discriminator and the architecture variants.

All networks work on batched tensors ``B x C x H x W``.  A :class:`ModelBundle`
ties them together for one of the four variants:

``deend``       one decoder, used for guidance on the host and for extraction.
``de_a_end_b``  guidance decoder and extraction decoder with separate weights.
``e_w_nd``      no guidance pass; the encoder sees the message only.
``end_baseline`` encoder-driven reference: the encoder sees host + message.
"""

from __future__ import annotations


import torch
import torch.nn.functional as F
from torch import nn

from .config import TrainConfig, validate_config

HIDDEN = 64
SE_REDUCTION = 8
BASELINE_BLOCKS = 4
# The residual layer starts close to zero so I_o + R is not saturated by the
# clamp at step 0 (a Kaiming-scaled layer gives a residual with std ~1).
RESIDUAL_INIT_SCALE = 0.01


def init_weights(module: nn.Module) -> None:
    """Kaiming fan-in weights, zero biases, unit BN scale / zero shift."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_residual_layer(layer: nn.Module) -> None:
    with torch.no_grad():
        layer.weight.mul_(RESIDUAL_INIT_SCALE)


class ConvBNReLU(nn.Module):
    def __init__(self, channels_in, channels_out, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(channels_in, channels_out, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(channels_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class SEBlock(nn.Module):
    """Conv (optionally stride 2) -> BN -> ReLU -> squeeze-excitation channel gate."""

    def __init__(self, channels, stride=2, reduction=SE_REDUCTION):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=stride, padding=1)
        self.bn = nn.BatchNorm2d(channels)
        hidden = max(1, channels // reduction)
        self.squeeze = nn.Linear(channels, hidden)
        self.excite = nn.Linear(hidden, channels)

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        gate = x.mean(dim=(2, 3))
        gate = torch.sigmoid(self.excite(F.relu(self.squeeze(gate))))
        return x * gate[:, :, None, None]


class Decoder(nn.Module):
    """Image -> length-L vector.

    Stem Conv-BN-ReLU, three stride-2 SE-blocks down to ``H/8 x W/8``, then
    ``unions - 3`` Conv-BN-ReLU units, one SE-block and a linear head.
    """

    def __init__(self, H, W, C, L, unions=5):
        super().__init__()
        if not 3 <= unions <= 7:
            raise ValueError(f"decoder unions must be in [3, 7], got {unions}")
        self.input_shape = (C, H, W)
        self.L = L
        self.unions = unions
        self.stem = ConvBNReLU(C, HIDDEN)
        self.down = nn.ModuleList([SEBlock(HIDDEN, stride=2) for _ in range(3)])
        tail = [ConvBNReLU(HIDDEN, HIDDEN) for _ in range(unions - 3)]
        tail.append(SEBlock(HIDDEN, stride=1))
        self.tail = nn.ModuleList(tail)
        self.head = nn.Linear(HIDDEN * (H // 8) * (W // 8), L)
        init_weights(self)

    def forward(self, image):
        _check_batch(image, self.input_shape)
        x = self.stem(image)
        for block in self.down:
            x = block(x)
        for block in self.tail:
            x = block(x)
        return self.head(x.flatten(1))


class Upsample(nn.Module):
    """x2 spatial upsampling followed by Conv-BN-ReLU.

    ``unpool`` places each value at one fixed, randomly sampled location of its
    2x2 output window (a max-unpooling with frozen indices); the locations are
    drawn once from ``seed`` and stored as a buffer.
    """

    def __init__(self, channels, mode, in_size, seed=0):
        super().__init__()
        self.mode = mode
        if mode == "transpose_conv":
            self.conv = nn.ConvTranspose2d(channels, channels, 2, stride=2)
        elif mode in ("nearest_interp", "unpool"):
            self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        else:
            raise ValueError(f"unknown upsample mode {mode!r}")
        self.bn = nn.BatchNorm2d(channels)
        if mode == "unpool":
            h, w = in_size
            g = torch.Generator().manual_seed(seed)
            pick = torch.randint(0, 4, (channels, h, w), generator=g)
            mask = F.one_hot(pick, 4).view(channels, h, w, 2, 2)
            mask = mask.permute(0, 1, 3, 2, 4).reshape(channels, 2 * h, 2 * w)
            self.register_buffer("unpool_mask", mask.float())

    def forward(self, x):
        if self.mode == "transpose_conv":
            x = self.conv(x)
        else:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if self.mode == "unpool":
                x = x * self.unpool_mask.to(x.dtype)
            x = self.conv(x)
        return F.relu(self.bn(x))


class Encoder(nn.Module):
    """Length-``in_features`` vector -> ``C x H x W`` residual.

    ``in_features`` is ``2L`` for the decoder-guided encoder (feature then
    message) and ``L`` for the message-only variant.
    """

    def __init__(self, H, W, C, in_features, upsample_mode="nearest_interp", seed=0):
        super().__init__()
        self.output_shape = (C, H, W)
        self.in_features = in_features
        self.upsample_mode = upsample_mode
        h, w = H // 8, W // 8
        self.linear = nn.Linear(in_features, h * w)
        self.stem = ConvBNReLU(1, HIDDEN)
        self.up = nn.ModuleList(
            [Upsample(HIDDEN, upsample_mode, (h * 2**i, w * 2**i), seed=seed + i) for i in range(3)]
        )
        self.final = nn.Conv2d(HIDDEN, C, 3, padding=1)
        init_weights(self)
        init_residual_layer(self.final)

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"encoder expects B x {self.in_features} input, got {tuple(x.shape)}")
        _, H, W = self.output_shape
        x = self.linear(x).view(-1, 1, H // 8, W // 8)
        x = self.stem(x)
        for block in self.up:
            x = block(x)
        return self.final(x)


class BaselineEncoder(nn.Module):
    """Encoder-driven reference: message tiled spatially, concatenated to the host."""

    def __init__(self, H, W, C, L, blocks=BASELINE_BLOCKS):
        super().__init__()
        self.output_shape = (C, H, W)
        self.L = L
        layers = [ConvBNReLU(C + L, HIDDEN)]
        layers += [ConvBNReLU(HIDDEN, HIDDEN) for _ in range(blocks - 1)]
        self.blocks = nn.ModuleList(layers)
        self.final = nn.Conv2d(HIDDEN, C, 1)
        init_weights(self)
        init_residual_layer(self.final)

    def forward(self, image, message):
        _check_batch(image, self.output_shape)
        if message.shape != (image.shape[0], self.L):
            raise ValueError(f"message shape {tuple(message.shape)} does not match B x {self.L}")
        tiled = message[:, :, None, None].expand(-1, -1, image.shape[2], image.shape[3])
        x = torch.cat([image, tiled.to(image.dtype)], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.final(x)


class Discriminator(nn.Module):
    """Four Conv-BN-ReLU blocks, global average pooling and a linear logit.

    The probability it outputs is read as "this image carries a watermark".
    """

    def __init__(self, C, blocks=4):
        super().__init__()
        chans = [C] + [HIDDEN] * blocks
        self.blocks = nn.ModuleList([ConvBNReLU(a, b) for a, b in zip(chans, chans[1:])])
        self.head = nn.Linear(HIDDEN, 1)
        init_weights(self)

    def logit(self, image):
        x = image
        for block in self.blocks:
            x = block(x)
        return self.head(x.mean(dim=(2, 3))).squeeze(1)

    def forward(self, image):
        return torch.sigmoid(self.logit(image))


def _check_batch(x, shape):
    if x.dim() != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise ValueError(f"expected B x {' x '.join(map(str, shape))} input, got {tuple(x.shape)}")


def _batched(x, dims):
    """Add a batch axis to unbatched input; returns (tensor, was_unbatched)."""
    if x.dim() == dims:
        return x.unsqueeze(0), True
    return x, False


class ModelBundle(nn.Module):
    """Encoder, extraction decoder, optional guidance decoder and discriminator."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        c = config
        self.variant = c.variant
        self.decoder = Decoder(c.H, c.W, c.C, c.L, c.decoder_unions)
        if c.variant == "de_a_end_b":
            self.decoder_a = Decoder(c.H, c.W, c.C, c.L, c.decoder_unions)
        if c.variant in ("deend", "de_a_end_b"):
            self.encoder = Encoder(c.H, c.W, c.C, 2 * c.L, c.upsample_mode, seed=c.seed)
        elif c.variant == "e_w_nd":
            self.encoder = Encoder(c.H, c.W, c.C, c.L, c.upsample_mode, seed=c.seed)
        elif c.variant == "end_baseline":
            self.encoder = BaselineEncoder(c.H, c.W, c.C, c.L)
        else:
            raise ValueError(f"unknown variant {c.variant!r}")
        self.discriminator = Discriminator(c.C)

    @property
    def guide_decoder(self) -> Decoder | None:
        """Decoder used for the guidance pass on the host, if the variant has one."""
        if self.variant == "deend":
            return self.decoder
        if self.variant == "de_a_end_b":
            return self.decoder_a
        return None

    def generator_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("discriminator.")]

    def residual(self, host, message):
        """Encoder output R for a batch of hosts and messages."""
        message = message.to(host.dtype)
        if self.variant == "end_baseline":
            return self.encoder(host, message)
        if self.variant == "e_w_nd":
            return self.encoder(message)
        feature = self.guide_decoder(host)
        return encoder_forward(self.encoder, feature, message)

    def embed(self, host, message, alpha=None):
        alpha = self.config.alpha if alpha is None else alpha
        return torch.clamp(host + alpha * self.residual(host, message), 0.0, 1.0)

    def forward(self, host, message, alpha=None):
        return self.embed(host, message, alpha)


def decoder_forward(net: Decoder, image: torch.Tensor) -> torch.Tensor:
    """Length-L latent feature / message logits for one image or a batch."""
    image, single = _batched(image, 3)
    out = net(image)
    return out[0] if single else out


def encoder_forward(net: Encoder, feature: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
    """Residual from the feature ``F`` concatenated (first) with the message ``M``."""
    feature, single = _batched(feature, 1)
    message, _ = _batched(message, 1)
    if feature.shape != message.shape:
        raise ValueError(f"feature {tuple(feature.shape)} and message {tuple(message.shape)} lengths differ")
    if 2 * feature.shape[1] != net.in_features:
        raise ValueError(f"encoder expects length {net.in_features // 2}, got {feature.shape[1]}")
    out = net(torch.cat([feature, message.to(feature.dtype)], dim=1))
    return out[0] if single else out


def embed(net: Encoder, decoder: Decoder, host: torch.Tensor, message: torch.Tensor, alpha: float) -> torch.Tensor:
    """clamp(host + alpha * E(D(host), M), 0, 1) for the decoder-guided encoder."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    host, single = _batched(host, 3)
    message, _ = _batched(message, 1)
    residual = encoder_forward(net, decoder(host), message)
    out = torch.clamp(host + alpha * residual, 0.0, 1.0)
    return out[0] if single else out


def threshold_bits(logits: torch.Tensor) -> torch.Tensor:
    return (logits > 0.5).to(torch.int64)


def extract(net: Decoder, image: torch.Tensor) -> torch.Tensor:
    """Bits of the decoded message: 1 where the decoder output exceeds 0.5."""
    return threshold_bits(decoder_forward(net, image))


def discriminator_forward(net: Discriminator, image: torch.Tensor) -> torch.Tensor:
    image, single = _batched(image, 3)
    out = net(image)
    return out[0] if single else out


def make_decoder(config: TrainConfig) -> Decoder:
    return Decoder(config.H, config.W, config.C, config.L, config.decoder_unions)


def make_encoder(config: TrainConfig) -> Encoder:
    return Encoder(config.H, config.W, config.C, 2 * config.L, config.upsample_mode, seed=config.seed)


def make_variant(config: TrainConfig) -> ModelBundle:
    validate_config(config)
    return ModelBundle(config)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def manifest(bundle: ModelBundle) -> list[dict]:
    """Name, shape and dtype of every stored tensor (parameters and buffers)."""
    return [
        {"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
        for name, t in bundle.state_dict().items()
    ]


def describe(bundle: ModelBundle) -> dict:
    groups = {}
    for name, p in bundle.named_parameters():
        net = name.split(".", 1)[0]
        groups[net] = groups.get(net, 0) + p.numel()
    return {
        "variant": bundle.variant,
        "param_count": param_count(bundle),
        "param_count_by_net": groups,
        "shared_decoder": bundle.variant == "deend",
        "manifest": manifest(bundle),
    }


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


__all__ = [
    "ConvBNReLU",
    "SEBlock",
    "Decoder",
    "Encoder",
    "BaselineEncoder",
    "Discriminator",
    "ModelBundle",
    "decoder_forward",
    "encoder_forward",
    "embed",
    "extract",
    "discriminator_forward",
    "make_decoder",
    "make_encoder",
    "make_variant",
    "manifest",
    "describe",
    "param_count",
]

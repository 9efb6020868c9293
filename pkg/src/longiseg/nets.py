"""FC-DenseNet (Tiramisu) backbone and the four model variants.

All variants take a (B, C, h, w) slice batch with h, w multiples of
``2 ** n_pool`` and return a foreground probability map (B, 1, h, w).
The multitask variant also returns a (B, 2, h, w) displacement field in
pixel units, component order (row, col).

Thread safety: a model is owned by one training thread. In eval mode the
forward pass mutates no module state (batch-norm uses running statistics,
dropout is off), so concurrent eval forwards on one instance are safe under
``torch.no_grad()``.
"""

from __future__ import annotations

import enum
import io
import random
from collections import namedtuple
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .volumes import Layout

CHECKPOINT_VERSION = 1


class ModelVariant(str, enum.Enum):
    STATIC = "static"
    LONGITUDINAL = "longitudinal"
    MULTITASK = "multitask"
    SIAMESE = "siamese"

    @property
    def layout(self) -> Layout:
        return Layout.STATIC if self is ModelVariant.STATIC else Layout.LONGITUDINAL

    @property
    def in_channels(self) -> int:
        return self.layout.n_channels

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]


_DISPLAY = {
    ModelVariant.STATIC: "Baseline Static Network",
    ModelVariant.LONGITUDINAL: "Baseline Longitudinal Network",
    ModelVariant.MULTITASK: "Multitask Longitudinal Network",
    ModelVariant.SIAMESE: "Longitudinal Siamese Network",
}


@dataclass(frozen=True)
class BackboneConfig:
    """Tiramisu hyper-parameters.

    ``in_channels=None`` means "whatever the variant consumes".
    """

    in_channels: int | None = None
    first_conv_channels: int = 48
    growth_rate: int = 12
    layers_per_dense_block: int = 4
    n_pool: int = 5
    dropout_rate: float = 0.2
    bottleneck_layers: int = 4

    def __post_init__(self):
        for name in ("first_conv_channels", "growth_rate", "layers_per_dense_block", "bottleneck_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_pool < 0:
            raise ValueError("n_pool must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.n_pool

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


TINY_BACKBONE = BackboneConfig(first_conv_channels=8, growth_rate=4, layers_per_dense_block=2,
                               n_pool=2, dropout_rate=0.0, bottleneck_layers=2)

MultitaskOutput = namedtuple("MultitaskOutput", ["prob", "field"])


class DenseLayer(nn.Sequential):
    def __init__(self, in_ch, growth, dropout):
        super().__init__(
            nn.BatchNorm2d(in_ch),
            nn.ReLU(),
            nn.Conv2d(in_ch, growth, 3, padding=1),
            nn.Dropout2d(dropout),
        )


class DenseBlock(nn.Module):
    """Densely connected layers; returns only the newly produced features."""

    def __init__(self, in_ch, growth, n_layers, dropout):
        super().__init__()
        self.layers = nn.ModuleList(
            DenseLayer(in_ch + i * growth, growth, dropout) for i in range(n_layers)
        )
        self.out_channels = growth * n_layers

    def forward(self, x):
        new = []
        for layer in self.layers:
            y = layer(x)
            x = torch.cat([x, y], dim=1)
            new.append(y)
        return torch.cat(new, dim=1)


class TransitionDown(nn.Sequential):
    def __init__(self, ch, dropout):
        super().__init__(
            nn.BatchNorm2d(ch),
            nn.ReLU(),
            nn.Conv2d(ch, ch, 1),
            nn.Dropout2d(dropout),
            nn.MaxPool2d(2),
        )


class DownPath(nn.Module):
    """First convolution plus the dense blocks and transitions of the encoder.

    Returns ``(skips, x)``; ``skips[0]`` starts with the first-conv features.
    """

    def __init__(self, in_ch, cfg: BackboneConfig):
        super().__init__()
        self.first_conv = nn.Conv2d(in_ch, cfg.first_conv_channels, 3, padding=1)
        ch = cfg.first_conv_channels
        self.blocks = nn.ModuleList()
        self.transitions = nn.ModuleList()
        self.skip_channels = []
        for _ in range(cfg.n_pool):
            block = DenseBlock(ch, cfg.growth_rate, cfg.layers_per_dense_block, cfg.dropout_rate)
            ch += block.out_channels
            self.blocks.append(block)
            self.skip_channels.append(ch)
            self.transitions.append(TransitionDown(ch, cfg.dropout_rate))
        self.out_channels = ch

    def forward(self, x):
        x = self.first_conv(x)
        skips = []
        for block, down in zip(self.blocks, self.transitions):
            x = torch.cat([x, block(x)], dim=1)
            skips.append(x)
            x = down(x)
        return skips, x


class Encoder(nn.Module):
    """Down path followed by the bottleneck dense block."""

    def __init__(self, in_ch, cfg: BackboneConfig):
        super().__init__()
        self.down = DownPath(in_ch, cfg)
        self.bottleneck = DenseBlock(self.down.out_channels, cfg.growth_rate, cfg.bottleneck_layers,
                                     cfg.dropout_rate)
        self.skip_channels = self.down.skip_channels
        self.out_channels = self.bottleneck.out_channels

    def forward(self, x):
        skips, x = self.down(x)
        return skips, self.bottleneck(x)


class Decoder(nn.Module):
    """Up path of the Tiramisu ending in a 1x1 convolution with ``out_ch`` outputs."""

    def __init__(self, bottleneck_ch, skip_channels, cfg: BackboneConfig, out_ch):
        super().__init__()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        up_ch = bottleneck_ch
        stack_ch = bottleneck_ch
        for skip_ch in reversed(skip_channels):
            self.ups.append(nn.ConvTranspose2d(up_ch, up_ch, 3, stride=2, padding=1, output_padding=1))
            stack_ch = skip_ch + up_ch
            block = DenseBlock(stack_ch, cfg.growth_rate, cfg.layers_per_dense_block, cfg.dropout_rate)
            self.blocks.append(block)
            up_ch = block.out_channels
        self.head = nn.Conv2d(stack_ch + up_ch if skip_channels else stack_ch, out_ch, 1)

    def forward(self, skips, x):
        stack = x
        new = x
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            stack = torch.cat([skip, up(new)], dim=1)
            new = block(stack)
        if self.ups:
            stack = torch.cat([stack, new], dim=1)
        return self.head(stack)


class SegmentationModel(nn.Module):
    """Base class carrying the variant metadata every model exposes."""

    variant: ModelVariant

    def __init__(self, variant: ModelVariant, cfg: BackboneConfig):
        super().__init__()
        self.variant = variant
        self.cfg = cfg
        self.layout = variant.layout
        self.in_channels = variant.in_channels
        self.downsample_factor = cfg.downsample_factor

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"{self.variant.value} model expects (B, {self.in_channels}, h, w) input, "
                             f"got {tuple(x.shape)}")
        m = self.downsample_factor
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} must be padded to a multiple of {m}")


class SingleTaskNet(SegmentationModel):
    """Static (C=2) or early-fusion longitudinal (C=4) segmentation net."""

    def __init__(self, variant, cfg):
        super().__init__(variant, cfg)
        self.encoder = Encoder(self.in_channels, cfg)
        self.decoder = Decoder(self.encoder.out_channels, self.encoder.skip_channels, cfg, 1)

    def forward(self, x):
        self.check_input(x)
        skips, z = self.encoder(x)
        return torch.sigmoid(self.decoder(skips, z))


class MultitaskNet(SegmentationModel):
    """Shared encoder, one segmentation decoder and one registration decoder."""

    def __init__(self, variant, cfg):
        super().__init__(variant, cfg)
        self.encoder = Encoder(self.in_channels, cfg)
        self.seg_decoder = Decoder(self.encoder.out_channels, self.encoder.skip_channels, cfg, 1)
        self.reg_decoder = Decoder(self.encoder.out_channels, self.encoder.skip_channels, cfg, 2)
        # identity warp at initialization
        nn.init.zeros_(self.reg_decoder.head.weight)
        nn.init.zeros_(self.reg_decoder.head.bias)

    def forward(self, x):
        self.check_input(x)
        skips, z = self.encoder(x)
        prob = torch.sigmoid(self.seg_decoder(skips, z))
        return MultitaskOutput(prob, self.reg_decoder(skips, z))


class SiameseNet(SegmentationModel):
    """Late fusion: one shared down path per time-point, fused at the bottleneck.

    The decoder's skip connections come from the reference (t_i) stream, so
    the follow-up enters only through the bottleneck.
    """

    def __init__(self, variant, cfg):
        super().__init__(variant, cfg)
        self.stream_channels = self.in_channels // 2
        self.down = DownPath(self.stream_channels, cfg)
        self.bottleneck = DenseBlock(2 * self.down.out_channels, cfg.growth_rate, cfg.bottleneck_layers,
                                     cfg.dropout_rate)
        self.decoder = Decoder(self.bottleneck.out_channels, self.down.skip_channels, cfg, 1)

    def split_streams(self, x):
        return x[:, :self.stream_channels], x[:, self.stream_channels:]

    def forward(self, x):
        self.check_input(x)
        x_i, x_j = self.split_streams(x)
        skips_i, z_i = self.down(x_i)
        _, z_j = self.down(x_j)
        z = self.bottleneck(torch.cat([z_i, z_j], dim=1))
        return torch.sigmoid(self.decoder(skips_i, z))


def swap_streams(x: torch.Tensor) -> torch.Tensor:
    """Exchange the t_i and t_j channel groups of a longitudinal stack."""
    half = x.shape[1] // 2
    return torch.cat([x[:, half:], x[:, :half]], dim=1)


_CLASSES = {
    ModelVariant.STATIC: SingleTaskNet,
    ModelVariant.LONGITUDINAL: SingleTaskNet,
    ModelVariant.MULTITASK: MultitaskNet,
    ModelVariant.SIAMESE: SiameseNet,
}


def build_model(variant: ModelVariant | str, cfg: BackboneConfig = BackboneConfig()) -> SegmentationModel:
    variant = ModelVariant(variant)
    if cfg.in_channels is not None and cfg.in_channels != variant.in_channels:
        raise ValueError(f"variant {variant.value} consumes {variant.in_channels} channels, "
                         f"config says {cfg.in_channels}")
    return _CLASSES[variant](variant, cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def predict_prob(model, x: torch.Tensor) -> torch.Tensor:
    """Probability map from any variant's output."""
    out = model(x)
    return out.prob if isinstance(out, MultitaskOutput) else out


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointMismatch(ValueError):
    pass


def rng_state() -> dict:
    return {
        "torch": torch.get_rng_state(),
        "numpy": np.random.get_state(),
        "python": random.getstate(),
    }


def set_rng_state(state: dict) -> None:
    torch.set_rng_state(state["torch"])
    np.random.set_state(state["numpy"])
    random.setstate(state["python"])


def save_checkpoint(path, model: SegmentationModel, optimizer=None, epoch: int = 0, step: int = 0,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "backbone": model.cfg.to_dict(),
        "weights": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "rng_state": rng_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    return payload


def load_checkpoint(path, variant=None, cfg: BackboneConfig | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, payload)``.

    Passing ``variant`` or ``cfg`` asserts they match what was saved.
    """
    payload = read_checkpoint(path)
    saved_variant = ModelVariant(payload["variant"])
    saved_cfg = BackboneConfig.from_dict(payload["backbone"])
    if variant is not None and ModelVariant(variant) is not saved_variant:
        raise CheckpointMismatch(f"{path}: checkpoint holds variant {saved_variant.value}, "
                                 f"expected {ModelVariant(variant).value}")
    if cfg is not None and cfg != saved_cfg:
        raise CheckpointMismatch(f"{path}: backbone config mismatch: saved {saved_cfg}, requested {cfg}")
    model = build_model(saved_variant, saved_cfg)
    model.load_state_dict(payload["weights"], strict=True)
    return model, payload

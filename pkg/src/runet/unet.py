"""U-Net encoder-decoder backbone.

The network is assembled from level-indexed pieces so that the recurrent
models can cut it at any level: an :class:`Encoder` covering levels
``[lo, hi)``, a bottleneck block, and a :class:`Decoder` walking back from
``hi - 1`` down to ``lo``.  Level ``i`` carries ``base * 2**i`` channels at
``1 / 2**i`` of the input resolution; the bottleneck sits at level ``depth``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import functional as F
from .errors import InvalidConfigError, InvalidShapeError
from .nn import Conv2d, ConvBlock, ConvTranspose2d, Module
from .tensor import Tensor


@dataclass
class UNetConfig:
    in_channels: int = 3
    base_channels: int = 8
    depth: int = 4
    norm: str = "group"
    out_classes: int = 2

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 0 or self.in_channels < 1:
            raise InvalidConfigError(f"invalid U-Net config {self}")
        if self.norm not in ("group", "batch"):
            raise InvalidConfigError(f"unknown normalization {self.norm!r}")

    @property
    def schedule(self) -> list[int]:
        """Channel count per level, bottleneck last: (8, 16, 32, 64, 128) by default."""
        return channel_schedule(self.base_channels, self.depth)


def channel_schedule(base: int, depth: int) -> list[int]:
    return [base * 2 ** i for i in range(depth + 1)]


@dataclass
class EncoderActivations:
    """Pre-pooling activations of each encoder level plus the pooled bottom tensor."""

    skips: list[Tensor] = field(default_factory=list)
    bottom: Tensor | None = None


class LevelBlocks(Module):
    """Children keyed by absolute U-Net level, so names read ``enc.2.conv1.weight``."""

    def __getitem__(self, level: int) -> Module:
        return getattr(self, str(level))

    def __setitem__(self, level: int, module: Module) -> None:
        setattr(self, str(level), module)


class Encoder(Module):
    """Conv blocks for levels ``lo..hi-1``, each followed by 2x2 max pooling."""

    def __init__(self, in_channels: int, schedule: list[int], lo: int, hi: int, norm: str):
        super().__init__()
        self.lo, self.hi = lo, hi
        self.blocks = LevelBlocks()
        c = in_channels
        for level in range(lo, hi):
            self.blocks[level] = ConvBlock(c, schedule[level], norm)
            c = schedule[level]
        self.out_channels = c

    def forward(self, x: Tensor) -> EncoderActivations:
        skips = []
        for level in range(self.lo, self.hi):
            x = self.blocks[level](x)
            skips.append(x)
            x = F.max_pool2d(x)
        return EncoderActivations(skips, x)


class DecoderLevel(Module):
    def __init__(self, in_channels: int, channels: int, norm: str):
        super().__init__()
        self.up = ConvTranspose2d(in_channels, channels, stride=2)
        self.block = ConvBlock(2 * channels, channels, norm)

    def forward(self, d: Tensor, skip: Tensor) -> Tensor:
        u = self.up(d)
        if u.shape[2:] != skip.shape[2:]:
            raise InvalidShapeError(f"decoder: upsampled {u.shape} does not match skip {skip.shape}")
        return self.block(F.concat_channels(u, skip))


class Decoder(Module):
    """Upsample + skip-concat + conv block for levels ``hi-1`` down to ``lo``."""

    def __init__(self, schedule: list[int], lo: int, hi: int, norm: str):
        super().__init__()
        self.lo, self.hi = lo, hi
        self.levels = LevelBlocks()
        for level in range(hi - 1, lo - 1, -1):
            self.levels[level] = DecoderLevel(schedule[level + 1], schedule[level], norm)

    def forward(self, d: Tensor, skips: list[Tensor]) -> Tensor:
        if len(skips) != self.hi - self.lo:
            raise InvalidShapeError(f"decoder expects {self.hi - self.lo} skips, got {len(skips)}")
        for level in range(self.hi - 1, self.lo - 1, -1):
            d = self.levels[level](d, skips[level - self.lo])
        return d


class EncoderDecoder(Module):
    """The U-Net portion spanning levels ``start..depth``.

    With ``start == 0`` this is the whole U-Net body; with ``start == depth``
    it degenerates to the bottleneck block.  Output has ``schedule[start]``
    channels at the input's resolution.
    """

    def __init__(self, in_channels: int, schedule: list[int], start: int, norm: str):
        super().__init__()
        depth = len(schedule) - 1
        if not 0 <= start <= depth:
            raise InvalidConfigError(f"start level {start} outside 0..{depth}")
        self.start, self.depth = start, depth
        self.scale = 2 ** (depth - start)
        self.enc = Encoder(in_channels, schedule, start, depth, norm)
        self.bottleneck = ConvBlock(self.enc.out_channels, schedule[depth], norm)
        self.dec = Decoder(schedule, start, depth, norm)
        self.out_channels = schedule[start]

    def encode(self, x: Tensor) -> EncoderActivations:
        _check_divisible(x, self.scale)
        return self.enc(x)

    def decode(self, acts: EncoderActivations, bottleneck: Tensor) -> Tensor:
        return self.dec(bottleneck, acts.skips)

    def forward(self, x: Tensor) -> Tensor:
        acts = self.encode(x)
        return self.decode(acts, self.bottleneck(acts.bottom))


def _check_divisible(x: Tensor, scale: int) -> None:
    if x.ndim != 4:
        raise InvalidShapeError(f"expected NCHW input, got shape {x.shape}")
    H, W = x.shape[2:]
    if H % scale or W % scale:
        raise InvalidShapeError(f"input {H}x{W} not divisible by {scale}")


class SegmentationHead(Module):
    """1x1 convolution to class logits; foreground probability is softmax channel 1."""

    def __init__(self, in_channels: int, classes: int = 2):
        super().__init__()
        self.conv = Conv2d(in_channels, classes, kernel_size=1, padding=0)

    def forward(self, d: Tensor) -> Tensor:
        return self.conv(d)


class UNet(Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        sched = cfg.schedule
        self.body = EncoderDecoder(cfg.in_channels, sched, 0, cfg.norm)
        self.head = SegmentationHead(sched[0], cfg.out_classes)

    @property
    def schedule(self) -> list[int]:
        return self.cfg.schedule

    def encode(self, x: Tensor) -> EncoderActivations:
        if x.shape[1] != self.cfg.in_channels:
            raise InvalidShapeError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        return self.body.encode(x)

    def bottleneck(self, bottom: Tensor) -> Tensor:
        return self.body.bottleneck(bottom)

    def decode(self, acts: EncoderActivations, bottleneck: Tensor) -> Tensor:
        return self.body.decode(acts, bottleneck)

    def segmentation_head(self, d: Tensor) -> Tensor:
        return self.head(d)

    def logits(self, x: Tensor) -> Tensor:
        acts = self.encode(x)
        return self.head(self.decode(acts, self.bottleneck(acts.bottom)))

    def forward(self, x: Tensor) -> list[Tensor]:
        return [self.logits(x)]


def build_unet(cfg: UNetConfig) -> UNet:
    model = UNet(cfg)
    model.assign_names()
    return model

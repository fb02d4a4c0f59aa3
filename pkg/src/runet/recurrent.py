"""Gated recurrent units wrapped around U-Net levels, and the recurrent baselines.

Recurrent U-Net at level ``l``: the outer encoder runs levels ``0..l-1`` on
``concat(image, s_{t-1})`` and yields ``e_l``; a gated unit whose gate
functions are copies of the U-Net portion below level ``l`` updates the hidden
tensor ``h``; the outer decoder maps ``d_l`` back to full resolution and the
head predicts the next mask ``s_t``.

    z     = sigmoid(f_z(e))
    r     = sigmoid(f_r(e))                      (DRU only)
    h_hat = tanh(f_h(r * e))   or tanh(f_h(e))   (DRU / SRU)
    h     = z * h_prev + (1 - z) * h_hat
    d     = f_s(h)

The gate subnets see only ``e``; ``h_prev`` enters through the blend alone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import functional as F
from .errors import InvalidConfigError, InvalidShapeError
from .nn import Conv2d, ConvBlock, Module
from .tensor import Tensor
from .unet import (
    Decoder,
    Encoder,
    EncoderDecoder,
    SegmentationHead,
    UNet,
    UNetConfig,
    _check_divisible,
    channel_schedule,
)

RECURRENT_VARIANTS = ("sru", "dru", "rec_last", "rec_mid", "rec_simple", "none")


@dataclass
class RecurrenceConfig:
    variant: str = "sru"
    level: int = 0
    steps: int = 3
    s0_init: float = 1.0
    h0_init: float = 1.0
    alpha: float = 0.4
    depth: int = 4

    def __post_init__(self):
        if self.variant not in RECURRENT_VARIANTS:
            raise InvalidConfigError(f"unknown recurrent variant {self.variant!r}")
        if self.variant in ("sru", "dru") and not 0 <= self.level <= self.depth:
            raise InvalidConfigError(f"level must lie in 0..{self.depth}, got {self.level}")
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        if not 0 < self.alpha <= 1:
            raise InvalidConfigError("alpha must lie in (0, 1]")


@dataclass
class RecurrentState:
    s: Tensor  # (B,1,H,W) foreground probability fed back as input
    h: Tensor  # (B,Ch,H/2^l,W/2^l) hidden tensor


class GateSubnet(Module):
    """Encoder-decoder copy of the replaced U-Net portion plus a linear 1x1 projection.

    The projection yields the gate pre-activation; its width is the hidden
    width for ``f_z``/``f_h`` and the width of ``e`` for ``f_r``.
    """

    def __init__(self, in_channels: int, schedule: list[int], level: int, norm: str,
                 out_channels: int):
        super().__init__()
        self.net = EncoderDecoder(in_channels, schedule, level, norm)
        self.proj = Conv2d(schedule[level], out_channels, kernel_size=1, padding=0)

    def forward(self, e: Tensor) -> Tensor:
        return self.proj(self.net(e))


class SubnetSet(Module):
    """f_z, f_h, optional f_r, and the output block f_s of one gated unit.

    ``preact_offsets`` is a test hook: a constant added to the named gate's
    pre-activation (keys ``"z"``, ``"r"``), used to saturate a gate.
    """

    def __init__(self, in_channels: int, schedule: list[int], level: int, norm: str,
                 dual: bool):
        super().__init__()
        hidden = schedule[level]
        self.hidden_channels = hidden
        self.f_z = GateSubnet(in_channels, schedule, level, norm, hidden)
        if dual:
            self.f_r = GateSubnet(in_channels, schedule, level, norm, in_channels)
        else:
            self.f_r = None
        self.f_h = GateSubnet(in_channels, schedule, level, norm, hidden)
        self.f_s = ConvBlock(hidden, hidden, norm, layers=1)
        self.preact_offsets: dict[str, float] = {}

    @property
    def dual(self) -> bool:
        return self.f_r is not None

    def _gate(self, key: str, subnet: GateSubnet, e: Tensor) -> Tensor:
        pre = subnet(e)
        offset = self.preact_offsets.get(key)
        if offset is not None:
            pre = pre + offset
        return F.sigmoid(pre)


def gate_tensors(e: Tensor, subnets: SubnetSet, use_reset: bool) -> dict[str, Tensor]:
    """Update gate ``z``, optional reset gate ``r`` and candidate ``h_hat`` for input ``e``."""
    z = subnets._gate("z", subnets.f_z, e)
    out = {"z": z}
    if use_reset:
        if subnets.f_r is None:
            raise InvalidConfigError("reset gate requested but the unit has no f_r")
        r = subnets._gate("r", subnets.f_r, e)
        out["r"] = r
        e = r * e
    out["h_hat"] = F.tanh(subnets.f_h(e))
    return out


def _blend(z: Tensor, h_prev: Tensor, h_hat: Tensor) -> Tensor:
    if h_prev.shape != h_hat.shape:
        raise InvalidShapeError(f"hidden state {h_prev.shape} does not match candidate {h_hat.shape}")
    return z * h_prev + (1.0 - z) * h_hat


def dru_step(e: Tensor, h_prev: Tensor, subnets: SubnetSet) -> tuple[Tensor, Tensor]:
    """Dual-gated update: returns ``(d, h)``."""
    g = gate_tensors(e, subnets, use_reset=True)
    h = _blend(g["z"], h_prev, g["h_hat"])
    return subnets.f_s(h), h


def sru_step(e: Tensor, h_prev: Tensor, subnets: SubnetSet) -> tuple[Tensor, Tensor]:
    """Single-gated update: as :func:`dru_step` without the reset gate."""
    g = gate_tensors(e, subnets, use_reset=False)
    h = _blend(g["z"], h_prev, g["h_hat"])
    return subnets.f_s(h), h


class RecurrentUNet(Module):
    """U-Net with a DRU/SRU replacing every layer at or below ``level``, plus mask feedback."""

    def __init__(self, ucfg: UNetConfig, rcfg: RecurrenceConfig):
        super().__init__()
        if rcfg.variant not in ("sru", "dru"):
            raise InvalidConfigError(f"RecurrentUNet needs variant sru or dru, got {rcfg.variant!r}")
        if not 0 <= rcfg.level <= ucfg.depth:
            raise InvalidConfigError(f"level {rcfg.level} outside 0..{ucfg.depth}")
        self.ucfg, self.rcfg = ucfg, rcfg
        sched = ucfg.schedule
        level = rcfg.level
        self.level = level
        self.image_channels = ucfg.in_channels
        in_ch = ucfg.in_channels + 1
        self.outer_enc = Encoder(in_ch, sched, 0, level, ucfg.norm)
        self.gate = SubnetSet(self.outer_enc.out_channels, sched, level, ucfg.norm,
                              dual=rcfg.variant == "dru")
        self.outer_dec = Decoder(sched, 0, level, ucfg.norm)
        self.head = SegmentationHead(sched[0], ucfg.out_classes)

    @property
    def hidden_channels(self) -> int:
        return self.gate.hidden_channels

    def initial_state(self, x: Tensor) -> RecurrentState:
        return RecurrentState(
            s=F.fill_like(x, 1, self.rcfg.s0_init),
            h=F.fill_like(x, self.hidden_channels, self.rcfg.h0_init, scale=2 ** self.level),
        )

    def step(self, x: Tensor, state: RecurrentState) -> tuple[Tensor, RecurrentState]:
        acts = self.outer_enc(F.concat_channels(x, state.s))
        step_fn = dru_step if self.gate.dual else sru_step
        d, h = step_fn(acts.bottom, state.h, self.gate)
        logits = self.head(self.outer_dec(d, acts.skips))
        return logits, RecurrentState(F.softmax_foreground(logits), h)

    def forward(self, x: Tensor, return_states: bool = False):
        _check_image(x, self.image_channels, 2 ** self.ucfg.depth)
        state = self.initial_state(x)
        outputs, states = [], [state]
        for _ in range(self.rcfg.steps):
            logits, state = self.step(x, state)
            outputs.append(logits)
            states.append(state)
        return (outputs, states) if return_states else outputs


def runet_forward(model: RecurrentUNet, x: Tensor) -> list[Tensor]:
    return model(x)


class RecSimple(Module):
    """Plain U-Net applied repeatedly to ``concat(image, s_{t-1})``; no hidden tensor."""

    def __init__(self, ucfg: UNetConfig, rcfg: RecurrenceConfig):
        super().__init__()
        self.rcfg = rcfg
        self.image_channels = ucfg.in_channels
        self.depth = ucfg.depth
        inner = UNetConfig(ucfg.in_channels + 1, ucfg.base_channels, ucfg.depth, ucfg.norm,
                           ucfg.out_classes)
        self.unet = UNet(inner)

    def forward(self, x: Tensor, return_states: bool = False):
        _check_image(x, self.image_channels, 2 ** self.depth)
        s = F.fill_like(x, 1, self.rcfg.s0_init)
        outputs, masks = [], [s]
        for _ in range(self.rcfg.steps):
            logits = self.unet.logits(F.concat_channels(x, s))
            s = F.softmax_foreground(logits)
            outputs.append(logits)
            masks.append(s)
        return (outputs, masks) if return_states else outputs


class ConvGRUCell(Module):
    """Convolutional GRU with single 3x3 convolutions over ``concat(x, h)``.

    Uses the same blend convention as the gated U-Net units: ``z -> 1`` keeps
    the previous hidden state.
    """

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.hidden_channels = hidden_channels
        c = in_channels + hidden_channels
        self.conv_z = Conv2d(c, hidden_channels, 3)
        self.conv_r = Conv2d(c, hidden_channels, 3)
        self.conv_h = Conv2d(c, hidden_channels, 3)
        self.preact_offsets: dict[str, float] = {}

    def _gate(self, key: str, conv: Conv2d, xh: Tensor) -> Tensor:
        pre = conv(xh)
        offset = self.preact_offsets.get(key)
        if offset is not None:
            pre = pre + offset
        return F.sigmoid(pre)

    def forward(self, x: Tensor, h_prev: Tensor) -> Tensor:
        xh = F.concat_channels(x, h_prev)
        z = self._gate("z", self.conv_z, xh)
        r = self._gate("r", self.conv_r, xh)
        h_hat = F.tanh(self.conv_h(F.concat_channels(x, r * h_prev)))
        return _blend(z, h_prev, h_hat)


class RecMid(Module):
    """U-Net whose bottleneck block is replaced by a ConvGRU; same image every step."""

    def __init__(self, ucfg: UNetConfig, rcfg: RecurrenceConfig):
        super().__init__()
        self.rcfg = rcfg
        self.image_channels = ucfg.in_channels
        sched = ucfg.schedule
        self.depth = ucfg.depth
        self.enc = Encoder(ucfg.in_channels, sched, 0, ucfg.depth, ucfg.norm)
        self.cell = ConvGRUCell(self.enc.out_channels, sched[ucfg.depth])
        self.dec = Decoder(sched, 0, ucfg.depth, ucfg.norm)
        self.head = SegmentationHead(sched[0], ucfg.out_classes)

    @property
    def hidden_channels(self) -> int:
        return self.cell.hidden_channels

    def forward(self, x: Tensor, return_states: bool = False):
        _check_image(x, self.image_channels, 2 ** self.depth)
        acts = self.enc(x)  # identical input at every step: encode once
        h = F.fill_like(x, self.hidden_channels, self.rcfg.h0_init, scale=2 ** self.depth)
        outputs, hiddens = [], [h]
        for _ in range(self.rcfg.steps):
            h = self.cell(acts.bottom, h)
            outputs.append(self.head(self.dec(h, acts.skips)))
            hiddens.append(h)
        return (outputs, hiddens) if return_states else outputs


class RecLast(Module):
    """ConvGRU appended after the U-Net decoder, feeding the classification head."""

    def __init__(self, ucfg: UNetConfig, rcfg: RecurrenceConfig):
        super().__init__()
        self.rcfg = rcfg
        self.image_channels = ucfg.in_channels
        sched = ucfg.schedule
        self.depth = ucfg.depth
        self.body = EncoderDecoder(ucfg.in_channels, sched, 0, ucfg.norm)
        self.cell = ConvGRUCell(sched[0], sched[0])
        self.head = SegmentationHead(sched[0], ucfg.out_classes)

    @property
    def hidden_channels(self) -> int:
        return self.cell.hidden_channels

    def forward(self, x: Tensor, return_states: bool = False):
        _check_image(x, self.image_channels, 2 ** self.depth)
        d = self.body(x)
        h = F.fill_like(x, self.hidden_channels, self.rcfg.h0_init)
        outputs, hiddens = [], [h]
        for _ in range(self.rcfg.steps):
            h = self.cell(d, h)
            outputs.append(self.head(h))
            hiddens.append(h)
        return (outputs, hiddens) if return_states else outputs


def _check_image(x: Tensor, channels: int, scale: int) -> None:
    _check_divisible(x, scale)
    if x.shape[1] != channels:
        raise InvalidShapeError(f"expected {channels} image channels, got {x.shape[1]}")


def subnet_parameter_count(unit: SubnetSet, name: str) -> int:
    sub: Optional[Module] = getattr(unit, name)
    return 0 if sub is None else sub.num_parameters()


__all__ = [
    "RecurrenceConfig", "RecurrentState", "SubnetSet", "GateSubnet", "gate_tensors",
    "dru_step", "sru_step", "RecurrentUNet", "runet_forward", "RecSimple", "RecMid",
    "RecLast", "ConvGRUCell", "channel_schedule",
]

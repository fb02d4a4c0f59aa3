"""Declarative model descriptions and the factory for all seven architectures."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import InvalidConfigError
from .nn import Module
from .recurrent import RecLast, RecMid, RecSimple, RecurrenceConfig, RecurrentUNet
from .unet import UNet, UNetConfig

MODEL_NAMES = ("unet-b", "unet-g", "rec-last", "rec-mid", "rec-simple", "runet-sru", "runet-dru")

_RECURRENCE = {
    "unet-b": "none",
    "unet-g": "none",
    "rec-last": "rec_last",
    "rec-mid": "rec_mid",
    "rec-simple": "rec_simple",
    "runet-sru": "sru",
    "runet-dru": "dru",
}


@dataclass
class ModelSpec:
    model: str = "runet-sru"
    level: int = 0
    steps: int = 3
    s0_init: float = 1.0
    h0_init: float = 1.0
    base_channels: int = 8
    depth: int = 4
    image_channels: int = 3

    def __post_init__(self):
        if self.model not in MODEL_NAMES:
            raise InvalidConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODEL_NAMES)}")
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")

    @property
    def norm(self) -> str:
        return "batch" if self.model == "unet-b" else "group"

    @property
    def recurrent(self) -> bool:
        return _RECURRENCE[self.model] != "none"

    @property
    def num_steps(self) -> int:
        return self.steps if self.recurrent else 1

    def unet_config(self) -> UNetConfig:
        return UNetConfig(self.image_channels, self.base_channels, self.depth, self.norm, 2)

    def recurrence_config(self, alpha: float = 0.4) -> RecurrenceConfig:
        return RecurrenceConfig(_RECURRENCE[self.model], self.level, self.num_steps,
                                self.s0_init, self.h0_init, alpha, self.depth)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfigError(f"unknown model spec keys: {sorted(unknown)}")
        return cls(**d)

    def label(self) -> str:
        return f"{self.model}({self.level})" if self.model.startswith("runet") else self.model


def build_model(spec: ModelSpec) -> Module:
    """Instantiate the architecture named by ``spec``; every model maps an image
    batch to a list of per-step logits (length 1 for the one-shot U-Nets)."""
    ucfg = spec.unet_config()
    rcfg = spec.recurrence_config()
    if spec.model in ("unet-b", "unet-g"):
        model = UNet(ucfg)
    elif spec.model == "rec-simple":
        model = RecSimple(ucfg, rcfg)
    elif spec.model == "rec-mid":
        model = RecMid(ucfg, rcfg)
    elif spec.model == "rec-last":
        model = RecLast(ucfg, rcfg)
    else:
        model = RecurrentUNet(ucfg, rcfg)
    model.assign_names()
    object.__setattr__(model, "spec", spec)
    return model

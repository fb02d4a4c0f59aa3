"""Minimal module system: parameter registration, hierarchical names, layers."""
from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .errors import InvalidConfigError
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Container that registers Parameters and child Modules set as attributes."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, child in self._children.items():
            yield from child.named_modules(prefix + name + ".")

    def assign_names(self) -> None:
        """Stamp every parameter with its hierarchical name (e.g. ``enc.0.conv1.weight``)."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise InvalidConfigError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state arrays (batch-norm running statistics)."""
        out = {}
        for name, m in self.named_modules():
            if isinstance(m, BatchNorm2d):
                out[f"{name}.running_mean"] = m.running.mean
                out[f"{name}.running_var"] = m.running.var
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = self.buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise InvalidConfigError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != arr.shape:
                raise InvalidConfigError(f"{name}: shape {arr.shape} != {target.shape}")
            if name in params:
                params[name].data = np.array(arr, dtype=arr.dtype)
            else:
                target[...] = arr

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for arr_owner in (m for _, m in self.named_modules() if isinstance(m, BatchNorm2d)):
            arr_owner.running.mean = arr_owner.running.mean.astype(dtype)
            arr_owner.running.var = arr_owner.running.var.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __getitem__(self, i) -> Module:
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding: Optional[int] = None, stride: int = 1):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size ** 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(Module):
    """Learnable x``stride`` upsampler; kernel size equals the stride."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        self.weight = Parameter(np.zeros((in_channels, out_channels, stride, stride)))
        self.bias = Parameter(np.zeros(out_channels))

    @property
    def fan_in(self) -> int:
        # each output pixel receives exactly one kernel tap per input channel
        return self.in_channels

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


def norm_groups(channels: int) -> int:
    return min(4, channels)


class GroupNorm(Module):
    def __init__(self, channels: int, num_groups: Optional[int] = None, eps: float = 1e-5):
        super().__init__()
        self.num_groups = norm_groups(channels) if num_groups is None else num_groups
        if channels % self.num_groups:
            raise InvalidConfigError(f"{channels} channels not divisible into {self.num_groups} groups")
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.num_groups, self.weight, self.bias, self.eps)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.running = F.RunningStats(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running, self.training,
                            momentum=self.momentum, eps=self.eps)


def make_norm(kind: str, channels: int) -> Module:
    if kind == "group":
        return GroupNorm(channels)
    if kind == "batch":
        return BatchNorm2d(channels)
    raise InvalidConfigError(f"unknown normalization {kind!r}")


class ConvBlock(Module):
    """``layers`` repetitions of 3x3 conv + norm + ReLU (two in a U-Net block)."""

    def __init__(self, in_channels: int, out_channels: int, norm: str = "group", layers: int = 2):
        super().__init__()
        self.out_channels = out_channels
        self.n_layers = layers
        c = in_channels
        for i in range(1, layers + 1):
            setattr(self, f"conv{i}", Conv2d(c, out_channels, 3))
            setattr(self, f"norm{i}", make_norm(norm, out_channels))
            c = out_channels

    def forward(self, x: Tensor) -> Tensor:
        for i in range(1, self.n_layers + 1):
            x = getattr(self, f"conv{i}")(x)
            x = getattr(self, f"norm{i}")(x)
            x = F.relu(x)
        return x

"""Central finite differences as an independent oracle for the tape gradients."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import functional as F
from .nn import Module
from .tensor import Parameter, Tensor, backward, no_grad

EPS = 1e-3
TOLERANCE = 1e-4
NORM_FLOOR = 1e-6


def finite_diff_grad(f: Callable[[], float], param: Tensor, eps: float = EPS,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """``(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`` for each flat index i.

    ``f`` re-evaluates the scalar objective from the current contents of
    ``param.data``; entries outside ``indices`` (when given) are left at 0.
    """
    if not param.data.flags.c_contiguous or not param.data.flags.writeable:
        param.data = np.array(param.data, order="C")
    flat = param.data.reshape(-1)  # view: edits show through to f
    grad = np.zeros(flat.shape, dtype=np.float64)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NORM_FLOOR) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that vanish identically (a conv bias feeding
    batch normalization) from turning round-off into a large ratio.
    """
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / den)


def param_family(module: Module, param_name: str) -> str:
    return f"{type(module).__name__}.{param_name}"


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)  # per family
    worst_param: dict[str, str] = field(default_factory=dict)
    sampled: dict[str, int] = field(default_factory=dict)
    skipped_kinks: dict[str, int] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_family(self) -> str:
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def check_model_gradients(model: Module, loss_fn: Callable[[Module], Tensor], rng: np.random.Generator,
                          per_family: int = 200, eps: float = EPS,
                          tolerance: float = TOLERANCE) -> GradcheckReport:
    """Compare backward() against central differences on a random parameter subsample.

    Parameters are grouped into families by owning layer type and parameter
    role (``Conv2d.weight``, ``GroupNorm.bias``, ...).  Up to ``per_family``
    entries are drawn uniformly from each family; the family's error is the
    norm-wise relative error over its sampled entries.

    A central difference is only meaningful where the loss is smooth on
    ``[p - eps, p + eps]``.  Entries whose perturbation flips a ReLU sign or a
    max-pool argmax anywhere in the network are therefore redrawn (counted in
    ``skipped_kinks``).  The model must be in float64.
    """
    model.zero_grad()
    backward(loss_fn(model))

    families: dict[str, list[tuple[Parameter, int]]] = defaultdict(list)
    for _, module in model.named_modules():
        for pname, p in module._params.items():
            families[param_family(module, pname)].extend((p, i) for i in range(p.size))

    def evaluate() -> tuple[float, list]:
        branches: list = []
        F.record_branches(branches)
        try:
            with no_grad():
                return loss_fn(model).item(), branches
        finally:
            F.record_branches(None)

    _, center = evaluate()
    report = GradcheckReport(tolerance=tolerance)
    for fam in sorted(families):
        entries = families[fam]
        analytic, numeric, owners = [], [], []
        skipped = 0
        for k in rng.permutation(len(entries)):
            if len(analytic) == per_family:
                break
            p, i = entries[k]
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            up, up_b = evaluate()
            flat[i] = orig - eps
            down, down_b = evaluate()
            flat[i] = orig
            if up_b != center or down_b != center:
                skipped += 1
                continue
            analytic.append(p.grad.reshape(-1)[i])
            numeric.append((up - down) / (2 * eps))
            owners.append(p.name)
        a, n = np.array(analytic), np.array(numeric)
        report.errors[fam] = relative_error(a, n)
        report.worst_param[fam] = owners[int(np.argmax(np.abs(a - n)))] if owners else ""
        report.sampled[fam] = len(analytic)
        report.skipped_kinks[fam] = skipped
    model.zero_grad()
    return report

"""Multi-step loss, optimizer, initialization, augmentation and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import functional as F
from .checkpoint import checkpoint_from_model, save_checkpoint
from .data import SamplePair
from .errors import ContractViolation, DivergenceError, InvalidConfigError, InvalidDataError
from .metrics import ConfusionCounts, ImageMetrics, MetricsReport, binarize, mean_metrics
from .models import ModelSpec, build_model
from .nn import Conv2d, ConvTranspose2d, Module
from .tensor import Parameter, Tensor, backward, no_grad

log = logging.getLogger(__name__)

LR_RANGE = (1e-9, 1e-3)
LOG_HEADER = ["epoch", "split", "loss", "miou", "lr", "seconds"]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    clip_threshold: float = 10.0
    alpha: float = 0.4
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if not LR_RANGE[0] <= self.lr <= LR_RANGE[1]:
            raise InvalidConfigError(f"lr {self.lr} outside the supported range {LR_RANGE}")
        if not 0 < self.alpha <= 1:
            raise InvalidConfigError("alpha must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch_size must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must lie in [0, 1)")


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def step_weights(n: int, alpha: float) -> list[float]:
    """``alpha ** (n - t)`` for t = 1..n; the last step always weighs 1.

    Powers are taken exactly on alpha's shortest decimal form and rounded
    once, so ``step_weights(3, 0.4)`` is ``[0.16, 0.4, 1.0]`` rather than
    carrying the float error of ``0.4 ** 2``.
    """
    if n < 1:
        raise InvalidConfigError("number of steps must be >= 1")
    if not 0 < alpha <= 1:
        raise InvalidConfigError(f"alpha must lie in (0, 1], got {alpha}")
    a = Fraction(repr(float(alpha)))
    return [float(a ** (n - t)) for t in range(1, n + 1)]


@dataclass
class LossReport:
    total: float
    per_step: list[float]
    weights: list[float]


def multi_step_loss(logits_seq: Sequence[Tensor], target, alpha: float) -> tuple[Tensor, LossReport]:
    """Weighted sum of the per-step mean pixelwise cross-entropies."""
    if not logits_seq:
        raise InvalidDataError("logits sequence is empty")
    weights = step_weights(len(logits_seq), alpha)
    terms = [F.cross_entropy(logits, target) for logits in logits_seq]
    total = terms[0] * weights[0]
    for w, term in zip(weights[1:], terms[1:]):
        total = total + term * w
    report = LossReport(total.item(), [t.item() for t in terms], weights)
    return total, report


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def clip_gradients(params: Iterable[Parameter], threshold: float = 10.0) -> float:
    """Rescale all gradients so their global L2 norm is at most ``threshold``.

    Returns the scale applied (1.0 when no clipping happened).
    """
    params = [p for p in params if p.grad is not None]
    sq = math.fsum(float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel())) for p in params)
    norm = math.sqrt(sq)
    if norm <= threshold or norm == 0.0:
        return 1.0
    scale = threshold / norm
    for p in params:
        p.grad = p.grad * p.grad.dtype.type(scale)
    return scale


def sgd_momentum_step(named_params, velocity: dict, lr: float, momentum: float = 0.9) -> None:
    """In-place heavy-ball update ``v = m * v + g; p -= lr * v`` over ``(name, param)`` pairs."""
    named_params = list(named_params)
    missing = [n for n, p in named_params if p.grad is None]
    if missing:
        raise ContractViolation(f"no gradient for {len(missing)} parameters, e.g. {missing[0]}")
    for name, p in named_params:
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += p.grad
        p.data = p.data - p.data.dtype.type(lr) * v


class SGD:
    def __init__(self, named_params, lr: float, momentum: float = 0.9):
        self.params: list[tuple[str, Parameter]] = [(n, p) for n, p in named_params if p.trainable]
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self) -> None:
        sgd_momentum_step(self.params, self.velocity, self.lr, self.momentum)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def he_init(model: Module, seed: int) -> Module:
    """Zero-mean normal conv weights with variance 2 / fan_in; zero biases."""
    rng = np.random.default_rng(seed)
    for _, m in model.named_modules():
        if isinstance(m, (Conv2d, ConvTranspose2d)):
            std = math.sqrt(2.0 / m.fan_in)
            m.weight.data = rng.normal(0.0, std, size=m.weight.shape).astype(m.weight.dtype)
            m.bias.data = np.zeros_like(m.bias.data)
    return model


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

MAX_ROTATION_DEG = 10.0


def augment_pair(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                 angle: Optional[float] = None, flip: Optional[bool] = None):
    """Random rotation in [-10, 10] degrees then a horizontal flip with p = 0.5.

    Both arrays get the identical transform; the mask is re-binarized at 0.5
    and rotated-in corners are filled with 0.  ``angle``/``flip`` force a
    specific transform.
    """
    if image.shape[1:] != mask.shape[1:]:
        raise InvalidDataError("image and mask sizes differ")
    if angle is None:
        angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    if flip is None:
        flip = bool(rng.random() < 0.5)
    img, msk = image, mask
    if angle != 0.0:
        img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        msk = ndimage.rotate(msk.astype(np.float64), angle, axes=(2, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
        msk = (msk >= 0.5).astype(mask.dtype)
        img = img.astype(image.dtype)
    if flip:
        img = img[:, :, ::-1]
        msk = msk[:, :, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def stack_batch(samples: Sequence[SamplePair], dtype=np.float32) -> tuple[Tensor, np.ndarray]:
    x = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    y = np.stack([s.mask for s in samples])
    return Tensor(x), y


def predict_probabilities(model: Module, samples: Sequence[SamplePair], batch_size: int = 8) -> list[list[np.ndarray]]:
    """Foreground probability maps per step: ``out[t][i]`` is (H,W) for sample i."""
    model.eval()
    dtype = model.parameters()[0].dtype
    per_step: list[list[np.ndarray]] = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, _ = stack_batch(samples[i:i + batch_size], dtype)
            for t, logits in enumerate(model(x)):
                if len(per_step) <= t:
                    per_step.append([])
                per_step[t].extend(F.softmax_foreground(logits).data[:, 0])
    model.train()
    return per_step


def evaluate(model: Module, samples: Sequence[SamplePair], batch_size: int = 8) -> list[MetricsReport]:
    """One metrics report per recurrent step (final step last)."""
    if not samples:
        raise InvalidDataError("cannot evaluate on an empty sample list")
    reports = []
    for probs in predict_probabilities(model, samples, batch_size):
        per = [ImageMetrics.from_counts(s.id, ConfusionCounts.from_masks(binarize(p), s.mask[0]))
               for s, p in zip(samples, probs)]
        reports.append(mean_metrics(per))
    return reports


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Module
    optimizer: SGD
    history: list[dict] = field(default_factory=list)
    best_miou: float = -1.0
    best_epoch: int = 0
    final_loss: float = float("nan")


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, index])


def _batch_counts(logits: Tensor, y: np.ndarray) -> list[float]:
    probs = F.softmax_foreground(logits).data[:, 0]
    return [ImageMetrics.from_counts("", ConfusionCounts.from_masks(binarize(p), m[0])).iou
            for p, m in zip(probs, y)]


def train(spec: ModelSpec, cfg: TrainConfig, train_set: Sequence[SamplePair],
          val_set: Optional[Sequence[SamplePair]] = None, out_dir: Optional[Path] = None,
          on_epoch: Optional[Callable[[dict], bool]] = None, model: Optional[Module] = None) -> TrainResult:
    """Train ``spec`` on ``train_set``.

    Each epoch shuffles, augments, runs forward/multi-step loss/backward,
    clips gradients (recurrent models) and takes an SGD step.  With
    ``out_dir`` a CSV log ``train_log.csv``, ``last.ckpt`` and the best
    validation checkpoint ``best.ckpt`` are written.  ``on_epoch`` receives
    each validation row and may return True to stop early.
    """
    if not train_set:
        raise InvalidDataError("training set is empty")
    if model is None:
        model = he_init(build_model(spec), cfg.seed)
    opt = SGD(model.named_parameters(), cfg.lr, cfg.momentum)
    result = TrainResult(model, opt)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            losses, ious = [], []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = []
                for i in idx:
                    s = train_set[i]
                    if cfg.augment:
                        img, msk = augment_pair(s.image, s.mask, _sample_rng(cfg.seed, epoch, int(i)))
                        s = SamplePair(img, msk, s.id)
                    batch.append(s)
                x, y = stack_batch(batch, model.parameters()[0].dtype)
                logits_seq = model(x)
                loss, _ = multi_step_loss(logits_seq, y, cfg.alpha)
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss {value} at epoch {epoch}, batch {start // cfg.batch_size}")
                backward(loss)
                if spec.recurrent:
                    clip_gradients(model.parameters(), cfg.clip_threshold)
                opt.step()
                opt.zero_grad()
                losses.append(value)
                ious.extend(_batch_counts(logits_seq[-1], y))
            train_row = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
                         "miou": float(np.mean(ious)), "lr": cfg.lr,
                         "seconds": time.perf_counter() - t0}
            result.history.append(train_row)
            result.final_loss = train_row["loss"]
            rows = [train_row]
            stop = False
            if val_set:
                t1 = time.perf_counter()
                val_loss, val_miou = validation_pass(model, val_set, cfg.alpha)
                val_row = {"epoch": epoch, "split": "val", "loss": val_loss, "miou": val_miou,
                           "lr": cfg.lr, "seconds": time.perf_counter() - t1}
                result.history.append(val_row)
                rows.append(val_row)
                if val_miou > result.best_miou:
                    result.best_miou, result.best_epoch = val_miou, epoch
                    if out_dir is not None:
                        save_checkpoint(out_dir / "best.ckpt", checkpoint_from_model(
                            model, opt.velocity, epoch, val_miou, {"alpha": cfg.alpha}))
                if on_epoch is not None:
                    stop = bool(on_epoch(val_row))
            log.info("epoch %d: loss %.4f train mIoU %.4f%s", epoch, train_row["loss"], train_row["miou"],
                     f" val mIoU {rows[-1]['miou']:.4f}" if val_set else "")
            if writer is not None:
                for r in rows:
                    writer.writerow([r["epoch"], r["split"], f"{r['loss']:.8f}", f"{r['miou']:.6f}",
                                     f"{r['lr']:g}", f"{r['seconds']:.3f}"])
                log_fh.flush()
            if stop:
                break
        if out_dir is not None:
            save_checkpoint(out_dir / "last.ckpt", checkpoint_from_model(
                model, opt.velocity, epoch, max(result.best_miou, 0.0), {"alpha": cfg.alpha}))
    finally:
        if writer is not None:
            log_fh.close()
    return result


def validation_pass(model: Module, samples: Sequence[SamplePair], alpha: float,
                    batch_size: int = 8) -> tuple[float, float]:
    """Mean multi-step loss and final-step mIoU on ``samples`` (eval mode, no augmentation)."""
    model.eval()
    dtype = model.parameters()[0].dtype
    losses, ious = [], []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = stack_batch(samples[i:i + batch_size], dtype)
            logits_seq = model(x)
            _, rep = multi_step_loss(logits_seq, y, alpha)
            losses.append(rep.total * len(y))
            ious.extend(_batch_counts(logits_seq[-1], y))
    model.train()
    return float(sum(losses) / len(samples)), float(np.mean(ious))

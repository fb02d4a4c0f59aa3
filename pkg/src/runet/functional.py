"""Differentiable neural-network primitives on NCHW tensors.

Convolutions lower to a single matrix product through an im2col view so the
heavy lifting happens inside BLAS.  Each function returns a new
:class:`~runet.tensor.Tensor` and records its vector-Jacobian product.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidConfigError, InvalidDataError, InvalidShapeError
from .tensor import Tensor, as_tensor, make_result


# When a list, piecewise-linear ops append a digest of their active branch
# (ReLU sign pattern, max-pool argmax).  Finite-difference checks compare
# digests to detect when a perturbation crosses a kink.
_branch_log: Optional[list] = None


def record_branches(log: Optional[list]) -> None:
    global _branch_log
    _branch_log = log


def _log_branch(arr: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(hash(np.packbits(arr).tobytes()) if arr.dtype == bool else hash(arr.tobytes()))


def _require_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise InvalidShapeError(f"{what} expects a 4-d NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,Cin,H,W) with ``weight`` (Cout,Cin,kh,kw)."""
    _require_4d(x, "conv2d")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if C != Ci:
        raise InvalidShapeError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if bias is not None and bias.shape != (O,):
        raise InvalidShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise InvalidShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    s = stride
    Ho, Wo = (Hp - kh) // s + 1, (Wp - kw) // s + 1

    # channel-last im2col: each window row is (kh, kw, C) with C contiguous
    xp = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wm = weight.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = None
        if weight.requires_grad:
            gw = (gm.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            wk = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))  # (kh, kw, O, C)
            dxp = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + s * Ho:s, j:j + s * Wo:s] += (gm @ wk[i, j]).reshape(B, Ho, Wo, C)
            gx = dxp[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        gb = gm.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result("conv2d", out, inputs, vjp)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 2) -> Tensor:
    """Transposed convolution without padding; ``weight`` is (Cin,Cout,kh,kw).

    Output extent is ``(H - 1) * stride + kh``, i.e. ``stride * H`` when the
    kernel equals the stride.
    """
    _require_4d(x, "conv_transpose2d")
    B, C, H, W = x.shape
    Ci, O, kh, kw = weight.shape
    if C != Ci:
        raise InvalidShapeError(f"conv_transpose2d: input has {C} channels, weight expects {Ci}")
    if bias is not None and bias.shape != (O,):
        raise InvalidShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({O},)")
    s = stride
    Ho, Wo = (H - 1) * s + kh, (W - 1) * s + kw
    tiled = kh == s and kw == s

    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wm = weight.data.reshape(C, -1)
    cols = (xm @ wm).reshape(B, H, W, O, kh, kw)
    if tiled:
        out = cols.transpose(0, 3, 1, 4, 2, 5).reshape(B, O, Ho, Wo)
    else:
        out = np.zeros((B, O, Ho, Wo), dtype=cols.dtype)
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + s * H:s, j:j + s * W:s] += cols[..., i, j].transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, O, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        if tiled:
            gcols = g.reshape(B, O, H, kh, W, kw).transpose(0, 2, 4, 1, 3, 5)
        else:
            gcols = np.empty((B, H, W, O, kh, kw), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gcols[..., i, j] = g[:, :, i:i + s * H:s, j:j + s * W:s].transpose(0, 2, 3, 1)
        gcols = gcols.reshape(B * H * W, O * kh * kw)
        gw = (xm.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        gx = (gcols @ wm.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result("conv_transpose2d", out, inputs, vjp)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first maximum in row-major order."""
    _require_4d(x, "max_pool2d")
    if window != stride:
        raise InvalidConfigError("max_pool2d supports window == stride only")
    B, C, H, W = x.shape
    k = window
    if H % k or W % k:
        raise InvalidShapeError(f"max_pool2d: spatial dims {H}x{W} not divisible by {k}")
    Ho, Wo = H // k, W // k
    blocks = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    _log_branch(idx.astype(np.uint8))
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return make_result("max_pool2d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _normalized_vjp(g, xhat, inv_std, gamma, reduce_axes, group_view):
    """Shared backward of (x - mean) * inv_std followed by a per-channel affine."""
    gamma_b = gamma.data.reshape(1, -1, 1, 1)
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gbeta = g.sum(axis=(0, 2, 3))
    dxhat = group_view(g * gamma_b)
    xh = group_view(xhat)
    dx = inv_std * (dxhat - dxhat.mean(axis=reduce_axes, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=reduce_axes, keepdims=True))
    return dx, ggamma, gbeta


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _require_4d(x, "group_norm")
    B, C, H, W = x.shape
    if num_groups < 1 or C % num_groups:
        raise InvalidConfigError(f"group_norm: {C} channels not divisible into {num_groups} groups")
    G = num_groups
    xg = x.data.reshape(B, G, -1)
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(B, C, H, W)
    out = xhat * gamma.data.reshape(1, C, 1, 1) + beta.data.reshape(1, C, 1, 1)

    def vjp(g):
        dx, gg, gb = _normalized_vjp(g, xhat, inv_std, gamma, 2, lambda a: a.reshape(B, G, -1))
        return dx.reshape(B, C, H, W), gg, gb

    return make_result("group_norm", out, (x, gamma, beta), vjp)


class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running: RunningStats, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    _require_4d(x, "batch_norm")
    B, C, H, W = x.shape
    g_b = gamma.data.reshape(1, C, 1, 1)
    b_b = beta.data.reshape(1, C, 1, 1)
    if not training:
        inv_std = (1.0 / np.sqrt(running.var + eps)).astype(x.dtype).reshape(1, C, 1, 1)
        xhat = (x.data - running.mean.astype(x.dtype).reshape(1, C, 1, 1)) * inv_std
        out = xhat * g_b + b_b

        def vjp_eval(g):
            return g * g_b * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result("batch_norm", out, (x, gamma, beta), vjp_eval)

    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * g_b + b_b

    n = B * H * W
    unbiased = var.reshape(C) * (n / max(n - 1, 1))
    running.mean[...] = (1 - momentum) * running.mean + momentum * mean.reshape(C)
    running.var[...] = (1 - momentum) * running.var + momentum * unbiased

    def vjp(g):
        return _normalized_vjp(g, xhat, inv_std, gamma, (0, 2, 3), lambda a: a)

    return make_result("batch_norm", out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return make_result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise InvalidConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise InvalidShapeError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    b_data = b.data if b.dtype == a.dtype else b.data.astype(a.dtype)
    out = np.concatenate([a.data, b_data], axis=1)
    return make_result("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def fill_like(x: Tensor, channels: int, value: float, scale: int = 1) -> Tensor:
    """Constant (B, channels, H/scale, W/scale) tensor matching ``x``'s batch and dtype."""
    B, _, H, W = x.shape
    return Tensor(np.full((B, channels, H // scale, W // scale), value, dtype=x.dtype))


# ---------------------------------------------------------------------------
# classification head helpers
# ---------------------------------------------------------------------------

def softmax_foreground(logits: Tensor) -> Tensor:
    """Probability of class 1 under a 2-way channel softmax, shape (B,1,H,W)."""
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise InvalidShapeError(f"expected (B,2,H,W) logits, got {logits.shape}")
    diff = logits.data[:, 1:2] - logits.data[:, 0:1]
    p = 0.5 * (1.0 + np.tanh(0.5 * diff))

    def vjp(g):
        d = g * p * (1.0 - p)
        return (np.concatenate([-d, d], axis=1),)

    return make_result("softmax_foreground", p, (logits,), vjp)


def _as_class_indices(target, shape) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    B, _, H, W = shape
    if t.ndim == 4 and t.shape[1] == 1:
        t = t[:, 0]
    if t.shape != (B, H, W):
        raise InvalidShapeError(f"target shape {t.shape} does not match logits {shape}")
    if not np.all((t == 0) | (t == 1)):
        raise InvalidDataError("segmentation target must be binary (values 0 or 1)")
    return t.astype(np.intp)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean pixelwise softmax cross-entropy of (B,K,H,W) logits against class indices."""
    _require_4d(logits, "cross_entropy")
    idx = _as_class_indices(target, logits.shape)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    ssum = e.sum(axis=1, keepdims=True)
    logp = z - m - np.log(ssum)
    picked = np.take_along_axis(logp, idx[:, None], axis=1)
    n = idx.size
    loss = np.asarray(-picked.sum() / n, dtype=z.dtype)

    def vjp(g):
        grad = e / ssum
        np.put_along_axis(grad, idx[:, None], np.take_along_axis(grad, idx[:, None], axis=1) - 1.0, axis=1)
        return (grad * (g / n),)

    return make_result("cross_entropy", loss, (logits,), vjp)


__all__ = [
    "conv2d", "conv_transpose2d", "max_pool2d", "group_norm", "batch_norm", "RunningStats",
    "relu", "sigmoid", "tanh", "activation", "concat_channels", "fill_like",
    "softmax_foreground", "cross_entropy", "as_tensor",
]

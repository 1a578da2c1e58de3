"""Differentiable layer primitives on NCHW tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _shift(d: int, n: int) -> tuple[slice, slice]:
    """(dst, src) slices realising ``dst[p] = src[p + d]`` inside ``[0, n)``."""
    return (slice(0, n - d), slice(d, n)) if d >= 0 else (slice(-d, n), slice(0, n + d))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """k x k convolution (k odd, normally 3) with same-size zero padding.

    Cross-correlation, as is usual for CNNs. The input is multiplied by all
    k*k taps in one matrix product and the narrow per-tap results are then
    shifted and summed, so no wide im2col buffer is ever built.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects NCHW input and OIkk weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ConfigurationError(f"conv2d input has {c} channels, weight expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be square and odd, got {kh}x{kw}")
    pad = kh // 2
    taps = [(i - pad, j - pad) for i in range(kh) for j in range(kw)]
    x2d = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    # column block k of wmat holds tap k as a (c, o) matrix
    wmat = weight.data.transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
    per_tap = (x2d @ wmat).reshape(n, h, w, kh * kw, o)
    out = np.zeros((n, h, w, o), dtype=per_tap.dtype)
    for k, (di, dj) in enumerate(taps):
        (ys, yd), (xs, xd) = _shift(di, h), _shift(dj, w)
        out[:, ys, xs, :] += per_tap[:, yd, xd, k, :]
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        g_nhwc = g.transpose(0, 2, 3, 1)
        # shifted[q, k] = g[q - d_k], zero outside the image
        shifted = np.zeros((n, h, w, kh * kw, o), dtype=g.dtype)
        for k, (di, dj) in enumerate(taps):
            (ys, yd), (xs, xd) = _shift(-di, h), _shift(-dj, w)
            shifted[:, ys, xs, k, :] = g_nhwc[:, yd, xd, :]
        shifted = shifted.reshape(n * h * w, kh * kw * o)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (x2d.T @ shifted).reshape(c, kh, kw, o).transpose(3, 0, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = (shifted @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (``running = momentum*running + (1-momentum)*batch``).
    In eval mode the running buffers are used and left untouched.
    """
    x = as_tensor(x)
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigurationError(f"batch_norm has {scale.shape[0]} channels, input has {c}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    m = x.size // c

    def backward(g):
        gscale = (g * xhat).sum(axis=axes) if scale.requires_grad else None
        gshift = g.sum(axis=axes) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data.reshape(bshape)
            if training:
                s1 = gxhat.sum(axis=axes).reshape(bshape)
                s2 = (gxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv_std.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gscale, gshift

    return Tensor.from_op(out, (x, scale, shift), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradients are split back by slice."""
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels: {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward)


def add_residual(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ConfigurationError(f"add_residual shape mismatch {a.shape} vs {b.shape}")
    return Tensor.from_op(a.data + b.data, (a, b), lambda g: (g, g))


@dataclass
class LayerParams:
    """One convolutional layer: 3x3 conv, optional BN, optional ReLU.

    BN running statistics are buffers, not trainable parameters.
    """

    weights: Tensor
    bias: Tensor
    bn_scale: Optional[Tensor] = None
    bn_shift: Optional[Tensor] = None
    bn_running_mean: Optional[np.ndarray] = None
    bn_running_var: Optional[np.ndarray] = None
    activation: bool = True

    @classmethod
    def create(cls, in_channels: int, out_channels: int, rng: np.random.Generator,
               batch_norm: bool = True, activation: bool = True, weight_scale: float = 1.0,
               dtype=np.float32) -> "LayerParams":
        fan_in = in_channels * 9
        std = weight_scale * np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(out_channels, in_channels, 3, 3)).astype(dtype)
        layer = cls(weights=Tensor(w, requires_grad=True),
                    bias=Tensor(np.zeros(out_channels, dtype), requires_grad=True),
                    activation=activation)
        if batch_norm:
            layer.bn_scale = Tensor(np.ones(out_channels, dtype), requires_grad=True)
            layer.bn_shift = Tensor(np.zeros(out_channels, dtype), requires_grad=True)
            layer.bn_running_mean = np.zeros(out_channels, dtype)
            layer.bn_running_var = np.ones(out_channels, dtype)
        return layer

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def has_bn(self) -> bool:
        return self.bn_scale is not None

    def parameters(self) -> dict[str, Tensor]:
        params = {"weights": self.weights, "bias": self.bias}
        if self.has_bn:
            params["bn_scale"] = self.bn_scale
            params["bn_shift"] = self.bn_shift
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        if not self.has_bn:
            return {}
        return {"bn_running_mean": self.bn_running_mean, "bn_running_var": self.bn_running_var}

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = conv2d(x, self.weights, self.bias)
        if self.has_bn:
            y = batch_norm(y, self.bn_scale, self.bn_shift, self.bn_running_mean,
                           self.bn_running_var, training)
        if self.activation:
            y = relu(y)
        return y

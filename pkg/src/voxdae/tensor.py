"""Dense 3D layer primitives with analytic backward passes.

Tensors are plain numpy arrays. Volumes are laid out channel-major as
``(C, D, H, W)``; every op also accepts a leading batch axis
``(N, C, D, H, W)`` and returns outputs with the same rank it was given.

Convolutions are lowered to a single matrix product (im2col). The
scatter step (col2im) loops over filter offsets in a fixed order, so all
reductions are deterministic for a given BLAS build.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Raised when a tensor extent does not match what an op expects."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis {axis!r} expected extent {expected}, got {got}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    filter: int
    stride: int
    kind: str = "convolution"  # or "transposed"

    def __post_init__(self):
        if self.filter < 1 or self.stride < 1:
            raise ValueError(f"filter and stride must be >= 1, got f={self.filter} d={self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.kind not in ("convolution", "transposed"):
            raise ValueError(f"unknown conv kind {self.kind!r}")

    def output_edge(self, x: int) -> int:
        """Spatial output extent for an input extent ``x``."""
        f, d = self.filter, self.stride
        if self.kind == "convolution":
            if x < f:
                raise ShapeError("conv3d", "spatial", f">= {f}", x)
            return (x - f) // d + 1
        return (x - 1) * d + f

    def weight_shape(self) -> tuple[int, ...]:
        f = self.filter
        if self.kind == "convolution":
            return (self.out_channels, self.in_channels, f, f, f)
        return (self.in_channels, self.out_channels, f, f, f)


@dataclass
class LayerParams:
    """Weights and bias of one layer (conv, transposed conv or FC)."""

    weight: np.ndarray
    bias: np.ndarray

    def zeros_like(self) -> "LayerParams":
        return LayerParams(np.zeros_like(self.weight), np.zeros_like(self.bias))


def _as_batch(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError("tensor", "rank", f"{rank} or {rank + 1}", x.ndim)


def _check_conv_input(op: str, x: np.ndarray, params: LayerParams, spec: ConvSpec, kind: str):
    if spec.kind != kind:
        raise ValueError(f"{op} requires a {kind} spec, got {spec.kind}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(op, "channels", spec.in_channels, x.shape[1])
    if params.weight.shape != spec.weight_shape():
        raise ShapeError(op, "weight", spec.weight_shape(), params.weight.shape)
    if params.bias.shape != (spec.out_channels,):
        raise ShapeError(op, "bias", (spec.out_channels,), params.bias.shape)
    if kind == "convolution":
        for name, e in zip("DHW", x.shape[2:]):
            if e < spec.filter:
                raise ShapeError(op, name, f">= {spec.filter}", e)


def im2col(x: np.ndarray, f: int, d: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Lower ``(N, C, D, H, W)`` into a ``(C*f^3, N*P)`` column matrix."""
    n, c = x.shape[:2]
    out = tuple((e - f) // d + 1 for e in x.shape[2:])
    win = sliding_window_view(x, (f, f, f), axis=(2, 3, 4))
    win = win[:, :, :: d, :: d, :: d][:, :, : out[0], : out[1], : out[2]]
    # (N, C, oD, oH, oW, f, f, f) -> (C, f, f, f, N, oD, oH, oW)
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(c * f ** 3, n * out[0] * out[1] * out[2])
    return cols, out


def col2im(cols: np.ndarray, n: int, c: int, f: int, d: int, out: tuple[int, int, int],
           full: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into a volume."""
    res = np.zeros((n, c) + tuple(full), dtype=cols.dtype)
    blocks = cols.reshape(c, f, f, f, n, *out)
    od, oh, ow = out
    for a in range(f):
        for b in range(f):
            for e in range(f):
                view = res[:, :, a : a + d * (od - 1) + 1 : d, b : b + d * (oh - 1) + 1 : d,
                           e : e + d * (ow - 1) + 1 : d]
                view += blocks[:, a, b, e].transpose(1, 0, 2, 3, 4)
    return res


def conv3d_forward(x: np.ndarray, params: LayerParams, spec: ConvSpec) -> np.ndarray:
    """Strided valid 3D convolution (cross-correlation), no padding."""
    xb, squeeze = _as_batch(x, 4)
    _check_conv_input("conv3d_forward", xb, params, spec, "convolution")
    cols, out = im2col(xb, spec.filter, spec.stride)
    w = params.weight.reshape(spec.out_channels, -1)
    y = (w @ cols).reshape(spec.out_channels, xb.shape[0], *out)
    y = y.transpose(1, 0, 2, 3, 4) + params.bias[None, :, None, None, None]
    y = np.ascontiguousarray(y)
    return y[0] if squeeze else y


def conv3d_backward(x: np.ndarray, params: LayerParams, spec: ConvSpec, grad_out: np.ndarray,
                    need_input_grad: bool = True) -> tuple[np.ndarray | None, LayerParams]:
    xb, squeeze = _as_batch(x, 4)
    _check_conv_input("conv3d_backward", xb, params, spec, "convolution")
    gb, _ = _as_batch(grad_out, 4)
    n = xb.shape[0]
    out = tuple(spec.output_edge(e) for e in xb.shape[2:])
    if gb.shape != (n, spec.out_channels) + out:
        raise ShapeError("conv3d_backward", "grad_out", (n, spec.out_channels) + out, gb.shape)
    cols, _ = im2col(xb, spec.filter, spec.stride)
    g = gb.transpose(1, 0, 2, 3, 4).reshape(spec.out_channels, -1)
    gw = (g @ cols.T).reshape(params.weight.shape)
    gbias = g.sum(axis=1)
    gx = None
    if need_input_grad:
        w = params.weight.reshape(spec.out_channels, -1)
        gx = col2im(w.T @ g, n, spec.in_channels, spec.filter, spec.stride, out, xb.shape[2:])
        if squeeze:
            gx = gx[0]
    return gx, LayerParams(gw, gbias)


def deconv3d_forward(x: np.ndarray, params: LayerParams, spec: ConvSpec) -> np.ndarray:
    """Transposed 3D convolution: output edge ``(x - 1) * d + f``."""
    xb, squeeze = _as_batch(x, 4)
    _check_conv_input("deconv3d_forward", xb, params, spec, "transposed")
    n = xb.shape[0]
    inp = xb.shape[2:]
    full = tuple(spec.output_edge(e) for e in inp)
    xm = xb.transpose(1, 0, 2, 3, 4).reshape(spec.in_channels, -1)
    w = params.weight.reshape(spec.in_channels, -1)
    y = col2im(w.T @ xm, n, spec.out_channels, spec.filter, spec.stride, inp, full)
    y += params.bias[None, :, None, None, None]
    return y[0] if squeeze else y


def deconv3d_backward(x: np.ndarray, params: LayerParams, spec: ConvSpec, grad_out: np.ndarray,
                      need_input_grad: bool = True) -> tuple[np.ndarray | None, LayerParams]:
    xb, squeeze = _as_batch(x, 4)
    _check_conv_input("deconv3d_backward", xb, params, spec, "transposed")
    gb, _ = _as_batch(grad_out, 4)
    n = xb.shape[0]
    full = tuple(spec.output_edge(e) for e in xb.shape[2:])
    if gb.shape != (n, spec.out_channels) + full:
        raise ShapeError("deconv3d_backward", "grad_out", (n, spec.out_channels) + full, gb.shape)
    cols, _ = im2col(gb, spec.filter, spec.stride)
    xm = xb.transpose(1, 0, 2, 3, 4).reshape(spec.in_channels, -1)
    gw = (xm @ cols.T).reshape(params.weight.shape)
    gbias = gb.sum(axis=(0, 2, 3, 4))
    gx = None
    if need_input_grad:
        w = params.weight.reshape(spec.in_channels, -1)
        gx = (w @ cols).reshape(spec.in_channels, n, *xb.shape[2:]).transpose(1, 0, 2, 3, 4)
        gx = np.ascontiguousarray(gx)
        if squeeze:
            gx = gx[0]
    return gx, LayerParams(gw, gbias)


def fc_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    xb, squeeze = _as_batch(x, 1)
    out_dim, in_dim = params.weight.shape
    if xb.shape[1] != in_dim:
        raise ShapeError("fc_forward", "features", in_dim, xb.shape[1])
    y = xb @ params.weight.T + params.bias
    return y[0] if squeeze else y


def fc_backward(x: np.ndarray, params: LayerParams, grad_out: np.ndarray,
                need_input_grad: bool = True) -> tuple[np.ndarray | None, LayerParams]:
    xb, squeeze = _as_batch(x, 1)
    gb, _ = _as_batch(grad_out, 1)
    out_dim, in_dim = params.weight.shape
    if xb.shape[1] != in_dim:
        raise ShapeError("fc_backward", "features", in_dim, xb.shape[1])
    if gb.shape != (xb.shape[0], out_dim):
        raise ShapeError("fc_backward", "grad_out", (xb.shape[0], out_dim), gb.shape)
    gw = gb.T @ xb
    gbias = gb.sum(axis=0)
    gx = None
    if need_input_grad:
        gx = gb @ params.weight
        if squeeze:
            gx = gx[0]
    return gx, LayerParams(gw, gbias)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, y: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``x``, given the output ``y``."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        return grad_out * y * (1 - y)
    raise ValueError(f"unknown activation {kind!r}")


def bce_loss(prob: np.ndarray, target: np.ndarray, eps: float = BCE_EPS) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. ``prob``."""
    if prob.shape != target.shape:
        raise ShapeError("bce_loss", "shape", prob.shape, target.shape)
    p = np.clip(prob, eps, 1 - eps)
    t = target.astype(prob.dtype, copy=False)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))
    grad = (p - t) / (p * (1 - p)) / n
    # clipped entries have zero derivative
    grad[(prob < eps) | (prob > 1 - eps)] = 0
    return float(loss), grad.astype(prob.dtype, copy=False)


def sigmoid_bce_backward(prob: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Fused gradient of mean BCE through the sigmoid: ``(p - t) / N``."""
    return ((prob - target.astype(prob.dtype, copy=False)) / prob.size).astype(prob.dtype, copy=False)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", "shape", pred.shape, target.shape)
    diff = pred - target.astype(pred.dtype, copy=False)
    return float(np.mean(diff * diff)), (2 * diff / diff.size).astype(pred.dtype, copy=False)


def dropout_mask(shape, p: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Binary keep-mask: each entry is 0 with probability ``p``. Not rescaled."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    return (rng.random(shape) >= p).astype(dtype)


@numba.njit(cache=True)
def _momentum_kernel(w, v, g, lr, mu):
    w = w.reshape(-1)
    v = v.reshape(-1)
    g = g.reshape(-1)
    for i in range(w.size):
        vi = mu * v[i] - lr * g[i]
        v[i] = vi
        w[i] += vi


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, mu: float) -> None:
    """Heavy-ball update in place: ``v <- mu*v - lr*g; w <- w + v``."""
    for name, w in params.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError("sgd_momentum_step", name, w.shape, (g.shape, v.shape))
        if w.flags.c_contiguous and v.flags.c_contiguous:
            dt = w.dtype.type
            _momentum_kernel(w, v, np.ascontiguousarray(g, dtype=w.dtype), dt(lr), dt(mu))
        else:
            v *= mu
            v -= lr * g
            w += v

"""Brute-force reference implementations used to validate the fast ops.

Everything here is deliberately written as explicit loops over output
(or input) positions so it shares no code path with the im2col lowering.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ConvSpec, LayerParams


def naive_conv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Direct convolution of a single ``(C, D, H, W)`` volume."""
    cout, cin, f = weight.shape[0], weight.shape[1], weight.shape[2]
    d = stride
    od, oh, ow = ((e - f) // d + 1 for e in x.shape[1:])
    out = np.zeros((cout, od, oh, ow), dtype=x.dtype)
    for c in range(cout):
        for i in range(od):
            for j in range(oh):
                for k in range(ow):
                    acc = bias[c]
                    for ci in range(cin):
                        win = x[ci, i * d : i * d + f, j * d : j * d + f, k * d : k * d + f]
                        acc += np.sum(win * weight[c, ci])
                    out[c, i, j, k] = acc
    return out


def naive_deconv3d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Scatter form of transposed convolution for one ``(C, D, H, W)`` volume."""
    cin, cout, f = weight.shape[0], weight.shape[1], weight.shape[2]
    d = stride
    od, oh, ow = ((e - 1) * d + f for e in x.shape[1:])
    out = np.zeros((cout, od, oh, ow), dtype=x.dtype)
    for ci in range(cin):
        for i in range(x.shape[1]):
            for j in range(x.shape[2]):
                for k in range(x.shape[3]):
                    out[:, i * d : i * d + f, j * d : j * d + f, k * d : k * d + f] += x[ci, i, j, k] * weight[ci]
    out += bias[:, None, None, None]
    return out


def naive_fc(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.empty(weight.shape[0], dtype=x.dtype)
    for r in range(weight.shape[0]):
        acc = bias[r]
        for c in range(weight.shape[1]):
            acc += weight[r, c] * x[c]
        out[r] = acc
    return out


def numerical_grad(fn, arr: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def _small_instance(layer: str, rng: np.random.Generator, dtype):
    """Random small problem: (forward(x, params) -> out, backward(...), x, params)."""
    if layer == "conv3d":
        spec = ConvSpec(2, 3, 3, 1)
        x = rng.standard_normal((2, 6, 6, 6)).astype(dtype)
        p = LayerParams(rng.standard_normal(spec.weight_shape()).astype(dtype),
                        rng.standard_normal(3).astype(dtype))
        return (lambda: T.conv3d_forward(x, p, spec),
                lambda g: T.conv3d_backward(x, p, spec, g), x, p)
    if layer == "conv3d_strided":
        spec = ConvSpec(2, 2, 3, 2)
        x = rng.standard_normal((2, 7, 7, 7)).astype(dtype)
        p = LayerParams(rng.standard_normal(spec.weight_shape()).astype(dtype),
                        rng.standard_normal(2).astype(dtype))
        return (lambda: T.conv3d_forward(x, p, spec),
                lambda g: T.conv3d_backward(x, p, spec, g), x, p)
    if layer == "deconv3d":
        spec = ConvSpec(2, 2, 3, 2, "transposed")
        x = rng.standard_normal((2, 3, 3, 3)).astype(dtype)
        p = LayerParams(rng.standard_normal(spec.weight_shape()).astype(dtype),
                        rng.standard_normal(2).astype(dtype))
        return (lambda: T.deconv3d_forward(x, p, spec),
                lambda g: T.deconv3d_backward(x, p, spec, g), x, p)
    if layer == "fc":
        x = rng.standard_normal(5).astype(dtype)
        p = LayerParams(rng.standard_normal((4, 5)).astype(dtype), rng.standard_normal(4).astype(dtype))
        return (lambda: T.fc_forward(x, p), lambda g: T.fc_backward(x, p, g), x, p)
    if layer in ("relu", "sigmoid"):
        x = rng.standard_normal(20).astype(dtype)
        # keep relu inputs away from the kink
        x[np.abs(x) < 0.05] += 0.1
        return (lambda: T.activation(x, layer),
                lambda g: (T.activation_backward(x, T.activation(x, layer), g, layer), None), x, None)
    raise ValueError(f"no gradient-check instance for {layer!r}")


def gradient_check(layer: str, eps: float = 1e-5, dtype=np.float64, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar objective is ``sum(out * r)`` for a fixed random ``r``, so the
    analytic backward is driven with ``grad_out = r``. Every input entry and
    every parameter entry is checked.
    """
    rng = np.random.default_rng(seed)
    if layer in ("bce", "mse"):
        prob = rng.uniform(0.05, 0.95, 30).astype(dtype)
        target = (rng.random(30) < 0.5).astype(dtype)
        loss_fn = T.bce_loss if layer == "bce" else T.mse_loss
        _, grad = loss_fn(prob, target)
        num = numerical_grad(lambda: loss_fn(prob, target)[0], prob, eps)
        return relative_error(grad, num)

    fwd, bwd, x, params = _small_instance(layer, rng, dtype)
    r = rng.standard_normal(fwd().shape).astype(dtype)

    def objective():
        return float(np.sum(fwd() * r))

    gx, gp = bwd(r)
    errs = [relative_error(gx, numerical_grad(objective, x, eps))]
    if params is not None:
        errs.append(relative_error(gp.weight, numerical_grad(objective, params.weight, eps)))
        errs.append(relative_error(gp.bias, numerical_grad(objective, params.bias, eps)))
    return max(errs)


def model_spot_check(model, grid, target=None, per_layer: int = 5, eps: float = 1e-6,
                     seed: int = 0, loss: str = "bce") -> dict[str, float]:
    """Central differences of the full-network loss at a few weights per tensor.

    For each parameter tensor, ``per_layer`` entries are taken from a random
    candidate pool, preferring those with the largest analytic gradient so
    the comparison is not dominated by round-off. Returns the max relative
    error per tensor. Use a 64-bit model with non-zero biases: with zero
    biases every empty receptive field sits exactly on a ReLU kink. The
    small default step matters for the same reason: one conv bias feeds
    hundreds of pre-activations, and a larger step lets a few cross zero.
    """
    from . import model as M

    rng = np.random.default_rng(seed)
    target = grid if target is None else target
    x, _ = M._volume_batch(grid, model.spec.input_edge, model.dtype)
    mask = T.dropout_mask(x.shape, model.spec.dropout, rng, dtype=model.dtype)

    def objective():
        _, cache = M.forward(model, grid, "train", mask=mask)
        t, _ = M._volume_batch(target, model.spec.input_edge, model.dtype)
        return M.loss_and_output_grad(cache["prob"], t, loss)[0]

    _, cache = M.forward(model, grid, "train", mask=mask)
    _, grads, _ = M.backward(model, cache, target, loss)
    out = {}
    for name, arr in model.params.items():
        flat, gflat = arr.reshape(-1), grads[name].reshape(-1)
        pool = rng.choice(flat.size, size=min(flat.size, 50 * per_layer), replace=False)
        picks = pool[np.argsort(-np.abs(gflat[pool]), kind="stable")[:per_layer]]
        num = np.empty(len(picks))
        for j, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            hi = objective()
            flat[i] = orig - eps
            lo = objective()
            flat[i] = orig
            num[j] = (hi - lo) / (2 * eps)
        out[name] = relative_error(gflat[picks], num)
    return out

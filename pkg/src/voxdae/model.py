"""The volumetric denoising autoencoder.

Pipeline (default widths)::

    1x30^3 -dropout-> conv(64, f9, s3) -> 64x8^3 -> conv(256, f4, s2) -> 256x3^3
    -> flatten 6912 -> fc 6912 -> reshape 256x3^3 -> deconv(64, f5, s2) -> 64x9^3
    -> deconv(1, f6, s3) -> 1x30^3 -> sigmoid

ReLU follows conv1, conv2, fc and deconv1. The bottleneck code is the
post-ReLU fc output.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .mesh import GRID_EDGE, VoxelGrid
from .tensor import ConvSpec, LayerParams

LAYERS = ("conv1", "conv2", "fc", "deconv1", "deconv2")


@dataclass(frozen=True)
class ModelSpec:
    input_edge: int = GRID_EDGE
    conv1: tuple[int, int, int] = (64, 9, 3)  # (channels, filter, stride)
    conv2: tuple[int, int, int] = (256, 4, 2)
    deconv1: tuple[int, int, int] = (64, 5, 2)
    deconv2: tuple[int, int, int] = (1, 6, 3)
    dropout: float = 0.5

    def conv_specs(self) -> dict[str, ConvSpec]:
        c1, c2, d1, d2 = self.conv1, self.conv2, self.deconv1, self.deconv2
        return {
            "conv1": ConvSpec(1, c1[0], c1[1], c1[2]),
            "conv2": ConvSpec(c1[0], c2[0], c2[1], c2[2]),
            "deconv1": ConvSpec(c2[0], d1[0], d1[1], d1[2], "transposed"),
            "deconv2": ConvSpec(d1[0], d2[0], d2[1], d2[2], "transposed"),
        }

    @property
    def code_edge(self) -> int:
        s = self.conv_specs()
        return s["conv2"].output_edge(s["conv1"].output_edge(self.input_edge))

    @property
    def bottleneck(self) -> int:
        return self.conv2[0] * self.code_edge ** 3

    def shape_chain(self) -> list[tuple[int, ...]]:
        """Activation shapes from input to output; raises if the output edge is not regained."""
        s = self.conv_specs()
        e0 = self.input_edge
        e1 = s["conv1"].output_edge(e0)
        e2 = s["conv2"].output_edge(e1)
        e3 = s["deconv1"].output_edge(e2)
        e4 = s["deconv2"].output_edge(e3)
        chain = [(1, e0, e0, e0), (self.conv1[0],) + (e1,) * 3, (self.conv2[0],) + (e2,) * 3,
                 (self.bottleneck,), (self.bottleneck,), (self.conv2[0],) + (e2,) * 3,
                 (self.deconv1[0],) + (e3,) * 3, (self.deconv2[0],) + (e4,) * 3]
        if chain[-1] != chain[0]:
            raise T.ShapeError("ModelSpec", "output", chain[0], chain[-1])
        return chain

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name, cs in self.conv_specs().items():
            shapes[f"{name}.weight"] = cs.weight_shape()
            shapes[f"{name}.bias"] = (cs.out_channels,)
        shapes["fc.weight"] = (self.bottleneck, self.bottleneck)
        shapes["fc.bias"] = (self.bottleneck,)
        return {k: shapes[k] for k in sorted(shapes, key=lambda k: (LAYERS.index(k.split(".")[0]), k))}

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())


@dataclass
class ModelParams:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def layer(self, name: str) -> LayerParams:
        return LayerParams(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.velocity.items()}, self.seed, dict(self.meta))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]


def glorot_bound(shape: tuple[int, ...]) -> float:
    recept = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_a, fan_b = shape[0] * recept, shape[1] * recept
    return float(np.sqrt(6.0 / (fan_a + fan_b)))


def he_bound(shape: tuple[int, ...]) -> float:
    # fan-in only; keeps ReLU activations from shrinking layer to layer
    recept = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return float(np.sqrt(6.0 / (shape[1] * recept)))


INIT_SCHEMES = {"glorot": glorot_bound, "he": he_bound}


def init_model(spec: ModelSpec | None = None, rng: np.random.Generator | int = 0,
               dtype=np.float32, scheme: str = "glorot") -> ModelParams:
    """Uniform weights (Glorot bound by default), zero biases, zero velocities."""
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; choose from {sorted(INIT_SCHEMES)}")
    bound = INIT_SCHEMES[scheme]
    spec = spec or ModelSpec()
    spec.shape_chain()
    seed = rng if isinstance(rng, int) else 0
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            s = bound(shape)
            # sampled in the target dtype: no float64 detour for the 48M-entry fc
            w = rng.random(shape, dtype=dtype)
            w *= 2 * s
            w -= s
            params[name] = w
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelParams(spec, params, velocity, seed)


def _volume_batch(x, edge: int, dtype) -> tuple[np.ndarray, bool]:
    if isinstance(x, VoxelGrid):
        x = x.occupancy
    elif isinstance(x, (list, tuple)):
        x = np.stack([g.occupancy if isinstance(g, VoxelGrid) else g for g in x])
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (edge, edge, edge):
        raise T.ShapeError("forward", "input", (edge, edge, edge), x.shape[-3:])
    return x[:, None].astype(dtype), single


def encode_batch(model: ModelParams, x: np.ndarray) -> tuple[np.ndarray, dict]:
    """``(N, 1, E, E, E)`` input -> ``(N, bottleneck)`` codes."""
    specs = model.spec.conv_specs()
    z1 = T.conv3d_forward(x, model.layer("conv1"), specs["conv1"])
    a1 = T.activation(z1, "relu")
    z2 = T.conv3d_forward(a1, model.layer("conv2"), specs["conv2"])
    a2 = T.activation(z2, "relu")
    h = a2.reshape(len(x), -1)
    z3 = T.fc_forward(h, model.layer("fc"))
    code = T.activation(z3, "relu")
    return code, {"x": x, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "h": h, "z3": z3}


def decode_batch(model: ModelParams, code: np.ndarray) -> tuple[np.ndarray, dict]:
    """``(N, bottleneck)`` codes -> ``(N, 1, E, E, E)`` occupancy probabilities."""
    specs = model.spec.conv_specs()
    e = model.spec.code_edge
    v = code.reshape(len(code), model.spec.conv2[0], e, e, e)
    z4 = T.deconv3d_forward(v, model.layer("deconv1"), specs["deconv1"])
    a4 = T.activation(z4, "relu")
    z5 = T.deconv3d_forward(a4, model.layer("deconv2"), specs["deconv2"])
    prob = T.activation(z5, "sigmoid")
    return prob, {"code": code, "v": v, "z4": z4, "a4": a4, "prob": prob}


def forward(model: ModelParams, grid, mode: str = "eval", rng: np.random.Generator | None = None,
            p: float | None = None, mask: np.ndarray | None = None) -> tuple[np.ndarray, dict]:
    """Full pass. ``grid`` is a VoxelGrid, an ``(E,E,E)`` array or an ``(N,E,E,E)`` batch.

    In train mode the input is multiplied by a fresh binary dropout mask
    (rate ``p``, default ``model.spec.dropout``) drawn from ``rng``, unless an explicit
    ``mask`` is given. Eval mode never touches ``rng``.
    """
    x, single = _volume_batch(grid, model.spec.input_edge, model.dtype)
    if mode == "train":
        rate = model.spec.dropout if p is None else p
        if mask is None:
            if rate > 0 and rng is None:
                raise ValueError("train-mode forward with dropout needs an rng")
            mask = T.dropout_mask(x.shape, rate, rng, dtype=x.dtype)
        x = x * mask.reshape(x.shape).astype(x.dtype, copy=False)
    elif mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    code, enc = encode_batch(model, x)
    prob, dec = decode_batch(model, code)
    cache = {**enc, **dec, "mask": mask, "single": single}
    out = prob[:, 0]
    return (out[0] if single else out), cache


def decode_backward(model: ModelParams, cache: dict, grad_z5: np.ndarray) -> tuple[dict, np.ndarray]:
    specs = model.spec.conv_specs()
    grads = {}
    g_a4, gp = T.deconv3d_backward(cache["a4"], model.layer("deconv2"), specs["deconv2"], grad_z5)
    grads["deconv2.weight"], grads["deconv2.bias"] = gp.weight, gp.bias
    g_z4 = T.activation_backward(cache["z4"], None, g_a4, "relu")
    g_v, gp = T.deconv3d_backward(cache["v"], model.layer("deconv1"), specs["deconv1"], g_z4)
    grads["deconv1.weight"], grads["deconv1.bias"] = gp.weight, gp.bias
    return grads, g_v.reshape(len(g_v), -1)


def encode_backward(model: ModelParams, cache: dict, grad_code: np.ndarray,
                    need_input_grad: bool = False) -> tuple[dict, np.ndarray | None]:
    specs = model.spec.conv_specs()
    grads = {}
    g_z3 = T.activation_backward(cache["z3"], None, grad_code, "relu")
    g_h, gp = T.fc_backward(cache["h"], model.layer("fc"), g_z3)
    grads["fc.weight"], grads["fc.bias"] = gp.weight, gp.bias
    g_z2 = T.activation_backward(cache["z2"], None, g_h.reshape(cache["z2"].shape), "relu")
    g_a1, gp = T.conv3d_backward(cache["a1"], model.layer("conv2"), specs["conv2"], g_z2)
    grads["conv2.weight"], grads["conv2.bias"] = gp.weight, gp.bias
    g_z1 = T.activation_backward(cache["z1"], None, g_a1, "relu")
    g_x, gp = T.conv3d_backward(cache["x"], model.layer("conv1"), specs["conv1"], g_z1,
                                need_input_grad=need_input_grad)
    grads["conv1.weight"], grads["conv1.bias"] = gp.weight, gp.bias
    return grads, g_x


def loss_and_output_grad(prob: np.ndarray, target: np.ndarray, loss: str = "bce") -> tuple[float, np.ndarray]:
    """Summed-over-batch per-sample mean loss and its gradient w.r.t. the pre-sigmoid output."""
    n = len(prob)
    per = prob[0].size
    if loss == "bce":
        value = sum(T.bce_loss(prob[i], target[i])[0] for i in range(n))
        grad = (prob - target.astype(prob.dtype, copy=False)) / per
    elif loss == "mse":
        value = sum(T.mse_loss(prob[i], target[i])[0] for i in range(n))
        g_prob = 2 * (prob - target.astype(prob.dtype, copy=False)) / per
        grad = T.activation_backward(None, prob, g_prob, "sigmoid")
    else:
        raise ValueError(f"unknown loss {loss!r}")
    return value, grad.astype(prob.dtype, copy=False)


def backward(model: ModelParams, cache: dict, target, loss: str = "bce",
             need_input_grad: bool = False) -> tuple[float, dict, np.ndarray | None]:
    """Loss against the clean ``target`` and gradients for every parameter.

    For a batch the loss and gradients are sums over samples. When
    ``need_input_grad`` is set, the input gradient is gated by the same
    dropout mask used in the forward pass.
    """
    t, _ = _volume_batch(target, model.spec.input_edge, model.dtype)
    value, g_z5 = loss_and_output_grad(cache["prob"], t, loss)
    grads, g_code = decode_backward(model, cache, g_z5)
    enc_grads, g_x = encode_backward(model, cache, g_code, need_input_grad)
    grads.update(enc_grads)
    if g_x is not None:
        if cache["mask"] is not None:
            g_x = g_x * cache["mask"].reshape(g_x.shape)
        g_x = g_x[:, 0]
        if cache["single"]:
            g_x = g_x[0]
    return value, {k: grads[k] for k in model.params}, g_x


def encode(model: ModelParams, grid) -> np.ndarray:
    """Bottleneck code(s) of an eval-mode pass."""
    x, single = _volume_batch(grid, model.spec.input_edge, model.dtype)
    code, _ = encode_batch(model, x)
    return code[0] if single else code


def decode(model: ModelParams, code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=model.dtype)
    single = code.ndim == 1
    prob, _ = decode_batch(model, code[None] if single else code)
    out = prob[:, 0]
    return out[0] if single else out


def reconstruct(model: ModelParams, grid) -> np.ndarray:
    return forward(model, grid, "eval")[0]


# --- classification head -------------------------------------------------------


@dataclass
class ClassifierHead:
    """Two fc layers on top of the bottleneck: code -> hidden (ReLU) -> logits (softmax)."""

    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]

    @property
    def num_classes(self) -> int:
        return self.params["out.weight"].shape[0]


def fine_tune_head(model: ModelParams, num_classes: int, hidden: int = 512,
                   rng: np.random.Generator | int = 0) -> ClassifierHead:
    if isinstance(rng, int):
        rng = np.random.default_rng(rng)
    shapes = {"hidden.weight": (hidden, model.spec.bottleneck), "hidden.bias": (hidden,),
              "out.weight": (num_classes, hidden), "out.bias": (num_classes,)}
    params = {}
    for k, s in shapes.items():
        if k.endswith(".bias"):
            params[k] = np.zeros(s, dtype=model.dtype)
        else:
            b = glorot_bound(s)
            params[k] = rng.uniform(-b, b, size=s).astype(model.dtype)
    return ClassifierHead(params, {k: np.zeros_like(v) for k, v in params.items()})


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_forward(head: ClassifierHead, code: np.ndarray) -> tuple[np.ndarray, dict]:
    hp = head.params
    z = T.fc_forward(code, LayerParams(hp["hidden.weight"], hp["hidden.bias"]))
    a = T.activation(z, "relu")
    logits = T.fc_forward(a, LayerParams(hp["out.weight"], hp["out.bias"]))
    return logits, {"code": code, "z": z, "a": a}


def head_backward(head: ClassifierHead, cache: dict, logits: np.ndarray,
                  labels: np.ndarray) -> tuple[float, dict, np.ndarray]:
    """Summed multinomial cross-entropy, head gradients and gradient w.r.t. the code."""
    hp = head.params
    probs = softmax(logits)
    n = len(labels)
    loss = float(-np.sum(np.log(np.maximum(probs[np.arange(n), labels], 1e-12))))
    g = probs.copy()
    g[np.arange(n), labels] -= 1
    g_a, gp_out = T.fc_backward(cache["a"], LayerParams(hp["out.weight"], hp["out.bias"]), g)
    g_z = T.activation_backward(cache["z"], None, g_a, "relu")
    g_code, gp_hid = T.fc_backward(cache["code"], LayerParams(hp["hidden.weight"], hp["hidden.bias"]), g_z)
    grads = {"hidden.weight": gp_hid.weight, "hidden.bias": gp_hid.bias,
             "out.weight": gp_out.weight, "out.bias": gp_out.bias}
    return loss, grads, g_code


# --- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"VCDA"
CKPT_VERSION = 1
_KINDS = {"convolution": 0, "fc": 1, "transposed": 2}


class CheckpointError(ValueError):
    pass


def _layer_table(spec: ModelSpec) -> list[tuple[int, int, int, int, int]]:
    cs = spec.conv_specs()
    rows = []
    for name in LAYERS:
        if name == "fc":
            rows.append((_KINDS["fc"], spec.bottleneck, spec.bottleneck, 0, 0))
        else:
            c = cs[name]
            rows.append((_KINDS[c.kind], c.in_channels, c.out_channels, c.filter, c.stride))
    return rows


def _spec_from_table(edge: int, dropout: float, rows) -> ModelSpec:
    c1, c2, d1, d2 = rows[0], rows[1], rows[3], rows[4]
    return ModelSpec(edge, (c1[2], c1[3], c1[4]), (c2[2], c2[3], c2[4]), (d1[2], d1[3], d1[4]),
                     (d2[2], d2[3], d2[4]), dropout)


def _checkpoint_chunks(model: ModelParams, include_velocity: bool):
    bits = model.dtype.itemsize * 8
    yield CKPT_MAGIC + struct.pack("<HB", CKPT_VERSION, bits)
    spec = model.spec
    yield struct.pack("<IdB", spec.input_edge, spec.dropout, len(LAYERS))
    for kind, cin, cout, f, d in _layer_table(spec):
        yield struct.pack("<BIIBB", kind, cin, cout, f, d)
    meta = json.dumps({"seed": model.seed, **model.meta}, sort_keys=True).encode()
    yield struct.pack("<I", len(meta)) + meta
    tensors = list(model.params.items())
    if include_velocity:
        tensors += [(f"velocity/{k}", v) for k, v in model.velocity.items()]
    yield struct.pack("<I", len(tensors))
    le = np.dtype(model.dtype).newbyteorder("<")
    for name, arr in tensors:
        nb = name.encode()
        yield struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        # no copy for contiguous little-endian arrays
        yield memoryview(np.ascontiguousarray(arr, dtype=le)).cast("B")


def checkpoint_bytes(model: ModelParams, include_velocity: bool = True) -> bytes:
    return b"".join(_checkpoint_chunks(model, include_velocity))


def save_checkpoint(model: ModelParams, path, include_velocity: bool = True) -> None:
    with open(path, "wb") as fh:
        for chunk in _checkpoint_chunks(model, include_velocity):
            fh.write(chunk)


def _read(fh, fmt: str, path) -> tuple:
    size = struct.calcsize(fmt)
    raw = fh.read(size)
    if len(raw) != size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return struct.unpack(fmt, raw)


def load_checkpoint(path, expect: ModelSpec | None = None) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, bits = _read(fh, "<HB", path)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CKPT_VERSION})")
        if bits not in (32, 64):
            raise CheckpointError(f"{path}: bad precision tag {bits}")
        dtype = np.dtype("<f4" if bits == 32 else "<f8")
        edge, dropout, nlayers = _read(fh, "<IdB", path)
        rows = [_read(fh, "<BIIBB", path) for _ in range(nlayers)]
        kinds = [_KINDS[k] for k in ("convolution", "convolution", "fc", "transposed", "transposed")]
        if [r[0] for r in rows] != kinds:
            raise CheckpointError(f"{path}: layer table does not describe this network")
        spec = _spec_from_table(edge, dropout, rows)
        if expect is not None and spec != expect:
            raise CheckpointError(f"{path}: spec mismatch: file has {spec}, expected {expect}")
        (mlen,) = _read(fh, "<I", path)
        meta = json.loads(fh.read(mlen))
        (count,) = _read(fh, "<I", path)
        params, velocity = {}, {}
        for _ in range(count):
            (nlen,) = _read(fh, "<H", path)
            name = fh.read(nlen).decode()
            (rank,) = _read(fh, "<B", path)
            shape = _read(fh, f"<{rank}I", path)
            n = int(np.prod(shape))
            arr = np.fromfile(fh, dtype=dtype, count=n)
            if arr.size != n:
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arr = arr.reshape(shape).astype(dtype.newbyteorder("="), copy=False)
            if name.startswith("velocity/"):
                velocity[name[len("velocity/"):]] = arr
            else:
                params[name] = arr
    expected = spec.param_shapes()
    for k, s in expected.items():
        if k not in params or params[k].shape != s:
            raise CheckpointError(f"{path}: tensor {k} missing or misshaped (expected {s})")
    for k in expected:
        velocity.setdefault(k, np.zeros_like(params[k]))
    seed = meta.pop("seed", 0)
    return ModelParams(spec, {k: params[k] for k in expected}, {k: velocity[k] for k in expected}, seed, meta)

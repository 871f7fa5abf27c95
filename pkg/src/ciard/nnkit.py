"""Minimal differentiable-network core.

Two reference architectures (plain MLP and a small conv net), explicit
forward/backward passes, SGD with momentum and weight decay, a cosine
learning-rate schedule and a portable checkpoint format. Everything runs
on numpy arrays; float32 is the working precision but the passes are
dtype-polymorphic so tests can re-run them in float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CheckpointError,
    FrozenModelError,
    IncompatibleCheckpointError,
    NumericError,
    ParameterError,
    ShapeError,
)

Array = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description. ``arch`` is "mlp" or "smallcnn".

    MLP: flatten input -> hidden linear+ReLU stack -> linear head.
    SmallCNN: [conv3x3 same -> ReLU -> maxpool2] per channel entry,
    then flatten -> hidden linear+ReLU stack -> linear head.
    The head is always raw logits (no final activation).
    """

    arch: str
    input_shape: tuple[int, ...]
    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    channels: tuple[int, ...] = (16, 32)

    def __post_init__(self):
        if self.arch not in ("mlp", "smallcnn"):
            raise ParameterError(f"unknown arch {self.arch!r}")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.arch == "smallcnn":
            if len(self.input_shape) != 3:
                raise ParameterError("smallcnn expects input_shape (C, H, W)")
            _, h, w = self.input_shape
            for _ in self.channels:
                if h % 2 or w % 2 or h < 2 or w < 2:
                    raise ParameterError("spatial dims must stay even through pooling")
                h //= 2
                w //= 2

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_dims(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        """(name, weight shape, bias shape) for every parameterized layer."""
        dims = []
        if self.arch == "mlp":
            widths = [self.input_size, *self.hidden, self.num_classes]
            for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
                dims.append((f"fc{i}", (n_in, n_out), (n_out,)))
        else:
            c, h, w = self.input_shape
            for i, c_out in enumerate(self.channels):
                dims.append((f"conv{i}", (c_out, c, 3, 3), (c_out,)))
                c = c_out
                h //= 2
                w //= 2
            widths = [c * h * w, *self.hidden, self.num_classes]
            for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
                dims.append((f"fc{i}", (n_in, n_out), (n_out,)))
        return dims

    def to_json(self) -> str:
        return json.dumps(
            {
                "arch": self.arch,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "hidden": list(self.hidden),
                "channels": list(self.channels),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        d = json.loads(text)
        return ModelSpec(
            arch=d["arch"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden=tuple(d["hidden"]),
            channels=tuple(d["channels"]),
        )


ParamSet = dict[str, Array]


def init_params(spec: ModelSpec, seed: int = 0) -> ParamSet:
    """He fan-in init for weights, zeros for biases, float32."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for name, w_shape, b_shape in spec.layer_dims():
        fan_in = int(np.prod(w_shape[1:])) if len(w_shape) == 4 else w_shape[0]
        std = math.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = (rng.standard_normal(w_shape) * std).astype(np.float32)
        params[f"{name}.b"] = np.zeros(b_shape, dtype=np.float32)
    return params


@dataclass
class ModelHandle:
    spec: ModelSpec
    params: ParamSet
    frozen: bool = False
    seed: int | None = None

    @staticmethod
    def create(spec: ModelSpec, seed: int = 0, frozen: bool = False) -> "ModelHandle":
        return ModelHandle(spec=spec, params=init_params(spec, seed), frozen=frozen, seed=seed)

    def copy(self) -> "ModelHandle":
        return ModelHandle(
            spec=self.spec,
            params={k: v.copy() for k, v in self.params.items()},
            frozen=self.frozen,
            seed=self.seed,
        )

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def param_digest(model: ModelHandle) -> str:
    """sha256 over parameter bytes in name order."""
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward / backward


def _conv3x3(x: Array, w: Array, b: Array) -> Array:
    """Same-padded 3x3 convolution, stride 1. x: (B,C,H,W), w: (O,C,3,3)."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    y = np.zeros((B, w.shape[0], H, W), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            # (B,C,H,W) x (O,C) contribution at tap (di, dj)
            y += np.tensordot(xp[:, :, di : di + H, dj : dj + W], w[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
    return y + b[None, :, None, None]


def _conv3x3_backward(x: Array, w: Array, dy: Array) -> tuple[Array, Array, Array]:
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di : di + H, dj : dj + W]
            dw[:, :, di, dj] = np.tensordot(dy, patch, axes=([0, 2, 3], [0, 2, 3]))
            dxp[:, :, di : di + H, dj : dj + W] += np.tensordot(dy, w[:, :, di, dj], axes=([1], [0])).transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 2, 3))
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _maxpool2(x: Array) -> tuple[Array, Array]:
    B, C, H, W = x.shape
    xr = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(xr, axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool2_backward(dy: Array, idx: Array, in_shape: tuple[int, ...]) -> Array:
    B, C, H, W = in_shape
    dxr = np.zeros((B, C, H // 2, W // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None], dy[..., None], axis=-1)
    return dxr.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)


def forward_cache(model: ModelHandle, x: Array) -> tuple[Array, list]:
    """Forward pass keeping the per-layer cache needed for backward."""
    spec = model.spec
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
    p = model.params
    cache: list = []
    h = x
    if spec.arch == "smallcnn":
        for i in range(len(spec.channels)):
            w, b = p[f"conv{i}.w"], p[f"conv{i}.b"]
            z = _conv3x3(h, w, b)
            a = np.maximum(z, 0)
            pooled, idx = _maxpool2(a)
            cache.append((f"conv{i}", h, z, idx, a.shape))
            h = pooled
        flat_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        cache.append(("flatten", flat_shape))
    else:
        if h.ndim > 2:
            flat_shape = h.shape
            h = h.reshape(h.shape[0], -1)
            cache.append(("flatten", flat_shape))
    n_fc = len(spec.hidden) + 1
    for i in range(n_fc):
        w, b = p[f"fc{i}.w"], p[f"fc{i}.b"]
        z = h @ w + b
        if i < n_fc - 1:
            cache.append((f"fc{i}", h, z))
            h = np.maximum(z, 0)
        else:
            cache.append((f"fc{i}", h, None))
            h = z
    return h, cache


def forward(model: ModelHandle, x: Array) -> Array:
    logits, cache = forward_cache(model, x)
    if not np.all(np.isfinite(logits)):
        _raise_nonfinite(cache)
    return logits


def _raise_nonfinite(cache: list) -> None:
    for entry in cache:
        for part in entry[1:]:
            if isinstance(part, np.ndarray) and not np.all(np.isfinite(part)):
                raise NumericError(f"non-finite values in layer {entry[0]}")
    raise NumericError("non-finite logits")


def backward(model: ModelHandle, cache: list, dlogits: Array) -> tuple[ParamSet, Array]:
    """Backprop dlogits through the cached forward pass.

    Returns (param gradients, gradient w.r.t. the input batch).
    """
    p = model.params
    grads: ParamSet = {}
    d = dlogits
    for entry in reversed(cache):
        kind = entry[0]
        if kind == "flatten":
            d = d.reshape(entry[1])
        elif kind.startswith("fc"):
            _, h_in, z = entry
            if z is not None:
                d = d * (z > 0)
            w = p[f"{kind}.w"]
            grads[f"{kind}.w"] = h_in.T @ d
            grads[f"{kind}.b"] = d.sum(axis=0)
            d = d @ w.T
        else:  # conv block: pool <- relu <- conv
            _, h_in, z, idx, a_shape = entry
            d = _maxpool2_backward(d, idx, a_shape)
            d = d * (z > 0)
            dx, dw, db = _conv3x3_backward(h_in, p[f"{kind}.w"], d)
            grads[f"{kind}.w"] = dw
            grads[f"{kind}.b"] = db
            d = dx
    return grads, d


def gradients(model: ModelHandle, x: Array, objective) -> tuple[float, ParamSet, Array]:
    """Value, parameter gradients and input gradient of a scalar objective.

    ``objective(logits) -> (value, dvalue_dlogits)``.
    """
    logits, cache = forward_cache(model, x)
    if not np.all(np.isfinite(logits)):
        _raise_nonfinite(cache)
    value, dlogits = objective(logits)
    grads, dx = backward(model, cache, np.asarray(dlogits, dtype=logits.dtype))
    if not (np.isfinite(value) and np.all(np.isfinite(dx))):
        raise NumericError("non-finite objective or input gradient")
    return float(value), grads, dx


# ---------------------------------------------------------------------------
# optimizer & schedule


@dataclass
class OptState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    buffers: ParamSet = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ParameterError("lr must be >= 0")


def sgd_step(model: ModelHandle, grads: ParamSet, opt: OptState) -> None:
    """v <- mu*v + (g + wd*p); p <- p - lr*v. Weight decay on weights only."""
    if model.frozen:
        raise FrozenModelError("cannot step a frozen model")
    for name, pval in model.params.items():
        g = grads[name].astype(pval.dtype)
        if opt.weight_decay and name.endswith(".w"):
            g = g + opt.weight_decay * pval
        buf = opt.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(pval)
        buf = opt.momentum * buf + g
        opt.buffers[name] = buf
        pval -= opt.lr * buf


def cosine_lr(epoch: int, total: int = 300, hold: int = 50, lr0: float = 0.1, lr_min: float = 1e-5) -> float:
    """Constant lr0 for the hold phase, then cosine decay to lr_min at ``total``."""
    if not 0 <= epoch <= total:
        raise ParameterError(f"epoch {epoch} outside [0, {total}]")
    if hold >= total:
        raise ParameterError("hold must be < total")
    if epoch < hold:
        return lr0
    t = (epoch - hold) / (total - hold)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "ciardckpt v1"


def save_checkpoint(model: ModelHandle, path) -> None:
    """Text manifest (spec, seed, tensor table) followed by raw LE float32."""
    header = io.StringIO()
    header.write(_MAGIC + "\n")
    header.write("spec " + model.spec.to_json() + "\n")
    header.write(f"seed {model.seed if model.seed is not None else '-'}\n")
    offset = 0
    blobs = []
    for name in sorted(model.params):
        t = np.ascontiguousarray(model.params[name], dtype="<f4")
        shape = ",".join(str(s) for s in t.shape)
        header.write(f"tensor {name} {shape} f32 {offset}\n")
        blobs.append(t.tobytes())
        offset += len(blobs[-1])
    header.write("data\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expected_spec: ModelSpec | None = None) -> ModelHandle:
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(b"data\n")
    if sep < 0:
        raise CheckpointError("missing data marker")
    try:
        lines = raw[:sep].decode("utf-8").splitlines()
    except UnicodeDecodeError as e:
        raise CheckpointError("undecodable manifest") from e
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError("bad magic")
    blob = raw[sep + 5 :]
    spec = None
    seed: int | None = None
    table = []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "spec":
            spec = ModelSpec.from_json(rest)
        elif kind == "seed":
            seed = None if rest == "-" else int(rest)
        elif kind == "tensor":
            name, shape_s, dtype, off_s = rest.split(" ")
            if dtype != "f32":
                raise CheckpointError(f"unsupported dtype {dtype}")
            shape = tuple(int(s) for s in shape_s.split(","))
            table.append((name, shape, int(off_s)))
        else:
            raise CheckpointError(f"unknown manifest record {kind!r}")
    if spec is None:
        raise CheckpointError("manifest missing spec")
    if expected_spec is not None and spec != expected_spec:
        raise IncompatibleCheckpointError("checkpoint spec does not match requested spec")
    expected = {f"{n}.{s}" for n, _, _ in spec.layer_dims() for s in ("w", "b")}
    if {n for n, _, _ in table} != expected:
        raise IncompatibleCheckpointError("tensor table does not match spec")
    params: ParamSet = {}
    for name, shape, off in table:
        nbytes = int(np.prod(shape)) * 4
        if off + nbytes > len(blob):
            raise CheckpointError("truncated tensor data")
        params[name] = np.frombuffer(blob[off : off + nbytes], dtype="<f4").reshape(shape).copy()
    for name, w_shape, b_shape in spec.layer_dims():
        if params[f"{name}.w"].shape != w_shape or params[f"{name}.b"].shape != b_shape:
            raise IncompatibleCheckpointError(f"shape mismatch for {name}")
    return ModelHandle(spec=spec, params=params, seed=seed)

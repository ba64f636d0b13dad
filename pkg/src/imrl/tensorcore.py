"""Dense layers with hand-written backward passes, two optimizers and a checkpoint format.

Tensors are plain ``float64`` numpy arrays. Every layer consumes a leading
minibatch axis: images are ``(N, C, H, W)``, vectors are ``(N, F)``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
CHECKPOINT_HEADER = "IMRL-NET v1"


class ShapeError(ValueError):
    """Input does not fit a layer."""


class LayerStateError(RuntimeError):
    """Backward called without a cached forward pass."""


class CheckpointError(ValueError):
    """A checkpoint stream is truncated or malformed."""


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    learning_rate: float = 0.00025
    rmsprop_decay: float = 0.95
    rmsprop_epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 < self.rmsprop_decay < 1.0:
            raise ValueError("rmsprop_decay must lie in (0, 1)")
        if not self.rmsprop_epsilon > 0:
            raise ValueError("rmsprop_epsilon must be > 0")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class Layer:
    """Base class. Subclasses with parameters keep them in ``self.params``."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.accumulators: dict[str, np.ndarray] = {}
        self._cache = None

    # -- shape / parameter plumbing -------------------------------------------------
    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        return tuple(input_shape)

    def describe(self) -> dict[str, int]:
        """Kind-specific hyperparameters, serialised into checkpoints."""
        return {}

    def build(self, input_shape: Sequence[int], rng: np.random.Generator | None) -> tuple[int, ...]:
        """Allocate parameters for a per-sample ``input_shape``; returns the output shape."""
        return self.output_shape(input_shape)

    def _alloc(self, name: str, value: np.ndarray) -> None:
        self.params[name] = np.ascontiguousarray(value, dtype=DTYPE)
        self.grads[name] = np.zeros_like(self.params[name])
        self.accumulators[name] = np.zeros_like(self.params[name])

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    # -- computation ----------------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise LayerStateError(f"{self.kind}: backward called without a prior forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items())
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    """Valid-padding 2-D convolution (cross-correlation) with bias."""

    kind = "conv2d"

    def __init__(self, filters: int, kernel: int | tuple[int, int], stride: int = 1, in_channels: int | None = None):
        super().__init__()
        self.filters = int(filters)
        self.kh, self.kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        self.stride = int(stride)
        self.in_channels = in_channels

    def describe(self):
        return {
            "filters": self.filters,
            "kernel_h": self.kh,
            "kernel_w": self.kw,
            "stride": self.stride,
            "in_channels": self.in_channels or 0,
        }

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        for axis, size, k in (("height", h, self.kh), ("width", w, self.kw)):
            if size < k:
                raise ShapeError(f"conv2d {self.kh}x{self.kw}: input {axis} {size} smaller than kernel {k}")
        return (self.filters, (h - self.kh) // self.stride + 1, (w - self.kw) // self.stride + 1)

    def build(self, input_shape, rng):
        out = self.output_shape(input_shape)
        c = input_shape[0]
        self.in_channels = c
        fan_in, fan_out = c * self.kh * self.kw, self.filters * self.kh * self.kw
        b = glorot_bound(fan_in, fan_out)
        shape = (self.filters, c, self.kh, self.kw)
        w = rng.uniform(-b, b, size=shape) if rng is not None else np.zeros(shape)
        self._alloc("weight", w)
        self._alloc("bias", np.zeros(self.filters))
        return out

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv2d expected (N, {self.in_channels}, H, W), got {x.shape}")
        _, oh, ow = self.output_shape(x.shape[1:])
        s = self.stride
        # (N, C, OH, OW, KH, KW) view over input patches
        patches = sliding_window_view(x, (self.kh, self.kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        out = np.einsum("ncijkl,fckl->nfij", patches, self.params["weight"], optimize=True)
        out += self.params["bias"][None, :, None, None]
        self._cache = (x, patches)
        return out

    def backward(self, upstream, input_grad: bool = True):
        x, patches = self._take_cache()
        n, c, h, w = x.shape
        oh, ow = upstream.shape[2:]
        s = self.stride
        self.grads["weight"] += np.einsum("nfij,ncijkl->fckl", upstream, patches, optimize=True)
        self.grads["bias"] += upstream.sum(axis=(0, 2, 3))
        if not input_grad:
            return None
        dx = np.zeros_like(x)
        # contributions of each kernel tap; loops are over kh*kw only
        per_tap = np.einsum("nfij,fckl->ncklij", upstream, self.params["weight"], optimize=True)
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += per_tap[:, :, i, j]
        return dx


class MaxPool2x2(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2x2"

    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeError(f"maxpool2x2 expects (C, H, W), got {tuple(input_shape)}")
        c, h, w = input_shape
        for axis, size in (("height", h), ("width", w)):
            if size < 2:
                raise ShapeError(f"maxpool2x2: input {axis} {size} smaller than window 2")
        return (c, h // 2, w // 2)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2x2 expected (N, C, H, W), got {x.shape}")
        c, oh, ow = self.output_shape(x.shape[1:])
        n = x.shape[0]
        crop = x[:, :, : 2 * oh, : 2 * ow]
        # window elements in row-major order: (0,0), (0,1), (1,0), (1,1)
        win = crop.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
        idx = win.argmax(axis=-1)  # first maximum wins on ties
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, upstream):
        shape, idx = self._take_cache()
        n, c, h, w = shape
        oh, ow = idx.shape[2:]
        win = np.zeros((n, c, oh, ow, 4), dtype=DTYPE)
        np.put_along_axis(win, idx[..., None], upstream[..., None], axis=-1)
        dx = np.zeros(shape, dtype=DTYPE)
        dx[:, :, : 2 * oh, : 2 * ow] = win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, 2 * oh, 2 * ow
        )
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, upstream):
        mask = self._take_cache()
        return np.where(mask, upstream, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        out = np.empty_like(x, dtype=DTYPE)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._cache = out
        return out

    def backward(self, upstream):
        out = self._take_cache()
        return upstream * out * (1.0 - out)


class FullyConnected(Layer):
    """Affine map over the flattened per-sample input."""

    kind = "fullyconnected"

    def __init__(self, units: int, in_units: int | None = None):
        super().__init__()
        self.units = int(units)
        self.in_units = in_units

    def describe(self):
        return {"in_units": self.in_units or 0, "units": self.units}

    def output_shape(self, input_shape):
        return (self.units,)

    def build(self, input_shape, rng):
        self.in_units = int(np.prod(input_shape))
        b = glorot_bound(self.in_units, self.units)
        shape = (self.in_units, self.units)
        w = rng.uniform(-b, b, size=shape) if rng is not None else np.zeros(shape)
        self._alloc("weight", w)
        self._alloc("bias", np.zeros(self.units))
        return (self.units,)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_units:
            raise ShapeError(f"fullyconnected expected {self.in_units} inputs, got {flat.shape[1]}")
        self._cache = (x.shape, flat)
        return flat @ self.params["weight"] + self.params["bias"]

    def backward(self, upstream):
        shape, flat = self._take_cache()
        self.grads["weight"] += flat.T @ upstream
        self.grads["bias"] += upstream.sum(axis=0)
        return (upstream @ self.params["weight"].T).reshape(shape)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, MaxPool2x2, ReLU, Sigmoid, FullyConnected)}


def output_shape(layer: Layer, input_shape: Sequence[int]) -> tuple[int, ...]:
    return layer.output_shape(tuple(input_shape))


def optimizer_step(layer: Layer, spec: OptimizerSpec) -> None:
    """Apply one update from the accumulated gradients, then zero them."""
    lr = spec.learning_rate
    for name, w in layer.params.items():
        g = layer.grads[name]
        if spec.kind == "sgd":
            w -= lr * g
        else:
            acc = layer.accumulators[name]
            acc *= spec.rmsprop_decay
            acc += (1.0 - spec.rmsprop_decay) * g * g
            w -= lr * g / np.sqrt(acc + spec.rmsprop_epsilon)
        g.fill(0.0)


# ----------------------------------------------------------------------------------
# Sequential stack
# ----------------------------------------------------------------------------------
class Stack:
    """A chain of layers built against a fixed per-sample input shape."""

    def __init__(self, layers: Iterable[Layer], input_shape: Sequence[int], rng: np.random.Generator | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng)
        self.output_shape = shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected per-sample input {self.input_shape}, got {tuple(x.shape[1:])}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, upstream: np.ndarray, input_grad: bool = True) -> np.ndarray | None:
        """Backpropagate; with ``input_grad=False`` a leading conv skips its unused input gradient."""
        for i in range(len(self.layers) - 1, 0, -1):
            upstream = self.layers[i].backward(upstream)
        first = self.layers[0]
        if not input_grad and isinstance(first, Conv2D):
            return first.backward(upstream, input_grad=False)
        return first.backward(upstream)

    def step(self, spec: OptimizerSpec) -> None:
        for layer in self.layers:
            optimizer_step(layer, spec)

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def clear_cache(self) -> None:
        for layer in self.layers:
            layer._cache = None

    def copy_weights_from(self, other: "Stack") -> None:
        for mine, theirs in zip(self.layers, other.layers):
            for name, w in theirs.params.items():
                mine.params[name][...] = w

    def parameters(self) -> list[tuple[Layer, str]]:
        return [(layer, name) for layer in self.layers for name in layer.params]


# ----------------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------------
def _write_tensor(fh: BinaryIO, label: str, arr: np.ndarray) -> None:
    dims = ",".join(str(d) for d in arr.shape) or "-"
    fh.write(f"tensor {label} {dims}\n".encode())
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_line(fh: BinaryIO) -> str:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError("unexpected end of checkpoint")
    try:
        return line[:-1].decode()
    except UnicodeDecodeError as exc:
        raise CheckpointError("binary data where a header line was expected") from exc


def _read_tensor(fh: BinaryIO, label: str) -> np.ndarray:
    parts = _read_line(fh).split(" ")
    if len(parts) != 3 or parts[0] != "tensor" or parts[1] != label:
        raise CheckpointError(f"expected tensor {label!r}, got {' '.join(parts)!r}")
    dims = () if parts[2] == "-" else tuple(int(d) for d in parts[2].split(","))
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise CheckpointError(f"tensor {label!r} truncated")
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(dims)


def write_layers(fh: BinaryIO, layers: Sequence[Layer]) -> None:
    fh.write(f"layers {len(layers)}\n".encode())
    for layer in layers:
        params = " ".join(f"{k}={v}" for k, v in layer.describe().items())
        fh.write(f"layer {layer.kind} {params}".rstrip().encode() + b"\n")
        for name in layer.params:
            _write_tensor(fh, name, layer.params[name])
        for name in layer.params:
            _write_tensor(fh, f"{name}.acc", layer.accumulators[name])


def read_layers_into(fh: BinaryIO, layers: Sequence[Layer]) -> None:
    """Load weights and accumulators into an already-built, structurally identical layer list."""
    head = _read_line(fh).split(" ")
    if head[0] != "layers" or len(head) != 2 or int(head[1]) != len(layers):
        raise CheckpointError(f"layer count mismatch: {' '.join(head)!r} vs {len(layers)}")
    for layer in layers:
        parts = _read_line(fh).split(" ")
        if parts[:2] != ["layer", layer.kind]:
            raise CheckpointError(f"expected layer {layer.kind}, got {' '.join(parts)!r}")
        found = dict(p.split("=", 1) for p in parts[2:])
        expected = {k: str(v) for k, v in layer.describe().items()}
        if found != expected:
            raise CheckpointError(f"{layer.kind} parameters differ: {found} vs {expected}")
        for name in layer.params:
            arr = _read_tensor(fh, name)
            if arr.shape != layer.params[name].shape:
                raise CheckpointError(f"{layer.kind}.{name}: shape {arr.shape} != {layer.params[name].shape}")
            layer.params[name][...] = arr
        for name in layer.params:
            arr = _read_tensor(fh, f"{name}.acc")
            if arr.shape != layer.accumulators[name].shape:
                raise CheckpointError(f"{layer.kind}.{name}.acc: bad shape {arr.shape}")
            layer.accumulators[name][...] = arr


def dumps_layers(layers: Sequence[Layer], preamble: str = "") -> bytes:
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_HEADER}\n".encode())
    if preamble:
        buf.write(f"{preamble}\n".encode())
    write_layers(buf, layers)
    return buf.getvalue()


# ----------------------------------------------------------------------------------
# Numerical gradient utilities
# ----------------------------------------------------------------------------------
def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor) over the whole tensor."""
    a, b = np.asarray(a, dtype=DTYPE).ravel(), np.asarray(b, dtype=DTYPE).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)

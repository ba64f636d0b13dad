"""Event predictor (Pnet), dual-stream action-value network (Qnet) and the glue around them."""
from __future__ import annotations

import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensorcore import (
    CHECKPOINT_HEADER,
    CheckpointError,
    Conv2D,
    FullyConnected,
    Layer,
    MaxPool2x2,
    OptimizerSpec,
    ReLU,
    ShapeError,
    Sigmoid,
    Stack,
    read_layers_into,
    write_layers,
)

N_ACTIONS = 4
ACTION_NAMES = ("W", "LTH", "H", "HS")
WAIT, LOOK, WAVE, HANDSHAKE = range(N_ACTIONS)
EVENT_NAMES = ("handshake", "eye_contact", "smile")
N_EVENTS = len(EVENT_NAMES)
HISTORY = 8
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ArchitecturePreset:
    """Layer plan shared by the Pnet trunk and each Qnet stream.

    ``convs`` lists ``(filters, kernel, stride)``; each conv is followed by ReLU
    and 2x2 max pooling. ``fc_units`` is the width of the first fully connected
    layer (FC1 of a Qnet stream, the image half of Pnet's FC1).
    """

    name: str
    height: int
    width: int
    convs: tuple[tuple[int, int, int], ...]
    fc_units: int = 256
    action_units: int = 256
    head_units: int = 128
    frames: int = HISTORY

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    def trunk_layers(self) -> list[Layer]:
        layers: list[Layer] = []
        for filters, kernel, stride in self.convs:
            layers += [Conv2D(filters, kernel, stride), ReLU(), MaxPool2x2()]
        layers += [FullyConnected(self.fc_units), ReLU()]
        return layers

    def feature_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes of the trunk, computed without allocating weights."""
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for layer in self.trunk_layers():
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def scaled(self, factor: float, **overrides) -> "ArchitecturePreset":
        """Same topology with filter/unit counts multiplied by ``factor`` (for cheap checks)."""
        s = lambda n: max(1, int(round(n * factor)))  # noqa: E731
        convs = tuple((s(f), k, st) for f, k, st in self.convs)
        return replace(
            self,
            name=f"{self.name}@{factor:g}",
            convs=convs,
            fc_units=s(self.fc_units),
            action_units=s(self.action_units),
            head_units=s(self.head_units),
            **overrides,
        )


PRESETS = {
    # 198x198 is the square input that leaves a 5x5 map before FC1
    "paper": ArchitecturePreset("paper", 198, 198, ((16, 9, 3), (32, 5, 1), (32, 5, 1))),
    "desk": ArchitecturePreset("desk", 32, 32, ((16, 5, 2), (32, 3, 1))),
}


def get_preset(name: str, resolution: int | None = None) -> ArchitecturePreset:
    try:
        preset = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown architecture preset {name!r}; choose from {sorted(PRESETS)}") from None
    if resolution is not None and resolution != preset.height:
        preset = replace(preset, height=resolution, width=resolution)
        preset.feature_shapes()  # type-check the chain
    return preset


def one_hot(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if actions.size and (actions.min() < 0 or actions.max() >= N_ACTIONS):
        raise ValueError(f"action ids must lie in 0..{N_ACTIONS - 1}")
    out = np.zeros((actions.size, N_ACTIONS))
    out[np.arange(actions.size), actions] = 1.0
    return out


def _batched(frames: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape == shape:
        frames = frames[None]
    if frames.shape[1:] != shape:
        raise ShapeError(f"expected frames of shape {shape} (optionally batched), got {frames.shape}")
    return frames


# ----------------------------------------------------------------------------------
# Pnet
# ----------------------------------------------------------------------------------
class PNetwork:
    """Action-conditional multi-label event predictor over the grayscale history."""

    def __init__(self, preset: ArchitecturePreset, rng: np.random.Generator | None = None):
        self.preset = preset
        self.trunk = Stack(preset.trunk_layers(), preset.input_shape, rng)
        self.encoder = Stack([FullyConnected(preset.action_units), ReLU()], (N_ACTIONS,), rng)
        joint = (preset.fc_units + preset.action_units,)
        self.head = Stack(
            [FullyConnected(preset.head_units), ReLU(), FullyConnected(N_EVENTS), Sigmoid()], joint, rng
        )

    @property
    def layers(self) -> list[Layer]:
        return self.trunk.layers + self.encoder.layers + self.head.layers

    def forward(self, grayscale: np.ndarray, actions) -> np.ndarray:
        """Event probabilities ``(N, 3)`` clamped to ``[1e-12, 1 - 1e-12]``."""
        gray = _batched(grayscale, self.preset.input_shape)
        acts = np.asarray(actions).reshape(-1)
        if acts.size != gray.shape[0]:
            raise ShapeError(f"{gray.shape[0]} frame stacks but {acts.size} actions")
        image = self.trunk.forward(gray)
        code = self.encoder.forward(one_hot(acts))
        out = self.head.forward(np.concatenate([image, code], axis=1))
        return np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)

    def backward(self, grad_probs: np.ndarray) -> None:
        g = self.head.backward(grad_probs)
        split = self.preset.fc_units
        self.trunk.backward(g[:, :split], input_grad=False)
        self.encoder.backward(g[:, split:], input_grad=False)

    def predict(self, grayscale, actions) -> np.ndarray:
        out = self.forward(grayscale, actions)
        self.clear_cache()
        return out

    def train_step(self, grayscale, actions, events, spec: OptimizerSpec) -> float:
        """One optimizer step on the batch-mean BCE; returns the pre-update loss."""
        probs = self.forward(grayscale, actions)
        loss, grad = bce_loss(events, probs)
        self.backward(grad / probs.shape[0])
        self.step(spec)
        return float(loss.mean())

    def step(self, spec: OptimizerSpec) -> None:
        for stack in (self.trunk, self.encoder, self.head):
            stack.step(spec)

    def clear_cache(self) -> None:
        for stack in (self.trunk, self.encoder, self.head):
            stack.clear_cache()


def pnet_forward(net: PNetwork, grayscale: np.ndarray, action: int) -> np.ndarray:
    """Probabilities for a single state-action pair, ordered (handshake, eye contact, smile)."""
    return net.predict(grayscale, [action])[0]


def bce_loss(e, ehat) -> tuple[np.ndarray, np.ndarray]:
    """Mean binary cross entropy over the 3 events and its gradient w.r.t. ``ehat``.

    Works on a single vector or a ``(N, 3)`` batch; the loss has one entry per row.
    """
    e = np.asarray(e, dtype=np.float64)
    ehat = np.clip(np.asarray(ehat, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    j = ehat.shape[-1]
    loss = -np.mean(e * np.log(ehat) + (1.0 - e) * np.log1p(-ehat), axis=-1)
    grad = (ehat - e) / (j * ehat * (1.0 - ehat))
    return loss, grad


# ----------------------------------------------------------------------------------
# Qnet
# ----------------------------------------------------------------------------------
def make_stream(preset: ArchitecturePreset, rng: np.random.Generator | None = None) -> Stack:
    return Stack(preset.trunk_layers() + [FullyConnected(N_ACTIONS)], preset.input_shape, rng)


class QNetwork:
    """Grayscale and depth streams, each with its own frozen target copy."""

    def __init__(self, preset: ArchitecturePreset, rng: np.random.Generator | None = None):
        self.preset = preset
        self.gray = make_stream(preset, rng)
        self.depth = make_stream(preset, rng)
        self.gray_target = make_stream(preset, None)
        self.depth_target = make_stream(preset, None)
        self.sync_target()

    @property
    def streams(self) -> tuple[tuple[str, Stack, Stack], ...]:
        return (("gray", self.gray, self.gray_target), ("depth", self.depth, self.depth_target))

    def sync_target(self) -> None:
        self.gray_target.copy_weights_from(self.gray)
        self.depth_target.copy_weights_from(self.depth)

    def q_values(self, grayscale, depth) -> tuple[np.ndarray, np.ndarray]:
        qg = qnet_stream_forward(self.gray, grayscale)
        qd = qnet_stream_forward(self.depth, depth)
        return qg, qd

    def act(self, grayscale, depth, normalization: str = "minmax") -> int:
        qg, qd = self.q_values(grayscale, depth)
        return fuse_and_select(qg[0], qd[0], normalization)


def qnet_stream_forward(stream: Stack, frames: np.ndarray) -> np.ndarray:
    """q-values ``(N, 4)`` from one stream; no state is retained for backward."""
    out = stream.forward(_batched(frames, stream.input_shape))
    stream.clear_cache()
    return out


def sync_target(net: QNetwork) -> None:
    net.sync_target()


def normalize_q(q: np.ndarray, method: str = "minmax") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if method == "minmax":
        lo, hi = q.min(axis=-1, keepdims=True), q.max(axis=-1, keepdims=True)
        span = hi - lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, (q - lo) / safe, 0.5)
    if method == "none":
        return q
    raise ValueError(f"unknown fusion normalisation {method!r}")


def fuse_and_select(q_gray, q_depth, normalization: str = "minmax") -> int:
    """Average of per-stream normalised q-values; argmax with lowest-index tiebreak."""
    fused = 0.5 * (normalize_q(q_gray, normalization) + normalize_q(q_depth, normalization))
    return int(np.argmax(fused))


def bellman_targets(rewards, next_frames, terminals, target_stream: Stack, gamma: float) -> np.ndarray:
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    q_next = qnet_stream_forward(target_stream, next_frames).max(axis=1)
    return np.where(terminals, rewards, rewards + gamma * q_next)


def bellman_from_q(rewards, q_next_max, terminals, gamma: float) -> np.ndarray:
    """The same recursion given precomputed ``max_a Q(s', a)`` values."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return np.where(np.asarray(terminals, dtype=bool), rewards, rewards + gamma * np.asarray(q_next_max))


def qnet_train_step(stream: Stack, frames, actions, targets, spec: OptimizerSpec) -> float:
    """One optimizer step on mean (B - Q(s, a))^2; only the taken action's output gets gradient."""
    frames = _batched(frames, stream.input_shape)
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    q = stream.forward(frames)
    rows = np.arange(q.shape[0])
    err = targets - q[rows, actions]
    grad = np.zeros_like(q)
    grad[rows, actions] = -2.0 * err / q.shape[0]
    stream.backward(grad, input_grad=False)
    stream.step(spec)
    return float(np.mean(err**2))


# ----------------------------------------------------------------------------------
# Serialisation
# ----------------------------------------------------------------------------------
ROLES = ("pnet", "qnet-gray", "qnet-depth", "targets")


def _preamble(preset: ArchitecturePreset, role: str) -> str:
    return f"preset={preset.name} role={role} height={preset.height} width={preset.width}"


def network_bytes(net, role: str) -> bytes:
    if role == "pnet":
        groups = [net.layers]
    elif role == "qnet-gray":
        groups = [net.gray.layers]
    elif role == "qnet-depth":
        groups = [net.depth.layers]
    elif role == "targets":
        groups = [net.gray_target.layers, net.depth_target.layers]
    else:
        raise ValueError(f"unknown role {role!r}")
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_HEADER}\n{_preamble(net.preset, role)}\n".encode())
    for layers in groups:
        write_layers(buf, layers)
    return buf.getvalue()


def load_network_bytes(data: bytes, net, role: str) -> None:
    buf = io.BytesIO(data)
    header = buf.readline()
    if header != f"{CHECKPOINT_HEADER}\n".encode():
        raise CheckpointError(f"bad checkpoint header {header[:32]!r}")
    pre = buf.readline().decode(errors="replace").rstrip("\n")
    expected = _preamble(net.preset, role)
    if pre != expected:
        raise CheckpointError(f"checkpoint preamble {pre!r} does not match {expected!r}")
    if role == "pnet":
        groups = [net.layers]
    elif role == "qnet-gray":
        groups = [net.gray.layers]
    elif role == "qnet-depth":
        groups = [net.depth.layers]
    else:
        groups = [net.gray_target.layers, net.depth_target.layers]
    for layers in groups:
        read_layers_into(buf, layers)
    if buf.read(1):
        raise CheckpointError("trailing bytes after checkpoint")


def read_preamble(path: str | Path) -> dict[str, str]:
    with open(path, "rb") as fh:
        header = fh.readline()
        if header != f"{CHECKPOINT_HEADER}\n".encode():
            raise CheckpointError(f"{path}: not an IMRL checkpoint")
        line = fh.readline().decode(errors="replace").strip()
    try:
        return dict(part.split("=", 1) for part in line.split())
    except ValueError:
        raise CheckpointError(f"{path}: malformed preamble {line!r}") from None


CHECKPOINT_FILES = {
    "pnet": "pnet.ckpt",
    "qnet-gray": "qnet-gray.ckpt",
    "qnet-depth": "qnet-depth.ckpt",
    "targets": "targets.ckpt",
}


def save_checkpoints(directory: str | Path, pnet: PNetwork, qnet: QNetwork) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for role, fname in CHECKPOINT_FILES.items():
        net = pnet if role == "pnet" else qnet
        (directory / fname).write_bytes(network_bytes(net, role))


def load_checkpoints(directory: str | Path, preset: ArchitecturePreset | None = None) -> tuple[PNetwork, QNetwork]:
    """Rebuild both networks from a checkpoint directory written by :func:`save_checkpoints`.

    Named presets are resolved from the preamble; pass ``preset`` for custom ones.
    """
    directory = Path(directory)
    meta = read_preamble(directory / CHECKPOINT_FILES["pnet"])
    if preset is None:
        try:
            preset = get_preset(meta["preset"], int(meta["height"]))
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{directory}: cannot resolve preset from {meta}") from exc
    pnet, qnet = PNetwork(preset), QNetwork(preset)
    for role, fname in CHECKPOINT_FILES.items():
        net = pnet if role == "pnet" else qnet
        load_network_bytes((directory / fname).read_bytes(), net, role)
    return pnet, qnet

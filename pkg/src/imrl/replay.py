"""Replay memory, minibuffer/minibatch sampling and the on-disk transition log."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

LOG_VERSION = 1


class NoDataError(RuntimeError):
    """Sampling was requested from an empty memory."""


class LogFormatError(ValueError):
    """A transition log directory is incomplete or malformed."""


class FrameArena:
    """Append-only store of 8-bit frames; states reference frames by index."""

    def __init__(self, height: int, width: int):
        self.height, self.width = height, width
        self._buf = np.zeros((64, height, width), dtype=np.uint8)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def add(self, frame: np.ndarray) -> int:
        frame = np.asarray(frame)
        if frame.shape != (self.height, self.width) or frame.dtype != np.uint8:
            raise ValueError(f"arena holds uint8 frames of shape {(self.height, self.width)}")
        if self._n == len(self._buf):
            grown = np.zeros((max(64, 2 * len(self._buf)), self.height, self.width), dtype=np.uint8)
            grown[: self._n] = self._buf[: self._n]
            self._buf = grown
        self._buf[self._n] = frame
        self._n += 1
        return self._n - 1

    @property
    def frames(self) -> np.ndarray:
        return self._buf[: self._n]

    @classmethod
    def from_frames(cls, frames: np.ndarray) -> "FrameArena":
        arena = cls(frames.shape[1], frames.shape[2])
        arena._buf = np.array(frames, dtype=np.uint8)
        arena._n = len(frames)
        return arena

    def gather(self, indices: np.ndarray) -> np.ndarray:
        """Frames as float64 in [0, 1]; ``indices`` of any shape."""
        return self.frames[np.asarray(indices)].astype(np.float64) / 255.0


@dataclass(frozen=True)
class Transition:
    """One step; frame stacks are 8 arena indices each, oldest first."""

    gray: tuple[int, ...]
    depth: tuple[int, ...]
    action: int
    next_events: tuple[int, int, int]
    next_gray: tuple[int, ...]
    next_depth: tuple[int, ...]
    terminal: bool
    episode: int
    step: int


class ReplayMemory:
    """FIFO-bounded memory of transitions sharing one frame arena."""

    def __init__(self, capacity: int, arena: FrameArena):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.arena = arena
        self._items: deque[Transition] = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self._items)

    def __getitem__(self, i: int) -> Transition:
        return self._items[i]

    def store(self, t: Transition) -> None:
        self._items.append(t)
        self.inserted += 1

    def snapshot(self) -> list[Transition]:
        return list(self._items)


def store(mem: ReplayMemory, t: Transition) -> None:
    mem.store(t)


class Minibuffer:
    """A uniform draw from memory, consumed in minibatches without replacement."""

    def __init__(self, transitions: Sequence[Transition]):
        self.transitions = list(transitions)
        self.cursor = 0

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.transitions)

    def next_minibatch(self, batch_size: int) -> list[Transition] | None:
        """Up to ``batch_size`` unseen transitions, or ``None`` once exhausted."""
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.exhausted:
            return None
        batch = self.transitions[self.cursor : self.cursor + batch_size]
        self.cursor += len(batch)
        return batch


def sample_minibuffer(mem: ReplayMemory, size: int, rng: np.random.Generator) -> Minibuffer:
    if len(mem) == 0:
        raise NoDataError("replay memory is empty")
    k = min(size, len(mem))
    picks = rng.choice(len(mem), size=k, replace=False)
    items = mem.snapshot()
    return Minibuffer([items[i] for i in picks])


def next_minibatch(buf: Minibuffer, batch_size: int) -> list[Transition] | None:
    return buf.next_minibatch(batch_size)


@dataclass
class Batch:
    """Dense arrays for a minibatch, ready for the networks."""

    gray: np.ndarray
    depth: np.ndarray
    actions: np.ndarray
    events: np.ndarray
    next_gray: np.ndarray
    next_depth: np.ndarray
    terminals: np.ndarray


def to_batch(arena: FrameArena, transitions: Sequence[Transition]) -> Batch:
    idx = np.array([t.gray + t.depth + t.next_gray + t.next_depth for t in transitions], dtype=np.int64)
    frames = arena.gather(idx)
    h = len(transitions[0].gray)
    return Batch(
        gray=frames[:, 0:h],
        depth=frames[:, h : 2 * h],
        next_gray=frames[:, 2 * h : 3 * h],
        next_depth=frames[:, 3 * h :],
        actions=np.array([t.action for t in transitions], dtype=np.int64),
        events=np.array([t.next_events for t in transitions], dtype=np.int8),
        terminals=np.array([t.terminal for t in transitions], dtype=bool),
    )


# ----------------------------------------------------------------------------------
# Transition log on disk
# ----------------------------------------------------------------------------------
def write_log(directory: str | Path, arena: FrameArena, transitions: Sequence[Transition], meta: dict) -> None:
    """Write ``meta``, ``frames.bin`` and ``transitions.log`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frames = arena.frames
    info = {
        "version": LOG_VERSION,
        "height": arena.height,
        "width": arena.width,
        "frames": len(frames),
        "transitions": len(transitions),
        **meta,
    }
    (directory / "meta").write_text("".join(f"{k} = {v}\n" for k, v in info.items()))
    (directory / "frames.bin").write_bytes(frames.tobytes(order="C"))
    lines = []
    for t in transitions:
        fields = [t.episode, t.step, t.action, *t.next_events, int(t.terminal)]
        fields += [*t.gray, *t.depth, *t.next_gray, *t.next_depth]
        lines.append(" ".join(str(int(v)) for v in fields))
    (directory / "transitions.log").write_text("".join(line + "\n" for line in lines))


def read_meta(directory: str | Path) -> dict[str, str]:
    path = Path(directory) / "meta"
    if not path.exists():
        raise LogFormatError(f"{directory}: missing meta")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def read_log(directory: str | Path) -> tuple[FrameArena, list[Transition], dict[str, str]]:
    directory = Path(directory)
    meta = read_meta(directory)
    try:
        h, w, count = int(meta["height"]), int(meta["width"]), int(meta["frames"])
    except (KeyError, ValueError) as exc:
        raise LogFormatError(f"{directory}: bad meta {meta}") from exc
    raw = (directory / "frames.bin").read_bytes()
    if len(raw) != h * w * count:
        raise LogFormatError(f"{directory}: frames.bin holds {len(raw)} bytes, expected {h * w * count}")
    arena = FrameArena.from_frames(np.frombuffer(raw, dtype=np.uint8).reshape(count, h, w))
    transitions = []
    for lineno, line in enumerate((directory / "transitions.log").read_text().splitlines(), 1):
        vals = [int(v) for v in line.split()]
        if len(vals) < 7 or (len(vals) - 7) % 4:
            raise LogFormatError(f"{directory}/transitions.log:{lineno}: malformed record")
        k = (len(vals) - 7) // 4
        stacks = vals[7:]
        transitions.append(
            Transition(
                gray=tuple(stacks[0:k]),
                depth=tuple(stacks[k : 2 * k]),
                next_gray=tuple(stacks[2 * k : 3 * k]),
                next_depth=tuple(stacks[3 * k :]),
                episode=vals[0],
                step=vals[1],
                action=vals[2],
                next_events=tuple(vals[3:6]),
                terminal=bool(vals[6]),
            )
        )
    if "transitions" in meta and int(meta["transitions"]) != len(transitions):
        raise LogFormatError(f"{directory}: meta announces {meta['transitions']} transitions, found {len(transitions)}")
    return arena, transitions, meta

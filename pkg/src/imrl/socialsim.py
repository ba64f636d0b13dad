"""A small deterministic social scene: pedestrians around a robot, rendered as 8-bit frames.

People walk towards the robot, stop, look at it or not, keep busy with something,
and eventually walk away. Each step the robot acts, the scene answers with three
binary events (handshake, eye contact, smile) drawn from an emission table keyed
by the scene's engagement condition, and a new grayscale/depth frame pair is
pushed into the 8-frame history.

The emission table encodes the assumption that people respond *predictably* to a
socially fitting action and ambiguously to anything else. A waved hand or an
offered handshake that does not fit the scene also unsettles people, which makes
their next response ambiguous too.
"""
from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .networks import HANDSHAKE, HISTORY, LOOK, N_ACTIONS, WAIT, WAVE
from .replay import FrameArena

NEAR_MAX = 1.2
MID_MAX = 3.0
D_MIN, D_MAX = 0.5, 6.0

CONDITIONS = ("absent", "disengaged", "engaged", "mild", "distant", "unsettled")
ORACLE_FOR_CONDITION = {
    "absent": WAIT,
    "disengaged": WAIT,
    "engaged": HANDSHAKE,
    "mild": LOOK,
    "distant": WAVE,
}


class SimStateError(RuntimeError):
    """The world was stepped after its episode ended."""


def zone_of(d: float) -> str:
    if d < NEAR_MAX:
        return "near"
    if d <= MID_MAX:
        return "mid"
    return "far"


@dataclass
class PersonState:
    present: bool = False
    d: float = D_MAX
    offset: float = 0.0
    gaze: str = "away"  # "at_robot" | "away"
    motion: str = "standing"  # "approaching" | "leaving" | "standing"
    busy: bool = False
    stop_at: float = 1.0
    shook: bool = False
    unsettled: int = 0

    @property
    def zone(self) -> str:
        return zone_of(self.d)

    @property
    def at_robot(self) -> bool:
        return self.gaze == "at_robot"


# ----------------------------------------------------------------------------------
# Emission table
# ----------------------------------------------------------------------------------
@dataclass(frozen=True)
class EventProbs:
    """Bernoulli parameters for one (condition, action) cell.

    The smile probability depends on whether a handshake fired. With
    ``exclusive=True`` and no handshake, at most one of eye contact and smile
    fires: eye contact with probability ``eye_contact``, smile with ``smile``.
    """

    handshake: float
    eye_contact: float
    smile_if_handshake: float
    smile: float
    exclusive: bool = False

    def __post_init__(self):
        for name in ("handshake", "eye_contact", "smile_if_handshake", "smile"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")
        if self.exclusive and self.eye_contact + self.smile > 1.0:
            raise ValueError("exclusive cells need eye_contact + smile <= 1")

    @property
    def expected_count(self) -> float:
        h = self.handshake
        return h + self.eye_contact + h * self.smile_if_handshake + (1 - h) * self.smile

    def event_marginals(self) -> tuple[float, float, float]:
        h = self.handshake
        return (h, self.eye_contact, h * self.smile_if_handshake + (1 - h) * self.smile)

    def outcome_probability(self, events) -> float:
        """Probability of an exact event triple."""
        hs, eye, smile = (int(x) for x in events)
        p = self.handshake if hs else 1 - self.handshake
        if self.exclusive and not hs:
            joint = {(1, 0): self.eye_contact, (0, 1): self.smile, (0, 0): 1 - self.eye_contact - self.smile}
            return p * joint.get((eye, smile), 0.0)
        p *= self.eye_contact if eye else 1 - self.eye_contact
        ps = self.smile_if_handshake if hs else self.smile
        return p * (ps if smile else 1 - ps)


SILENT = EventProbs(0.0, 0.0, 0.0, 0.0)
AMBIGUOUS = EventProbs(0.0, 0.4, 0.4, 0.4, exclusive=True)


def default_emission_table() -> dict[tuple[str, int], EventProbs]:
    fitting = {
        "engaged": EventProbs(0.98, 0.98, 0.98, 0.02),
        "mild": EventProbs(0.0, 0.98, 0.02, 0.02),
        "distant": EventProbs(0.0, 0.02, 0.98, 0.98),
        "disengaged": EventProbs(0.0, 0.02, 0.98, 0.98),
    }
    table = {}
    for action in range(N_ACTIONS):
        table["absent", action] = SILENT
        table["unsettled", action] = AMBIGUOUS
        for cond, probs in fitting.items():
            table[cond, action] = probs if ORACLE_FOR_CONDITION[cond] == action else AMBIGUOUS
    return table


# ----------------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------------
@dataclass
class SimConfig:
    persons_max: int = 3
    appear_prob: float = 0.05
    resolution: int = 32
    episode_steps: int = 1000
    speed: float = 0.3
    leave_speed: float = 1.0
    spawn_min: float = 3.5
    approach_prob: float = 0.95
    stop_near_prob: float = 0.9
    spawn_at_robot_prob: float = 0.2
    spawn_busy_prob: float = 0.0
    gaze_attract_prob: float = 0.3
    gaze_revert_prob: float = 0.1
    gaze_spontaneous_prob: float = 0.02
    busy_start_prob: float = 0.02
    busy_stop_prob: float = 0.1
    leave_prob: float = 0.02
    leave_after_handshake_prob: float = 0.2
    unsettle_steps: int = 1
    initial_persons: int = 1
    emission: dict = field(default_factory=default_emission_table)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not 1 <= self.persons_max <= 3:
            out.append("sim.persons_max must be 1..3")
        if self.resolution < 8:
            out.append("sim.resolution must be >= 8")
        if self.episode_steps < 1:
            out.append("sim.episode_steps must be >= 1")
        if self.unsettle_steps < 0:
            out.append("sim.unsettle_steps must be >= 0")
        if not 0 <= self.initial_persons <= self.persons_max:
            out.append("sim.initial_persons must be within 0..persons_max")
        for name in (
            "appear_prob", "approach_prob", "stop_near_prob", "spawn_at_robot_prob", "spawn_busy_prob",
            "gaze_attract_prob", "gaze_revert_prob", "gaze_spontaneous_prob", "busy_start_prob", "busy_stop_prob",
            "leave_prob", "leave_after_handshake_prob",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"sim.{name}={v} is not a probability")
        missing = [(c, a) for c in CONDITIONS for a in range(N_ACTIONS) if (c, a) not in self.emission]
        if missing:
            out.append(f"emission table lacks cells {missing[:3]}...")
        return out


# ----------------------------------------------------------------------------------
# Scene logic
# ----------------------------------------------------------------------------------
def visible_condition(persons: Iterable[PersonState]) -> str:
    """Engagement condition from what a camera could see, in decision-table order."""
    present = [p for p in persons if p.present]
    if not present:
        return "absent"
    if all(p.motion == "leaving" or p.busy for p in present):
        return "disengaged"
    if any(p.zone == "near" and p.at_robot and not p.busy for p in present):
        return "engaged"
    if any((p.zone == "near" and not p.at_robot) or (p.zone == "mid" and p.at_robot) for p in present):
        return "mild"
    if any(p.zone in ("mid", "far") and not p.at_robot and p.motion == "approaching" for p in present):
        return "distant"
    return "disengaged"


def emission_condition(persons: Iterable[PersonState]) -> str:
    persons = list(persons)
    if any(p.present and p.unsettled > 0 for p in persons):
        return "unsettled"
    return visible_condition(persons)


@dataclass
class State:
    """Eight most recent frames per modality, oldest first, as floats in [0, 1]."""

    gray: np.ndarray
    depth: np.ndarray
    gray_idx: tuple[int, ...] | None = None
    depth_idx: tuple[int, ...] | None = None


@dataclass
class WorldState:
    config: SimConfig
    rng: np.random.Generator
    persons: list[PersonState]
    step_count: int = 0
    done: bool = False
    gray_hist: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    depth_hist: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    gray_idx: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    depth_idx: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    arena: FrameArena | None = None

    @property
    def condition(self) -> str:
        return visible_condition(self.persons)

    def observe(self) -> State:
        gray = np.stack(self.gray_hist).astype(np.float64) / 255.0
        depth = np.stack(self.depth_hist).astype(np.float64) / 255.0
        if self.arena is None:
            return State(gray, depth)
        return State(gray, depth, tuple(self.gray_idx), tuple(self.depth_idx))


def _spawn(cfg: SimConfig, rng: np.random.Generator) -> PersonState:
    approaching = rng.random() < cfg.approach_prob
    near = rng.random() < cfg.stop_near_prob
    return PersonState(
        present=True,
        d=float(rng.uniform(cfg.spawn_min, D_MAX)),
        offset=float(rng.uniform(-0.3, 0.3)),
        gaze="at_robot" if rng.random() < cfg.spawn_at_robot_prob else "away",
        motion="approaching" if approaching else "standing",
        busy=bool(rng.random() < cfg.spawn_busy_prob),
        stop_at=float(rng.uniform(0.6, 1.0) if near else rng.uniform(1.6, 2.6)),
    )


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def _push_frames(world: WorldState, copies: int = 1) -> None:
    gray, depth = render(world)
    g8, d8 = quantize(gray), quantize(depth)
    gi = di = -1
    if world.arena is not None:
        gi, di = world.arena.add(g8), world.arena.add(d8)
    for _ in range(copies):
        world.gray_hist.append(g8)
        world.depth_hist.append(d8)
        world.gray_idx.append(gi)
        world.depth_idx.append(di)


def reset(seed: int, config: SimConfig | None = None, arena: FrameArena | None = None) -> tuple[WorldState, State]:
    cfg = config or SimConfig()
    rng = np.random.default_rng(seed)
    persons = [PersonState() for _ in range(cfg.persons_max)]
    for i in range(cfg.initial_persons):
        persons[i] = _spawn(cfg, rng)
    world = WorldState(cfg, rng, persons, arena=arena)
    _push_frames(world, copies=HISTORY)
    return world, world.observe()


def oracle_action(world: WorldState) -> int:
    """Socially fitting action for the visible scene (first matching rule wins)."""
    return ORACLE_FOR_CONDITION[world.condition]


def draw_events(probs: EventProbs, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(3)
    hs = int(u[0] < probs.handshake)
    if probs.exclusive and not hs:
        eye = int(u[1] < probs.eye_contact)
        smile = int(probs.eye_contact <= u[1] < probs.eye_contact + probs.smile)
        return np.array([hs, eye, smile], dtype=np.int8)
    eye = int(u[1] < probs.eye_contact)
    smile = int(u[2] < (probs.smile_if_handshake if hs else probs.smile))
    return np.array([hs, eye, smile], dtype=np.int8)


def _advance(world: WorldState, action: int, unsettling: bool) -> None:
    cfg, rng = world.config, world.rng
    for i, p in enumerate(world.persons):
        if not p.present:
            if rng.random() < cfg.appear_prob:
                world.persons[i] = _spawn(cfg, rng)
            continue
        if p.unsettled > 0:
            p.unsettled -= 1
        if unsettling:
            p.unsettled = cfg.unsettle_steps
        # motion
        if p.motion == "approaching":
            p.d = max(p.d - cfg.speed, p.stop_at)
            if p.d <= p.stop_at:
                p.motion = "standing"
        elif p.motion == "standing":
            leave = cfg.leave_after_handshake_prob if p.shook else cfg.leave_prob
            if rng.random() < leave:
                p.motion = "leaving"
        else:
            p.d += cfg.leave_speed
        p.shook = False
        if p.motion == "leaving":
            p.gaze = "away"
            if p.d > D_MAX:
                world.persons[i] = PersonState()
                continue
        else:
            r = rng.random()
            if p.at_robot:
                if r < cfg.gaze_revert_prob:
                    p.gaze = "away"
            else:
                attract = cfg.gaze_attract_prob if action in (LOOK, WAVE) else cfg.gaze_spontaneous_prob
                if r < attract:
                    p.gaze = "at_robot"
        if rng.random() < (cfg.busy_stop_prob if p.busy else cfg.busy_start_prob):
            p.busy = not p.busy


def step(world: WorldState, action: int) -> tuple[State, np.ndarray, bool]:
    """Execute ``action``; returns the next state, the observed events and the terminal flag."""
    if world.done:
        raise SimStateError("step() called on a finished episode; call reset()")
    if not 0 <= int(action) < N_ACTIONS:
        raise ValueError(f"invalid action {action}")
    action = int(action)
    cfg = world.config
    fitting = oracle_action(world)
    probs = cfg.emission[emission_condition(world.persons), action]
    events = draw_events(probs, world.rng)
    unsettling = action in (WAVE, HANDSHAKE) and action != fitting and world.condition != "absent"
    engaged_before = [p.present and p.zone == "near" and p.at_robot and not p.busy for p in world.persons]
    _advance(world, action, unsettling)
    if events[0]:
        for p, was in zip(world.persons, engaged_before):
            if p.present and was:
                p.shook = True
    _push_frames(world)
    world.step_count += 1
    world.done = world.step_count >= cfg.episode_steps
    return world.observe(), events, world.done


# ----------------------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------------------
HEAD_AT_ROBOT, HEAD_AWAY, BODY, PROP = 1.0, 0.6, 0.5, 0.8
HEIGHT_SCALE = 0.55  # person height in frame heights at d = 1 m
HEAD_FRACTION = 0.3


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, edges + 1) - np.maximum(lo, edges), 0.0, 1.0)


def _paint(frame: np.ndarray, value: float, top: float, bottom: float, left: float, right: float) -> np.ndarray:
    """Composite an axis-aligned box with area-weighted edges; returns its coverage."""
    h, w = frame.shape
    cov = np.outer(_coverage(top, bottom, h), _coverage(left, right, w))
    frame *= 1.0 - cov
    frame += value * cov
    return cov


def person_boxes(p: PersonState, h: int, w: int) -> list[tuple[str, float, float, float, float]]:
    ph = HEIGHT_SCALE * h / p.d
    pw = 0.4 * ph
    cx = w / 2 + p.offset * w
    top = h / 2 - ph / 2
    head_bottom = top + HEAD_FRACTION * ph
    boxes = [
        ("head", top, head_bottom, cx - pw / 2, cx + pw / 2),
        ("body", head_bottom, top + ph, cx - pw / 2, cx + pw / 2),
    ]
    if p.busy:
        mid = top + 0.55 * ph
        boxes.append(("prop", mid - 0.15 * ph, mid + 0.15 * ph, cx + pw / 2, cx + pw))
    return boxes


def render(world: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Grayscale and depth frames (float, [0, 1]) of the current scene; far people drawn first."""
    n = world.config.resolution
    gray = np.zeros((n, n))
    depth = np.zeros((n, n))
    for p in sorted((p for p in world.persons if p.present), key=lambda p: -p.d):
        dval = 1.0 - p.d / D_MAX
        for part, top, bottom, left, right in person_boxes(p, n, n):
            if part == "head":
                value = HEAD_AT_ROBOT if p.at_robot else HEAD_AWAY
            else:
                value = PROP if part == "prop" else BODY
            _paint(gray, value, top, bottom, left, right)
            _paint(depth, dval, top, bottom, left, right)
    return gray, depth


def scene(persons: Iterable[PersonState], config: SimConfig | None = None, seed: int = 0) -> WorldState:
    """A world holding exactly ``persons`` (for tests and inspection)."""
    cfg = config or SimConfig()
    persons = [replace(p) for p in persons]
    persons += [PersonState() for _ in range(cfg.persons_max - len(persons))]
    world = WorldState(cfg, np.random.default_rng(seed), persons)
    _push_frames(world, copies=HISTORY)
    return world


# ----------------------------------------------------------------------------------
# Discretised state grid
# ----------------------------------------------------------------------------------
ZONE_DISTANCE = {"near": 0.8, "mid": 2.0, "far": 4.5}


def person_grid(include_unsettled: bool = True) -> list[PersonState]:
    """Absent plus every (zone, gaze, motion, busy[, unsettled]) combination."""
    out = [PersonState()]
    unsettled = (0, 1) if include_unsettled else (0,)
    for zone, gaze, motion, busy, u in itertools.product(
        ZONE_DISTANCE, ("at_robot", "away"), ("approaching", "leaving", "standing"), (False, True), unsettled
    ):
        out.append(PersonState(True, ZONE_DISTANCE[zone], 0.0, gaze, motion, busy, unsettled=u))
    return out


def world_grid(persons_max: int = 3, include_unsettled: bool = True) -> Iterable[tuple[PersonState, ...]]:
    """Every multiset of ``persons_max`` grid persons (scene logic is order-free)."""
    return itertools.combinations_with_replacement(person_grid(include_unsettled), persons_max)

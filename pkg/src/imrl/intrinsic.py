"""Prediction-based rewards: binarise Pnet output, count matches, map the count to a reward."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import HANDSHAKE

# reward for 0, 1, 2, 3 correctly predicted events
REWARD_TABLES: dict[str, tuple[float, float, float, float]] = {
    "strict": (-0.1, -0.1, -0.1, 1.0),
    "neutral": (-0.1, 0.0, 0.0, 1.0),
    "kind": (-0.1, 0.8, 0.9, 1.0),
    "neutral_p0": (0.0, 0.0, 0.0, 1.0),
    "neutral_p01": (-0.1, 0.0, 0.0, 1.0),
    "neutral_p02": (-0.2, 0.0, 0.0, 1.0),
    "neutral_p05": (-0.5, 0.0, 0.0, 1.0),
    "neutral_p1": (-1.0, 0.0, 0.0, 1.0),
}
PENALTY_SWEEP = ("neutral_p0", "neutral_p01", "neutral_p02", "neutral_p05", "neutral_p1")
REWARD_PRESETS = tuple(REWARD_TABLES) + ("direct",)

DIRECT_SUCCESS = 1.0
DIRECT_FAILURE = -0.1


@dataclass(frozen=True)
class RewardFunction:
    name: str
    kind: str  # "intrinsic" | "direct"
    table: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.kind == "intrinsic":
            if self.table is None or len(self.table) != 4:
                raise ValueError("intrinsic reward needs a 4-entry table")
            if self.table[3] != max(self.table):
                raise ValueError("the all-correct entry must be the table maximum")
        elif self.kind != "direct":
            raise ValueError(f"unknown reward kind {self.kind!r}")

    @property
    def needs_predictor(self) -> bool:
        return self.kind == "intrinsic"


def reward_function(name: str) -> RewardFunction:
    if name == "direct":
        return RewardFunction("direct", "direct")
    try:
        return RewardFunction(name, "intrinsic", REWARD_TABLES[name])
    except KeyError:
        raise ValueError(f"unknown reward preset {name!r}; choose from {', '.join(REWARD_PRESETS)}") from None


@dataclass(frozen=True)
class PredictionOutcome:
    rounded: tuple[int, int, int]
    correct: tuple[bool, bool, bool]

    @property
    def correct_count(self) -> int:
        return sum(self.correct)


def round_predictions(ehat) -> np.ndarray:
    """Binarise probabilities at 0.5 (ties round up). Vectorised over leading axes."""
    return (np.asarray(ehat, dtype=np.float64) >= 0.5).astype(np.int8)


def count_correct(predicted, actual) -> np.ndarray | int:
    hits = (np.asarray(predicted) == np.asarray(actual)).sum(axis=-1)
    return int(hits) if np.ndim(hits) == 0 else hits


def prediction_outcome(ehat, actual) -> PredictionOutcome:
    rounded = round_predictions(ehat)
    correct = tuple(bool(x) for x in rounded == np.asarray(actual))
    return PredictionOutcome(tuple(int(x) for x in rounded), correct)


def compute_reward(fn: RewardFunction, count=None, action=None, events=None):
    """Scalar or vectorised reward.

    Intrinsic presets look up ``count``; the direct baseline needs ``action`` and
    the observed ``events`` (handshake bit first).
    """
    if fn.kind == "intrinsic":
        counts = np.asarray(count)
        if counts.size and (counts.min() < 0 or counts.max() > 3):
            raise ValueError("correct count must lie in 0..3")
        out = np.asarray(fn.table, dtype=np.float64)[counts]
    else:
        act = np.asarray(action)
        shook = np.asarray(events)[..., 0].astype(bool)
        out = np.where(act == HANDSHAKE, np.where(shook, DIRECT_SUCCESS, DIRECT_FAILURE), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def rewards_for_batch(fn: RewardFunction, probs, actions, events) -> tuple[np.ndarray, np.ndarray]:
    """Rewards and correct counts for a minibatch; ``probs`` may be None for the direct baseline."""
    events = np.asarray(events)
    if fn.kind == "intrinsic":
        counts = count_correct(round_predictions(probs), events)
        return compute_reward(fn, counts), np.asarray(counts)
    counts = np.full(len(events), -1) if probs is None else count_correct(round_predictions(probs), events)
    return compute_reward(fn, action=actions, events=events), np.asarray(counts)

"""Evaluation battery: rollouts against the oracle, F1/confusion metrics, handshake ratio, Pnet accuracy."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import socialsim
from .intrinsic import count_correct, reward_function, round_predictions, compute_reward
from .networks import ACTION_NAMES, EVENT_NAMES, HANDSHAKE, N_ACTIONS, fuse_and_select
from .replay import FrameArena, Transition, to_batch

POLICIES = ("model", "random", "oracle", "model-gray-only", "model-depth-only")
MODEL_POLICIES = ("model", "model-gray-only", "model-depth-only")


class EmptyHoldoutError(ValueError):
    """Accuracy was requested on an empty held-out set."""


@dataclass(frozen=True)
class EvalRecord:
    step: int
    agent_action: int
    oracle_action: int
    events: tuple[int, int, int]
    reward: float
    correct_count: int
    state: socialsim.State | None = None


class TablePredictor:
    """Event predictor that knows the simulator's emission table.

    It sees only the visible engagement condition, not the hidden unsettled flag,
    and predicts each event's rounded marginal probability.
    """

    def __init__(self, emission: dict):
        self.emission = emission

    def predict_world(self, world: socialsim.WorldState, action: int) -> np.ndarray:
        probs = self.emission[socialsim.visible_condition(world.persons), action]
        return np.array(probs.event_marginals())


def select_action(q_gray: np.ndarray, q_depth: np.ndarray, policy: str, fusion: str = "minmax") -> int:
    if policy == "model":
        return fuse_and_select(q_gray, q_depth, fusion)
    if policy == "model-gray-only":
        return fuse_and_select(q_gray, q_gray, fusion)
    if policy == "model-depth-only":
        return fuse_and_select(q_depth, q_depth, fusion)
    raise ValueError(f"{policy!r} is not a model policy")


def evaluate_policy(
    policy: str,
    seed: int,
    steps: int,
    sim: socialsim.SimConfig | None = None,
    qnet=None,
    pnet=None,
    reward: str = "neutral",
    fusion: str = "minmax",
    keep_states: bool = False,
) -> list[EvalRecord]:
    """Greedy rollout of ``policy`` for ``steps`` steps in a world seeded by ``seed``.

    Rewards use ``pnet`` when given, otherwise a :class:`TablePredictor`.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if policy in MODEL_POLICIES and qnet is None:
        raise ValueError(f"policy {policy!r} needs a trained Qnet")
    sim = replace(sim or socialsim.SimConfig(), episode_steps=steps)
    fn = reward_function(reward)
    table = TablePredictor(sim.emission)
    world, state = socialsim.reset(seed, sim)
    rng = np.random.default_rng([seed, 0x5EED])
    records = []
    for t in range(steps):
        oracle = socialsim.oracle_action(world)
        if policy == "oracle":
            action = oracle
        elif policy == "random":
            action = int(rng.integers(N_ACTIONS))
        else:
            qg, qd = qnet.q_values(state.gray, state.depth)
            action = select_action(qg[0], qd[0], policy, fusion)
        if pnet is not None:
            probs = pnet.predict(state.gray, [action])[0]
        else:
            probs = table.predict_world(world, action)
        prev = state
        state, events, _ = socialsim.step(world, action)
        count = int(count_correct(round_predictions(probs), events))
        if fn.kind == "intrinsic":
            r = compute_reward(fn, count)
        else:
            r = compute_reward(fn, action=action, events=events)
        records.append(
            EvalRecord(t, action, oracle, tuple(int(e) for e in events), float(r), count, prev if keep_states else None)
        )
    return records


# ----------------------------------------------------------------------------------
# Metrics
# ----------------------------------------------------------------------------------
def _confusion(records: Sequence[EvalRecord]) -> np.ndarray:
    """4x4 counts, rows = oracle action, columns = agent action."""
    m = np.zeros((N_ACTIONS, N_ACTIONS), dtype=np.int64)
    for r in records:
        m[r.oracle_action, r.agent_action] += 1
    return m


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def f1_scores(records: Sequence[EvalRecord]) -> dict[str, float]:
    """Per-action F1 with the oracle as ground truth, plus their unweighted mean as ``overall``."""
    if not records:
        raise ValueError("f1_scores needs at least one record")
    m = _confusion(records)
    out = {}
    for a, name in enumerate(ACTION_NAMES):
        tp = m[a, a]
        precision = _ratio(tp, m[:, a].sum())
        recall = _ratio(tp, m[a, :].sum())
        out[name] = _ratio(2 * precision * recall, precision + recall)
    out["overall"] = float(np.mean([out[n] for n in ACTION_NAMES]))
    return out


def confusion_metrics(records: Sequence[EvalRecord]) -> dict:
    """One-vs-rest TPR/TNR/FPR/FNR/accuracy per action; zero denominators give 0."""
    if not records:
        raise ValueError("confusion_metrics needs at least one record")
    m = _confusion(records)
    total = m.sum()
    out: dict = {}
    for a, name in enumerate(ACTION_NAMES):
        tp = m[a, a]
        fn = m[a, :].sum() - tp
        fp = m[:, a].sum() - tp
        tn = total - tp - fn - fp
        out[name] = {
            "TPR": _ratio(tp, tp + fn),
            "TNR": _ratio(tn, tn + fp),
            "FPR": _ratio(fp, tn + fp),
            "FNR": _ratio(fn, tp + fn),
            "Accuracy": _ratio(tp + tn, total),
        }
    out["accuracy"] = _ratio(np.trace(m), total)
    return out


def handshake_ratio(records: Iterable[EvalRecord]) -> float | None:
    attempts = [r for r in records if r.agent_action == HANDSHAKE]
    if not attempts:
        return None
    return sum(r.events[0] for r in attempts) / len(attempts)


def cumulative_reward(records: Iterable[EvalRecord]) -> float:
    return float(sum(r.reward for r in records))


@dataclass(frozen=True)
class PnetAccuracy:
    per_event: tuple[float, float, float]
    all_events: float
    baseline: tuple[float, float, float]
    n: int

    def as_dict(self) -> dict[str, float]:
        out = {f"pnet_acc_{e}": a for e, a in zip(EVENT_NAMES, self.per_event)}
        out.update({f"pnet_base_{e}": b for e, b in zip(EVENT_NAMES, self.baseline)})
        out["pnet_acc_all"] = self.all_events
        return out


def pnet_accuracy(pnet, arena: FrameArena, transitions: Sequence[Transition], batch: int = 250) -> PnetAccuracy:
    """Rounded-prediction accuracy per event and for all three jointly, plus majority-class baselines."""
    if not transitions:
        raise EmptyHoldoutError("held-out set is empty")
    hits = []
    labels = []
    for i in range(0, len(transitions), batch):
        b = to_batch(arena, transitions[i : i + batch])
        pred = round_predictions(pnet.predict(b.gray, b.actions))
        hits.append(pred == b.events)
        labels.append(b.events)
    hit = np.concatenate(hits)
    lab = np.concatenate(labels)
    rate = lab.mean(axis=0)
    return PnetAccuracy(
        per_event=tuple(float(x) for x in hit.mean(axis=0)),
        all_events=float(hit.all(axis=1).mean()),
        baseline=tuple(float(x) for x in np.maximum(rate, 1 - rate)),
        n=len(transitions),
    )


# ----------------------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------------------
@dataclass
class MetricsReport:
    policy: str
    seed: int
    steps: int
    reward_preset: str
    train_reward: str
    cumulative_reward: float
    f1: dict
    confusion: dict
    handshake_ratio: float | None
    pnet: PnetAccuracy | None = None

    def row(self) -> dict[str, object]:
        row: dict[str, object] = {
            "train_reward": self.train_reward,
            "policy": self.policy,
            "seed": self.seed,
            "steps": self.steps,
            "reward_preset": self.reward_preset,
            "cumulative_reward": self.cumulative_reward,
        }
        for name in ACTION_NAMES:
            row[f"f1_{name}"] = self.f1[name]
        row["f1_overall"] = self.f1["overall"]
        for name in ACTION_NAMES:
            for k, v in self.confusion[name].items():
                row[f"{k.lower()}_{name}"] = v
        row["accuracy"] = self.confusion["accuracy"]
        row["handshake_ratio"] = self.handshake_ratio
        pn = self.pnet.as_dict() if self.pnet is not None else {}
        for e in EVENT_NAMES:
            row[f"pnet_acc_{e}"] = pn.get(f"pnet_acc_{e}")
        row["pnet_acc_all"] = pn.get("pnet_acc_all")
        for e in EVENT_NAMES:
            row[f"pnet_base_{e}"] = pn.get(f"pnet_base_{e}")
        return row


REPORT_COLUMNS = tuple(
    MetricsReport(
        "", 0, 0, "", "", 0.0,
        {**{n: 0.0 for n in ACTION_NAMES}, "overall": 0.0},
        {**{n: dict.fromkeys(("TPR", "TNR", "FPR", "FNR", "Accuracy"), 0.0) for n in ACTION_NAMES}, "accuracy": 0.0},
        None,
    ).row()
)


def summarize(
    records: Sequence[EvalRecord],
    policy: str,
    seed: int,
    reward_preset: str,
    train_reward: str = "none",
    pnet: PnetAccuracy | None = None,
) -> MetricsReport:
    return MetricsReport(
        policy=policy,
        seed=seed,
        steps=len(records),
        reward_preset=reward_preset,
        train_reward=train_reward,
        cumulative_reward=cumulative_reward(records),
        f1=f1_scores(records),
        confusion=confusion_metrics(records),
        handshake_ratio=handshake_ratio(records),
        pnet=pnet,
    )


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_csv(reports: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for rep in reports:
        row = rep.row()
        w.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else float("nan")


def report_text(reports: Sequence[MetricsReport]) -> str:
    """Plain-text tables: Pnet accuracy, F1 per policy, confusion rates, cumulative reward."""
    policies = list(dict.fromkeys(r.policy for r in reports))
    by = {p: [r for r in reports if r.policy == p] for p in policies}
    lines = []
    pn = next((r.pnet for r in reports if r.pnet is not None), None)
    if pn is not None:
        lines.append(f"Pnet accuracy on {pn.n} held-out transitions (%)")
        lines.append(f"{'':<14}{'All':>8}" + "".join(f"{e:>13}" for e in EVENT_NAMES))
        lines.append(f"{'Pnet':<14}{100 * pn.all_events:>8.1f}" + "".join(f"{100 * a:>13.1f}" for a in pn.per_event))
        lines.append(f"{'majority':<14}{'':>8}" + "".join(f"{100 * b:>13.1f}" for b in pn.baseline))
        lines.append("")
    lines.append("F1 against the oracle (mean over seeds)")
    lines.append(f"{'':<10}" + "".join(f"{p:>18}" for p in policies))
    for name in (*ACTION_NAMES, "overall"):
        lines.append(f"{name:<10}" + "".join(f"{_mean(r.f1[name] for r in by[p]):>18.3f}" for p in policies))
    hs = [_mean(r.handshake_ratio for r in by[p]) for p in policies]
    lines.append(f"{'HS ratio':<10}" + "".join(f"{'n/a' if np.isnan(h) else f'{h:.3f}':>18}" for h in hs))
    lines.append("")
    for p in policies:
        lines.append(f"Confusion rates: {p}")
        lines.append(f"{'':<6}" + "".join(f"{k:>10}" for k in ("TPR", "TNR", "FPR", "FNR", "Accuracy")))
        for name in ACTION_NAMES:
            vals = [_mean(r.confusion[name][k] for r in by[p]) for k in ("TPR", "TNR", "FPR", "FNR", "Accuracy")]
            lines.append(f"{name:<6}" + "".join(f"{v:>10.3f}" for v in vals))
        lines.append("")
    lines.append("Cumulative reward")
    seeds = sorted({r.seed for r in reports})
    lines.append(f"{'seed':<8}" + "".join(f"{p:>18}" for p in policies))
    for s in seeds:
        cells = []
        for p in policies:
            hit = [r.cumulative_reward for r in by[p] if r.seed == s]
            cells.append(f"{hit[0]:>18.1f}" if hit else f"{'':>18}")
        lines.append(f"{s:<8}" + "".join(cells))
    return "\n".join(lines) + "\n"


def write_report(directory: str | Path, reports: Sequence[MetricsReport]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "report.csv").write_text(report_csv(reports))
    (directory / "report.txt").write_text(report_text(reports))


def read_report_rows(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader.fieldnames or []), list(reader)


def sweep_rows(rows: Sequence[dict[str, str]], policy: str = "model") -> list[dict[str, object]]:
    """Mean overall F1 and cumulative reward per training reward preset, for one policy."""
    presets = list(dict.fromkeys(r["train_reward"] for r in rows if r["policy"] == policy))
    out = []
    for preset in presets:
        hit = [r for r in rows if r["policy"] == policy and r["train_reward"] == preset]
        out.append(
            {
                "train_reward": preset,
                "policy": policy,
                "seeds": len(hit),
                "f1_overall": float(np.mean([float(r["f1_overall"]) for r in hit])),
                "cumulative_reward": float(np.mean([float(r["cumulative_reward"]) for r in hit])),
            }
        )
    return out

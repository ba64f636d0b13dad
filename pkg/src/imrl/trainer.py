"""Training loop: epsilon-greedy data generation followed by replayed minibatch learning."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import socialsim
from .intrinsic import REWARD_PRESETS, reward_function, rewards_for_batch
from .networks import ACTION_NAMES, N_ACTIONS, PNetwork, QNetwork, get_preset, qnet_train_step, bellman_targets
from .networks import save_checkpoints
from .replay import FrameArena, NoDataError, ReplayMemory, Transition, sample_minibuffer, to_batch, write_log
from .tensorcore import OptimizerSpec


class ConfigError(ValueError):
    """Invalid run configuration; ``problems`` lists one message per offending field."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class TrainerConfig:
    episodes: int = 14
    steps: int = 1000
    capacity: int = 0  # 0: keep every transition of the run
    minibuffer: int = 2000
    minibatch: int = 25
    replays: int = 10
    sync_every: int = 1
    gamma: float = 0.9
    learning_rate: float = 0.00025
    pnet_learning_rate: float | None = None
    qnet_learning_rate: float | None = None
    rmsprop_decay: float = 0.95
    rmsprop_epsilon: float = 1e-6
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_horizon: int = 28000
    reward: str = "neutral"
    preset: str = "desk"
    fusion: str = "minmax"
    holdout_episodes: int = 1
    seed: int = 0
    sim: socialsim.SimConfig = field(default_factory=socialsim.SimConfig)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        if self.sim.episode_steps != self.steps:
            self.sim = replace(self.sim, episode_steps=self.steps)

    def problems(self) -> list[str]:
        out = []
        for name in ("steps", "minibuffer", "minibatch", "sync_every", "epsilon_horizon"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive")
        for name in ("episodes", "replays", "capacity", "holdout_episodes"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        if not 0.0 < self.gamma <= 1.0:
            out.append("gamma must lie in (0, 1]")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            out.append("need 0 <= epsilon_end <= epsilon_start <= 1")
        for name in ("learning_rate", "pnet_learning_rate", "qnet_learning_rate"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                out.append(f"{name} must be positive")
        if not 0.0 <= self.rmsprop_decay < 1.0:
            out.append("rmsprop_decay must lie in [0, 1)")
        if self.rmsprop_epsilon <= 0:
            out.append("rmsprop_epsilon must be positive")
        if self.reward not in REWARD_PRESETS:
            out.append(f"reward must be one of {', '.join(REWARD_PRESETS)}")
        if self.fusion not in ("minmax", "none"):
            out.append("fusion must be minmax or none")
        try:
            get_preset(self.preset, self.sim.resolution)
        except ValueError as exc:
            out.append(f"preset: {exc}")
        return out

    @property
    def pnet_optimizer(self) -> OptimizerSpec:
        return OptimizerSpec("sgd", self.pnet_learning_rate or self.learning_rate)

    @property
    def qnet_optimizer(self) -> OptimizerSpec:
        return OptimizerSpec(
            "rmsprop", self.qnet_learning_rate or self.learning_rate, self.rmsprop_decay, self.rmsprop_epsilon
        )

    @property
    def memory_capacity(self) -> int:
        return self.capacity or max(1, self.episodes * self.steps)

    @property
    def architecture(self):
        return get_preset(self.preset, self.sim.resolution)


# ----------------------------------------------------------------------------------
# Config files: flat "key = value" lines
# ----------------------------------------------------------------------------------
_SCALAR_KEYS = {f.name: f for f in fields(TrainerConfig) if f.name != "sim"}
_SIM_KEYS = {f.name: f for f in fields(socialsim.SimConfig) if f.name != "emission"}
_OPTIONAL_FLOATS = {"pnet_learning_rate", "qnet_learning_rate"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            problems.append(f"{source}:{lineno}: expected 'key = value'")
            continue
        key = key.strip()
        if key in values:
            problems.append(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    if problems:
        raise ConfigError(problems)
    return values


def _convert(name: str, text: str, kind) -> object:
    kind = str(kind)
    if "int" in kind and "float" not in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def _parse_emission(key: str, value: str):
    parts = key.split(".")
    if len(parts) != 3 or parts[1] not in socialsim.CONDITIONS or parts[2] not in ACTION_NAMES:
        raise ValueError(f"emission keys look like emission.<{'|'.join(socialsim.CONDITIONS)}>.<W|LTH|H|HS>")
    tokens = value.replace(",", " ").split()
    exclusive = bool(tokens) and tokens[-1] == "exclusive"
    if exclusive:
        tokens = tokens[:-1]
    if len(tokens) != 4:
        raise ValueError(
            "expected handshake, eye_contact, smile_if_handshake, smile and an optional 'exclusive' marker"
        )
    probs = [float(v) for v in tokens]
    return (parts[1], ACTION_NAMES.index(parts[2])), socialsim.EventProbs(*probs, exclusive=exclusive)


def build_config(values: dict[str, str], base: TrainerConfig | None = None) -> TrainerConfig:
    """Apply string ``values`` on top of ``base`` (defaults when omitted); unknown keys are errors."""
    base = base or TrainerConfig()
    top: dict[str, object] = {}
    sim: dict[str, object] = {}
    emission = dict(base.sim.emission)
    problems = []
    for key, text in values.items():
        try:
            if key.startswith("emission."):
                cell, probs = _parse_emission(key, text)
                emission[cell] = probs
            elif key.startswith("sim."):
                name = key[4:]
                if name not in _SIM_KEYS:
                    raise KeyError(key)
                sim[name] = _convert(name, text, _SIM_KEYS[name].type)
            elif key in _SCALAR_KEYS:
                if key in _OPTIONAL_FLOATS and text.lower() in ("", "none"):
                    top[key] = None
                else:
                    top[key] = _convert(key, text, _SCALAR_KEYS[key].type)
            else:
                raise KeyError(key)
        except KeyError:
            problems.append(f"{key}: unknown key")
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if "episode_steps" in sim:
        if "steps" in top and top["steps"] != sim["episode_steps"]:
            problems.append("sim.episode_steps: conflicts with steps")
        top.setdefault("steps", sim["episode_steps"])
    if problems:
        raise ConfigError(problems)
    try:
        sim_cfg = replace(base.sim, emission=emission, **sim)
    except ValueError as exc:
        raise ConfigError([str(exc)]) from None
    sim_cfg.episode_steps = int(top.get("steps", base.steps))
    return replace(base, sim=sim_cfg, **top)


def load_config(path: str | Path, overrides: dict[str, str] | None = None) -> TrainerConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from None
    values = parse_config_text(text, str(path))
    values.update(overrides or {})
    return build_config(values)


def config_to_text(cfg: TrainerConfig) -> str:
    lines = []
    for name in _SCALAR_KEYS:
        v = getattr(cfg, name)
        lines.append(f"{name} = {'none' if v is None else v}")
    for name in _SIM_KEYS:
        lines.append(f"sim.{name} = {getattr(cfg.sim, name)}")
    for cond in socialsim.CONDITIONS:
        for a, act in enumerate(ACTION_NAMES):
            p = cfg.sim.emission[cond, a]
            tail = ", exclusive" if p.exclusive else ""
            lines.append(
                f"emission.{cond}.{act} = {p.handshake}, {p.eye_contact}, {p.smile_if_handshake}, {p.smile}{tail}"
            )
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------------
# Algorithm
# ----------------------------------------------------------------------------------
def epsilon_at(cfg: TrainerConfig, global_step: int) -> float:
    if global_step < 0:
        raise ValueError("global_step must be non-negative")
    if global_step >= cfg.epsilon_horizon:
        return cfg.epsilon_end
    frac = global_step / cfg.epsilon_horizon
    eps = (1.0 - frac) * cfg.epsilon_start + frac * cfg.epsilon_end
    # rounding must not leave [end, start]
    return min(max(eps, cfg.epsilon_end), cfg.epsilon_start)


@dataclass
class EpisodeStats:
    transitions: list[Transition]
    action_counts: np.ndarray


def data_generation_phase(
    env_seed: int,
    qnet: QNetwork,
    cfg: TrainerConfig,
    rng: np.random.Generator,
    memory: ReplayMemory,
    episode: int = 0,
    global_step: int = 0,
    epsilon: float | None = None,
) -> EpisodeStats:
    """Roll out one episode, appending every transition to ``memory``.

    ``epsilon`` fixes the exploration rate; by default it follows :func:`epsilon_at`.
    """
    world, state = socialsim.reset(env_seed, cfg.sim, arena=memory.arena)
    counts = np.zeros(N_ACTIONS, dtype=np.int64)
    out = []
    for t in range(cfg.steps):
        eps = epsilon_at(cfg, global_step + t) if epsilon is None else epsilon
        if rng.random() < eps:
            action = int(rng.integers(N_ACTIONS))
        else:
            action = qnet.act(state.gray, state.depth, cfg.fusion)
        nxt, events, terminal = socialsim.step(world, action)
        tr = Transition(
            gray=state.gray_idx,
            depth=state.depth_idx,
            action=action,
            next_events=tuple(int(e) for e in events),
            next_gray=nxt.gray_idx,
            next_depth=nxt.depth_idx,
            terminal=terminal,
            episode=episode,
            step=t,
        )
        memory.store(tr)
        out.append(tr)
        counts[action] += 1
        state = nxt
    return EpisodeStats(out, counts)


@dataclass
class LearningStats:
    minibatches: int = 0
    bce: list[float] = field(default_factory=list)
    q_loss: dict[str, list[float]] = field(default_factory=lambda: {"gray": [], "depth": []})
    count_hist: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))
    reward_sum: float = 0.0
    reward_n: int = 0


def learning_phase(
    memory: ReplayMemory,
    pnet,
    qnet: QNetwork,
    cfg: TrainerConfig,
    rng: np.random.Generator,
    on_batch: Callable[[dict], None] | None = None,
) -> LearningStats:
    """``cfg.replays`` passes; each draws a fresh minibuffer and walks it in minibatches."""
    if len(memory) == 0:
        raise NoDataError("learning needs at least one stored transition")
    fn = reward_function(cfg.reward)
    pspec, qspec = cfg.pnet_optimizer, cfg.qnet_optimizer
    stats = LearningStats()
    for _ in range(cfg.replays):
        buf = sample_minibuffer(memory, cfg.minibuffer, rng)
        while (items := buf.next_minibatch(cfg.minibatch)) is not None:
            b = to_batch(memory.arena, items)
            stats.bce.append(pnet.train_step(b.gray, b.actions, b.events, pspec))
            probs = pnet.predict(b.gray, b.actions)
            rewards, counts = rewards_for_batch(fn, probs, b.actions, b.events)
            for name, stream, target in qnet.streams:
                next_frames = b.next_gray if name == "gray" else b.next_depth
                frames = b.gray if name == "gray" else b.depth
                targets = bellman_targets(rewards, next_frames, b.terminals, target, cfg.gamma)
                stats.q_loss[name].append(qnet_train_step(stream, frames, b.actions, targets, qspec))
            stats.count_hist += np.bincount(counts, minlength=4)
            stats.reward_sum += float(np.sum(rewards))
            stats.reward_n += len(rewards)
            stats.minibatches += 1
            if on_batch is not None:
                on_batch({"rewards": rewards, "counts": counts, "probs": probs, "batch": b})
    return stats


# ----------------------------------------------------------------------------------
# Whole runs
# ----------------------------------------------------------------------------------
METRIC_COLUMNS = (
    "episode", "global_step", "epsilon", "minibatches", "mean_bce", "q_loss_gray", "q_loss_depth", "mean_reward",
    "count0", "count1", "count2", "count3", "freq_W", "freq_LTH", "freq_H", "freq_HS",
)


@dataclass
class RunArtifacts:
    config: TrainerConfig
    pnet: PNetwork
    qnet: QNetwork
    memory: ReplayMemory
    holdout: ReplayMemory
    metrics: list[dict] = field(default_factory=list)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def seed_streams(seed: int, episodes: int, holdout: int) -> dict:
    init, policy, replay, env = np.random.SeedSequence(seed).spawn(4)
    env_seeds = [int(s) for s in env.generate_state(episodes + holdout)]
    return {
        "init": np.random.default_rng(init),
        "policy": np.random.default_rng(policy),
        "replay": np.random.default_rng(replay),
        "episodes": env_seeds[:episodes],
        "holdout": env_seeds[episodes:],
    }


def train(
    cfg: TrainerConfig,
    out_dir: str | Path | None = None,
    on_episode: Callable[[dict], None] | None = None,
) -> RunArtifacts:
    """Run every episode, then the held-out episodes; write outputs when ``out_dir`` is given."""
    preset = cfg.architecture
    streams = seed_streams(cfg.seed, cfg.episodes, cfg.holdout_episodes)
    pnet = PNetwork(preset, streams["init"])
    qnet = QNetwork(preset, streams["init"])
    n = cfg.sim.resolution
    memory = ReplayMemory(cfg.memory_capacity, FrameArena(n, n))
    rows = []
    global_step = 0
    for k, env_seed in enumerate(streams["episodes"]):
        ep = data_generation_phase(env_seed, qnet, cfg, streams["policy"], memory, k, global_step)
        global_step += cfg.steps
        ls = learning_phase(memory, pnet, qnet, cfg, streams["replay"])
        if (k + 1) % cfg.sync_every == 0:
            qnet.sync_target()
        total = max(ls.count_hist.sum(), 1)
        row = {
            "episode": k + 1,
            "global_step": global_step,
            "epsilon": epsilon_at(cfg, global_step),
            "minibatches": ls.minibatches,
            "mean_bce": _mean(ls.bce),
            "q_loss_gray": _mean(ls.q_loss["gray"]),
            "q_loss_depth": _mean(ls.q_loss["depth"]),
            "mean_reward": ls.reward_sum / max(ls.reward_n, 1),
            **{f"count{i}": float(ls.count_hist[i] / total) for i in range(4)},
            **{f"freq_{a}": float(ep.action_counts[i] / cfg.steps) for i, a in enumerate(ACTION_NAMES)},
        }
        rows.append(row)
        if on_episode is not None:
            on_episode(row)

    holdout = ReplayMemory(max(1, cfg.holdout_episodes * cfg.steps), FrameArena(n, n))
    for j, env_seed in enumerate(streams["holdout"]):
        data_generation_phase(
            env_seed, qnet, cfg, streams["policy"], holdout, cfg.episodes + j, epsilon=cfg.epsilon_end
        )

    run = RunArtifacts(cfg, pnet, qnet, memory, holdout, rows)
    if out_dir is not None:
        write_run(run, out_dir)
    return run


def write_run(run: RunArtifacts, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoints(out / "checkpoints", run.pnet, run.qnet)
    meta = {"seed": run.config.seed, "preset": run.config.preset, "reward": run.config.reward}
    write_log(out / "log", run.memory.arena, run.memory.snapshot(), meta)
    write_log(out / "holdout", run.holdout.arena, run.holdout.snapshot(), meta)
    (out / "metrics.csv").write_text(metrics_csv(run.metrics))
    (out / "config.cfg").write_text(config_to_text(run.config))

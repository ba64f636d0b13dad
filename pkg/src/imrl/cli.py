"""``imrl`` command line: train, eval, simulate, report, inspect.

Exit codes: 0 ok, 2 usage or config error, 3 I/O error, 4 corrupt artifact.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import evalkit, socialsim
from .networks import ACTION_NAMES, CHECKPOINT_FILES, load_checkpoints, read_preamble
from .replay import LogFormatError, read_log
from .tensorcore import CheckpointError
from .trainer import ConfigError, TrainerConfig, build_config, parse_config_text, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_CORRUPT = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"imrl: {msg}", file=sys.stderr)


# ----------------------------------------------------------------------------------
# Config resolution
# ----------------------------------------------------------------------------------
def _overrides(args) -> dict[str, str]:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for flag in ("episodes", "steps", "reward", "preset"):
        v = getattr(args, flag, None)
        if v is not None:
            out[flag] = str(v)
    return out


def resolve_config(args) -> TrainerConfig:
    """Flags > config file > ``IMRL_SEED`` > built-in defaults."""
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError([f"{path}: config file not found"])
        values = parse_config_text(path.read_text(), str(path))
    if "seed" not in values and os.environ.get("IMRL_SEED"):
        values["seed"] = os.environ["IMRL_SEED"]
    values.update(_overrides(args))
    if getattr(args, "seed", None) is not None:
        values["seed"] = str(args.seed)
    return build_config(values)


def parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, dash, hi = part.partition("-")
        try:
            seeds += list(range(int(lo), int(hi) + 1)) if dash else [int(part)]
        except ValueError:
            raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _model_dirs(path: Path) -> tuple[Path, Path]:
    """(run dir, checkpoint dir) for either a run directory or its ``checkpoints`` folder."""
    if (path / "checkpoints").is_dir():
        return path, path / "checkpoints"
    return path.parent, path


# ----------------------------------------------------------------------------------
# Verbs
# ----------------------------------------------------------------------------------
def run_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    started = time.monotonic()

    def echo(row):
        print(
            f"episode {row['episode']:>3}  eps {row['epsilon']:.3f}  bce {row['mean_bce']:.4f}  "
            f"q {row['q_loss_gray']:.4f}/{row['q_loss_depth']:.4f}  reward {row['mean_reward']:+.4f}  "
            f"[{time.monotonic() - started:.0f}s]",
            flush=True,
        )

    train(cfg, out, on_episode=echo)
    print(f"wrote {out}/checkpoints, {out}/log, {out}/holdout, {out}/metrics.csv")
    return EXIT_OK


def run_eval(args) -> int:
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    unknown = [p for p in policies if p not in evalkit.POLICIES]
    if unknown:
        raise UsageError(f"unknown policy {unknown[0]!r}; choose from {', '.join(evalkit.POLICIES)}")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    seeds = parse_seeds(args.seeds)
    pnet = qnet = None
    pnet_acc = None
    train_reward = "none"
    cfg_values: dict[str, str] = {}
    if args.model:
        run_dir, ckpt_dir = _model_dirs(Path(args.model))
        if not (ckpt_dir / CHECKPOINT_FILES["pnet"]).exists():
            raise FileNotFoundError(f"{ckpt_dir}: no checkpoint found")
        pnet, qnet = load_checkpoints(ckpt_dir)
        if (run_dir / "config.cfg").exists():
            cfg_values = parse_config_text((run_dir / "config.cfg").read_text(), str(run_dir / "config.cfg"))
            train_reward = cfg_values.get("reward", "none")
        if (run_dir / "holdout" / "meta").exists():
            arena, transitions, _ = read_log(run_dir / "holdout")
            if transitions:
                pnet_acc = evalkit.pnet_accuracy(pnet, arena, transitions)
    elif any(p in evalkit.MODEL_POLICIES for p in policies):
        raise UsageError("model policies need --model")
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError([f"{path}: config file not found"])
        cfg_values.update(parse_config_text(path.read_text(), str(path)))
    cfg = build_config(cfg_values)
    if qnet is not None and qnet.preset.height != cfg.sim.resolution:
        raise CheckpointError(f"checkpoint resolution {qnet.preset.height} does not match sim.resolution")
    reward = args.reward or cfg.reward
    reports = []
    for policy in policies:
        for seed in seeds:
            records = evalkit.evaluate_policy(
                policy, seed, args.steps, cfg.sim, qnet=qnet, pnet=pnet, reward=reward, fusion=cfg.fusion
            )
            reports.append(evalkit.summarize(records, policy, seed, reward, train_reward, pnet_acc))
    out = Path(args.out)
    evalkit.write_report(out, reports)
    (out / "eval.cfg").write_text(
        f"model = {args.model or 'none'}\npolicies = {','.join(policies)}\nsteps = {args.steps}\n"
        f"seeds = {','.join(map(str, seeds))}\nreward = {reward}\n"
    )
    print(evalkit.report_text(reports), end="")
    return EXIT_OK


def _write_pgm(path: Path, frame: np.ndarray) -> None:
    h, w = frame.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(frame, dtype=np.uint8).tobytes())


def run_simulate(args) -> int:
    cfg = resolve_config(args)
    qnet = None
    if args.model:
        _, ckpt_dir = _model_dirs(Path(args.model))
        _, qnet = load_checkpoints(ckpt_dir)
    sim = socialsim.SimConfig(**{**cfg.sim.__dict__, "episode_steps": args.steps})
    world, state = socialsim.reset(cfg.seed, sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    rows = []
    for t in range(args.steps):
        _write_pgm(out / f"gray_{t:05d}.pgm", world.gray_hist[-1])
        _write_pgm(out / f"depth_{t:05d}.pgm", world.depth_hist[-1])
        oracle = socialsim.oracle_action(world)
        if qnet is not None:
            agent = qnet.act(state.gray, state.depth, cfg.fusion)
        elif args.policy == "random":
            agent = int(rng.integers(len(ACTION_NAMES)))
        else:
            agent = oracle
        condition = world.condition
        state, events, _ = socialsim.step(world, agent)
        rows.append([t, condition, ACTION_NAMES[oracle], ACTION_NAMES[agent], *events.tolist()])
    with open(out / "actions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "condition", "oracle_action", "agent_action", "handshake", "eye_contact", "smile"])
        w.writerows(rows)
    print(f"wrote {args.steps} frame pairs and actions.csv to {out}")
    return EXIT_OK


def run_report(args) -> int:
    header: list[str] | None = None
    rows: list[dict[str, str]] = []
    for d in args.runs:
        path = Path(d) / "report.csv"
        if not path.is_file():
            raise UsageError(f"{path}: missing report.csv")
        fields, part = evalkit.read_report_rows(path)
        if header is None:
            header = fields
        elif fields != header:
            raise UsageError(f"{path}: columns differ from {args.runs[0]}/report.csv")
        rows += part
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "merged.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    sweep = evalkit.sweep_rows(rows, args.policy)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["train_reward", "policy", "seeds", "f1_overall", "cumulative_reward"])
        for r in sweep:
            w.writerow([r["train_reward"], r["policy"], r["seeds"], f"{r['f1_overall']:.6f}", f"{r['cumulative_reward']:.6f}"])
    print(f"{'train_reward':<14}{'seeds':>6}{'F1 overall':>12}{'reward':>12}")
    for r in sweep:
        print(f"{r['train_reward']:<14}{r['seeds']:>6}{r['f1_overall']:>12.3f}{r['cumulative_reward']:>12.1f}")
    return EXIT_OK


def run_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file or directory")
    if path.is_dir() and (path / "meta").exists():
        arena, transitions, meta = read_log(path)
        print(f"transition log {path}")
        for k, v in meta.items():
            print(f"  {k} = {v}")
        if transitions:
            acts = np.bincount([t.action for t in transitions], minlength=len(ACTION_NAMES))
            ev = np.array([t.next_events for t in transitions]).mean(axis=0)
            print("  actions " + " ".join(f"{n}={c}" for n, c in zip(ACTION_NAMES, acts)))
            print(f"  event rates handshake={ev[0]:.3f} eye_contact={ev[1]:.3f} smile={ev[2]:.3f}")
        return EXIT_OK
    _, ckpt_dir = _model_dirs(path) if path.is_dir() else (None, None)
    if ckpt_dir is not None:
        pnet, qnet = load_checkpoints(ckpt_dir)
        print(f"checkpoints {ckpt_dir} (preset {pnet.preset.name}, {pnet.preset.height}x{pnet.preset.width})")
        for label, layers in (("pnet", pnet.layers), ("qnet gray stream", qnet.gray.layers)):
            n = sum(w.size for layer in layers for w in layer.params.values())
            print(f"  {label}: {len(layers)} layers, {n} parameters")
            for layer in layers:
                shapes = " ".join(f"{k}{tuple(v.shape)}" for k, v in layer.params.items())
                print(f"    {layer.kind:<16}{layer.describe()} {shapes}".rstrip())
        return EXIT_OK
    meta = read_preamble(path)
    print(f"checkpoint {path}: " + " ".join(f"{k}={v}" for k, v in meta.items()))
    return EXIT_OK


# ----------------------------------------------------------------------------------
# Entry point
# ----------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="imrl", description="Intrinsically motivated social interaction learning")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value run configuration")
        p.add_argument("--seed", type=int, help="overrides the config file and IMRL_SEED")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("train", help="run the training loop")
    common(p)
    p.add_argument("--episodes", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--reward")
    p.add_argument("--preset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key; repeatable")
    p.set_defaults(func=run_train)

    p = sub.add_parser("eval", help="evaluate policies against the oracle")
    p.add_argument("--model", help="run directory or checkpoint directory")
    p.add_argument("--config", help="scenario config (defaults to the run's config.cfg)")
    p.add_argument("--policies", default="model,random,oracle")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seeds", default="1")
    p.add_argument("--reward", help="reward preset used to score rollouts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=run_eval)

    p = sub.add_parser("simulate", help="render a seeded rollout to PGM images")
    common(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--model", help="act with a trained Qnet instead of the oracle")
    p.add_argument("--policy", choices=("oracle", "random"), default="oracle")
    p.set_defaults(func=run_simulate)

    p = sub.add_parser("report", help="merge report.csv files from several runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--policy", default="model")
    p.set_defaults(func=run_report)

    p = sub.add_parser("inspect", help="describe a checkpoint or transition log")
    p.add_argument("path")
    p.set_defaults(func=run_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        problems = getattr(exc, "problems", None) or [str(exc)]
        for p in problems:
            _err(p)
        return EXIT_USAGE
    except (CheckpointError, LogFormatError) as exc:
        _err(f"corrupt artifact: {exc}")
        return EXIT_CORRUPT
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

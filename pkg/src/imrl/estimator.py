"""Estimator facade over the trainer for use alongside scikit-learn tooling."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import evalkit
from .networks import HISTORY, N_ACTIONS, fuse_and_select
from .trainer import ConfigError, TrainerConfig, build_config, train


class SocialInteractionLearner(BaseEstimator):
    """Learns a greeting policy in the simulated scene by intrinsic reward.

    ``fit`` interacts with the simulator and ignores ``X``. Observations passed
    to ``predict`` are ``(n, 16, H, W)`` arrays in [0, 1]: eight grayscale
    frames followed by eight depth frames, oldest first. ``overrides`` takes any
    config key accepted by :func:`imrl.trainer.build_config`.
    """

    def __init__(
        self,
        episodes: int = 14,
        steps: int = 1000,
        replays: int = 10,
        reward: str = "neutral",
        preset: str = "desk",
        fusion: str = "minmax",
        random_state: int = 0,
        overrides: dict | None = None,
    ):
        self.episodes = episodes
        self.steps = steps
        self.replays = replays
        self.reward = reward
        self.preset = preset
        self.fusion = fusion
        self.random_state = random_state
        self.overrides = overrides

    def _config(self) -> TrainerConfig:
        values = {str(k): str(v) for k, v in (self.overrides or {}).items()}
        for key in ("episodes", "steps", "replays", "reward", "preset", "fusion"):
            values[key] = str(getattr(self, key))
        values["seed"] = str(self.random_state)
        return build_config(values)

    def fit(self, X=None, y=None):
        try:
            cfg = self._config()
        except ConfigError as exc:
            raise ValueError("; ".join(exc.problems)) from None
        run = train(cfg)
        self.config_ = cfg
        self.pnet_, self.qnet_ = run.pnet, run.qnet
        self.metrics_ = run.metrics
        self.holdout_ = run.holdout
        self.n_features_in_ = 2 * HISTORY * cfg.sim.resolution**2
        return self

    def _frames(self, X) -> tuple[np.ndarray, np.ndarray]:
        check_is_fitted(self, "qnet_")
        n = self.config_.sim.resolution
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4 or X.shape[1:] != (2 * HISTORY, n, n):
            raise ValueError(f"expected observations of shape (n, {2 * HISTORY}, {n}, {n}), got {X.shape}")
        check_array(X.reshape(len(X), -1))
        return X[:, :HISTORY], X[:, HISTORY:]

    def q_values(self, X) -> tuple[np.ndarray, np.ndarray]:
        gray, depth = self._frames(X)
        return self.qnet_.q_values(gray, depth)

    def predict(self, X) -> np.ndarray:
        qg, qd = self.q_values(X)
        return np.array([fuse_and_select(g, d, self.fusion) for g, d in zip(qg, qd)], dtype=np.int64)

    def predict_events(self, X, actions) -> np.ndarray:
        """Event probabilities ``(n, 3)`` for taking ``actions`` in each observation."""
        gray, _ = self._frames(X)
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        if len(actions) != len(gray) or np.any((actions < 0) | (actions >= N_ACTIONS)):
            raise ValueError("actions must hold one valid action index per observation")
        return self.pnet_.predict(gray, actions)

    def score(self, X, y) -> float:
        """Macro F1 of the predicted actions against reference actions ``y``."""
        pred = self.predict(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != len(pred):
            raise ValueError("X and y have different lengths")
        records = [evalkit.EvalRecord(i, int(p), int(t), (0, 0, 0), 0.0, 0) for i, (p, t) in enumerate(zip(pred, y))]
        return evalkit.f1_scores(records)["overall"]

    def evaluate(self, seeds=(1, 2, 3, 4, 5), steps: int = 600, policy: str = "model") -> list[evalkit.MetricsReport]:
        """Roll ``policy`` out in the simulator once per seed and summarise against the oracle."""
        check_is_fitted(self, "qnet_")
        out = []
        for seed in seeds:
            records = evalkit.evaluate_policy(
                policy, seed, steps, self.config_.sim, qnet=self.qnet_, pnet=self.pnet_,
                reward=self.config_.reward, fusion=self.fusion,
            )
            out.append(evalkit.summarize(records, policy, seed, self.config_.reward, self.config_.reward))
        return out

"""Deterministic 2-D point-mass reaching task.

The observation is ``(position, goal)``; the action is a commanded velocity,
clipped per axis and integrated with an explicit Euler step. Everything is
batched over episodes: state arrays carry a leading episode axis.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .calibration import CalibrationSet, as_calibration
from .model import Layer, PolicyModel
from .tensor import ShapeError

OBS_DIM = 4
ACTION_DIM = 2
ROLLOUT_MODES = ("lockstep", "teacher_forced", "divergence")


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    horizon: int = 32
    action_clip: float = 1.0
    success_radius: float = 0.05
    init_seed: int = 0
    workspace_radius: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if not self.success_radius > 0:
            raise ValueError("success_radius must be positive")
        if not self.action_clip > 0 or not self.workspace_radius > 0:
            raise ValueError("action_clip and workspace_radius must be positive")

    def with_overrides(self, **kw) -> EnvConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def save_env_config(cfg: EnvConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(asdict(cfg), indent=1) + "\n")


def load_env_config(path: str | Path) -> EnvConfig:
    return EnvConfig(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    step: int = 0


def observe(state: EnvState) -> np.ndarray:
    return np.concatenate([state.position, state.goal], axis=-1)


def step(state: EnvState, action: np.ndarray, cfg: EnvConfig) -> EnvState:
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != ACTION_DIM or action.shape != np.shape(state.position):
        raise ShapeError(f"action of shape {action.shape} does not match state {np.shape(state.position)}")
    velocity = np.clip(action, -cfg.action_clip, cfg.action_clip)
    return EnvState(state.position + cfg.dt * velocity, velocity, state.goal, state.step + 1)


def _sample_disk(rng: np.random.Generator, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random())
    phi = 2.0 * np.pi * rng.random()
    return np.array([r * np.cos(phi), r * np.sin(phi)])


def initial_states(cfg: EnvConfig, episodes: int, seed: int) -> EnvState:
    """Start position and goal drawn uniformly from the workspace disk.

    Episode ``i`` uses its own generator seeded by ``(seed, i)`` so any
    subset of episodes reproduces independently of batch size.
    """
    pos = np.empty((episodes, 2))
    goal = np.empty((episodes, 2))
    for i in range(episodes):
        rng = np.random.default_rng([seed, i])
        pos[i] = _sample_disk(rng, cfg.workspace_radius)
        goal[i] = _sample_disk(rng, cfg.workspace_radius)
    return EnvState(pos, np.zeros_like(pos), goal, 0)


class FitError(RuntimeError):
    pass


def controller_targets(obs: np.ndarray, gain: float) -> np.ndarray:
    return gain * (obs[..., 2:4] - obs[..., 0:2])


def reference_policy(
    cfg: EnvConfig | None = None,
    seed: int = 0,
    hidden: tuple[int, int] = (32, 32),
    gain: float = 2.0,
    n_fit: int = 2048,
    max_iter: int = 300,
) -> PolicyModel:
    """Three-layer tanh network (vision -> backbone -> action_head) imitating ``gain * (goal - pos)``.

    Hidden layers start as seeded random features with a ridge least-squares
    readout; all parameters are then refined jointly by L-BFGS on the
    imitation MSE. Raises FitError if the residual RMS exceeds
    ``0.05 * gain * workspace_radius``.
    """
    cfg = cfg or EnvConfig()
    rng = np.random.default_rng(seed)
    pos = np.array([_sample_disk(rng, cfg.workspace_radius) for _ in range(n_fit)])
    goal = np.array([_sample_disk(rng, cfg.workspace_radius) for _ in range(n_fit)])
    obs = np.concatenate([pos, goal], axis=1)
    target = controller_targets(obs, gain)

    h1, h2 = hidden
    w1 = rng.normal(0.0, 0.5, size=(h1, OBS_DIM))
    b1 = rng.normal(0.0, 0.1, size=h1)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h1), size=(h2, h1))
    b2 = rng.normal(0.0, 0.1, size=h2)
    feats = np.tanh(np.tanh(obs @ w1.T + b1) @ w2.T + b2)
    design = np.hstack([feats, np.ones((n_fit, 1))])
    beta = np.linalg.solve(design.T @ design + 1e-8 * n_fit * np.eye(h2 + 1), design.T @ target)

    shapes = [(h1, OBS_DIM), (h1,), (h2, h1), (h2,), (ACTION_DIM, h2), (ACTION_DIM,)]
    sizes = [int(np.prod(s)) for s in shapes]

    def unpack(theta):
        parts = np.split(theta, np.cumsum(sizes)[:-1])
        return [p.reshape(s) for p, s in zip(parts, shapes)]

    def loss_and_grad(theta):
        w1, b1, w2, b2, w3, b3 = unpack(theta)
        a1 = np.tanh(obs @ w1.T + b1)
        a2 = np.tanh(a1 @ w2.T + b2)
        err = a2 @ w3.T + b3 - target
        g = 2.0 * err / n_fit
        d2 = (g @ w3) * (1.0 - a2**2)
        d1 = (d2 @ w2) * (1.0 - a1**2)
        grads = (d1.T @ obs, d1.sum(0), d2.T @ a1, d2.sum(0), g.T @ a2, g.sum(0))
        return np.mean(np.sum(err**2, axis=1)), np.concatenate([x.ravel() for x in grads])

    theta0 = np.concatenate([x.ravel() for x in (w1, b1, w2, b2, beta[:-1].T, beta[-1])])
    fit = minimize(loss_and_grad, theta0, jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    w1, b1, w2, b2, w3, b3 = unpack(fit.x)
    model = PolicyModel(
        (
            Layer(w1, b1, "tanh", "vision"),
            Layer(w2, b2, "tanh", "backbone"),
            Layer(w3, b3, "identity", "action_head"),
        )
    )
    residual = fit_residual(model, obs, gain)
    bound = 0.05 * gain * cfg.workspace_radius
    if not residual <= bound:
        raise FitError(f"fit residual RMS {residual:.4g} exceeds {bound:.4g}")
    return model


def fit_residual(model: PolicyModel, obs: np.ndarray, gain: float) -> float:
    """RMS (per action component) of policy minus proportional controller."""
    err = model.act(obs) - controller_targets(obs, gain)
    return float(np.sqrt(np.mean(err**2)))


def rollout(cfg: EnvConfig, policy, episodes: int, seed: int) -> tuple[np.ndarray, EnvState]:
    """Closed-loop rollout of one policy. Returns observations (episodes, T, 4) and the final state."""
    state = initial_states(cfg, episodes, seed)
    seen = []
    for _ in range(cfg.horizon):
        obs = observe(state)
        seen.append(obs)
        state = step(state, policy.act(obs), cfg)
    return np.stack(seen, axis=1), state


def final_distance(state: EnvState) -> np.ndarray:
    return np.linalg.norm(state.position - state.goal, axis=-1)


def success_rate(cfg: EnvConfig, policy, episodes: int, seed: int) -> float:
    _, final = rollout(cfg, policy, episodes, seed)
    return float(np.mean(final_distance(final) <= cfg.success_radius))


def make_calibration(cfg: EnvConfig, policy, n_traj: int = 512, seed: int = 0) -> CalibrationSet:
    """Observations from every step of ``n_traj`` full-precision episodes."""
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    obs, _ = rollout(cfg, policy, n_traj, seed)
    return CalibrationSet(obs.reshape(-1, OBS_DIM), n_traj, seed)


def rollout_deviations(
    cfg: EnvConfig, fp_policy, q_policy, episodes: int, seed: int, mode: str = "lockstep"
) -> tuple[np.ndarray, EnvState]:
    """Per-step action deviation ``||a_q - a_fp||`` for each episode, shape (episodes, T).

    ``lockstep``: the quantized policy drives the environment and the
    full-precision action is recomputed on the same state.
    ``teacher_forced``: the full-precision policy drives; both are queried
    on its states. ``divergence``: each policy follows its own trajectory.
    The returned final state belongs to the trajectory driven by ``q_policy``
    (``fp_policy`` under teacher forcing).
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if mode not in ROLLOUT_MODES:
        raise ValueError(f"mode must be one of {ROLLOUT_MODES}, got {mode!r}")
    state = initial_states(cfg, episodes, seed)
    fp_state = state
    dev = np.empty((episodes, cfg.horizon))
    for t in range(cfg.horizon):
        obs = observe(state)
        a_q = q_policy.act(obs)
        a_fp = fp_policy.act(observe(fp_state) if mode == "divergence" else obs)
        dev[:, t] = np.linalg.norm(a_q - a_fp, axis=-1)
        if mode == "teacher_forced":
            state = step(state, a_fp, cfg)
        else:
            state = step(state, a_q, cfg)
        if mode == "divergence":
            fp_state = step(fp_state, a_fp, cfg)
    return dev, state


def teacher_forced_mse(fp_policy, q_policy, calib) -> float:
    """Mean squared action error on the calibration observations."""
    obs = as_calibration(calib).observations
    diff = q_policy.act(obs) - fp_policy.act(obs)
    return float(np.mean(np.sum(diff * diff, axis=-1)))


@dataclass(frozen=True, eq=False)
class RolloutReport:
    step_deviation: np.ndarray
    cumulative_curve: np.ndarray
    episode_cumulative: np.ndarray
    final_distance: np.ndarray
    successes: np.ndarray
    teacher_forced_mse: float | None = None

    @property
    def episodes(self) -> int:
        return len(self.successes)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes))

    @property
    def final_deviation_mean(self) -> float:
        return float(np.mean(self.episode_cumulative))

    def to_dict(self) -> dict:
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "teacher_forced_mse": self.teacher_forced_mse,
            "cumulative_curve": self.cumulative_curve.tolist(),
            "final_deviation_mean": self.final_deviation_mean,
        }

    def save(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["t", "deviation", "cumulative"])
                for t, (d, c) in enumerate(zip(self.step_deviation, self.cumulative_curve), start=1):
                    w.writerow([t, repr(float(d)), repr(float(c))])


def rollout_pair(
    cfg: EnvConfig,
    fp_policy,
    q_policy,
    episodes: int = 16,
    seed: int = 0,
    calib=None,
    mode: str = "lockstep",
) -> RolloutReport:
    dev, final = rollout_deviations(cfg, fp_policy, q_policy, episodes, seed, mode)
    step_dev = dev.mean(axis=0)
    dist = final_distance(final)
    mse = None if calib is None else teacher_forced_mse(fp_policy, q_policy, calib)
    return RolloutReport(
        step_deviation=step_dev,
        cumulative_curve=np.cumsum(step_dev),
        episode_cumulative=dev.sum(axis=1),
        final_distance=dist,
        successes=dist <= cfg.success_radius,
        teacher_forced_mse=mse,
    )

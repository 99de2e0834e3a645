"""Desk-scale continuous-control environments plus the observation pipeline
wrappers (action repeat, frame stacking) used by the training baseline.

Both environments are deterministic given a reset seed: the same seed and
action sequence always replay bit-identical trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class StepResult:
    """One environment transition: observation, reward, terminal, diagnostics."""

    observation: np.ndarray
    reward: float
    terminal: bool
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Pendulum swing-up (DDPG sanity environment)
# ---------------------------------------------------------------------------

@dataclass
class PendulumConfig:
    episode_cap: int = 200
    max_torque: float = 2.0
    dt: float = 0.05
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")


def _angle_normalize(theta: float) -> float:
    return ((theta + np.pi) % (2.0 * np.pi)) - np.pi


class Pendulum:
    """Torque-limited pendulum swing-up with the usual quadratic cost.

    Angle 0 is upright; reward is the negative cost of angle, angular
    velocity and applied torque. Episodes end only at the step cap, which
    is flagged as a timeout rather than a true terminal state.
    """

    observation_dim = 3
    action_dim = 1

    def __init__(self, config: PendulumConfig | None = None):
        self.config = config or PendulumConfig()
        self._seed_stream = np.random.default_rng(self.config.rng_seed)
        self._theta = 0.0
        self._theta_dot = 0.0
        self._steps = 0
        self._terminal = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is None:
            seed = int(self._seed_stream.integers(0, 2**63 - 1))
        rng = np.random.default_rng(seed)
        self._theta = float(rng.uniform(-np.pi, np.pi))
        self._theta_dot = float(rng.uniform(-1.0, 1.0))
        self._steps = 0
        self._terminal = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        return np.array([np.cos(self._theta), np.sin(self._theta), self._theta_dot])

    def step(self, action) -> StepResult:
        if self._terminal:
            raise RuntimeError("step() after terminal; call reset() first")
        a = _clamp_action(np.asarray(action, dtype=np.float64), self.action_dim)
        cfg = self.config
        u = cfg.max_torque * float(a[0])
        th, thd = self._theta, self._theta_dot

        cost = _angle_normalize(th) ** 2 + 0.1 * thd**2 + 0.001 * u**2
        thd = thd + (3.0 * cfg.gravity / (2.0 * cfg.length) * np.sin(th)
                     + 3.0 / (cfg.mass * cfg.length**2) * u) * cfg.dt
        thd = float(np.clip(thd, -8.0, 8.0))
        th = th + thd * cfg.dt

        self._theta = th
        self._theta_dot = thd
        self._steps += 1
        timeout = self._steps >= cfg.episode_cap
        self._terminal = timeout
        return StepResult(self._observe(), -cost, timeout,
                          {"fell": False, "timeout": timeout})

    @property
    def steps(self) -> int:
        return self._steps

    def get_state(self) -> dict:
        return {"theta": self._theta, "theta_dot": self._theta_dot,
                "steps": self._steps, "terminal": self._terminal}

    def set_state(self, state: dict) -> None:
        self._theta = float(state["theta"])
        self._theta_dot = float(state["theta_dot"])
        self._steps = int(state["steps"])
        self._terminal = bool(state["terminal"])


# ---------------------------------------------------------------------------
# Obstacle runner (dooming-action environment)
# ---------------------------------------------------------------------------

@dataclass
class ObstacleRunnerConfig:
    """1-D runner over randomly placed obstacles.

    Crossing an obstacle with the posture angle beyond the instability
    threshold flips an absorbing `unstable` flag; once unstable, posture
    diverges and the episode ends with a fall within
    ``unstable_collapse_steps`` no matter what actions follow.
    """

    episode_cap: int = 1000
    obstacle_density: float = 0.05
    posture_instability_threshold: float = 0.2
    unstable_collapse_steps: int = 6
    rng_seed: int = 0
    track_length: float = 1200.0
    start_clear: float = 4.0
    obstacle_lookahead: float = 12.0
    # physics tunables
    accel_gain: float = 0.1
    friction: float = 0.05
    max_speed: float = 1.0
    posture_gain: float = 0.06
    posture_damping: float = 0.08
    speed_posture_coupling: float = 0.06
    posture_wobble: float = 0.015
    stumble_speed_factor: float = 0.8
    fall_angle: float = 1.2
    unstable_growth: float = 1.7
    unstable_push: float = 0.25
    unstable_action_leak: float = 0.03
    unstable_speed_decay: float = 0.5

    def __post_init__(self):
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")
        if not 0.0 <= self.obstacle_density <= 1.0:
            raise ValueError("obstacle_density must lie in [0, 1]")
        if self.unstable_collapse_steps < 1:
            raise ValueError("unstable_collapse_steps must be >= 1")


class ObstacleRunner:
    """Run as far as possible before the step cap while crossing obstacles.

    Observation: [speed, posture, next-obstacle distance, second-obstacle
    distance], the distances normalized by the lookahead horizon. Action:
    [thrust, lean], each in [-1, 1]. Reward per step is exactly the forward
    distance covered, so episode reward telescopes to the final distance.

    Speed amplifies posture error (running fast is risky) and a small seeded
    wobble keeps posture from being trivially controllable. The dooming
    structure: an obstacle crossed while |posture| exceeds the instability
    threshold starts an unrecoverable collapse.
    """

    observation_dim = 4
    action_dim = 2

    def __init__(self, config: ObstacleRunnerConfig | None = None):
        self.config = config or ObstacleRunnerConfig()
        self._seed_stream = np.random.default_rng(self.config.rng_seed)
        self._rng = np.random.default_rng(0)
        self._obstacles = np.empty(0)
        self._x = 0.0
        self._v = 0.0
        self._p = 0.0
        self._steps = 0
        self._unstable = False
        self._collapse_left = 0
        self._terminal = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is None:
            seed = int(self._seed_stream.integers(0, 2**63 - 1))
        cfg = self.config
        self._rng = np.random.default_rng(seed)
        cells = np.arange(int(cfg.start_clear), int(cfg.track_length))
        hit = self._rng.random(len(cells)) < cfg.obstacle_density
        jitter = self._rng.uniform(0.25, 0.75, size=len(cells))
        self._obstacles = (cells + jitter)[hit]
        self._x = 0.0
        self._v = 0.0
        self._p = 0.0
        self._steps = 0
        self._unstable = False
        self._collapse_left = 0
        self._terminal = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        cfg = self.config
        ahead = self._obstacles[self._obstacles > self._x]
        look = cfg.obstacle_lookahead
        d1 = min(ahead[0] - self._x, look) / look if len(ahead) >= 1 else 1.0
        d2 = min(ahead[1] - self._x, look) / look if len(ahead) >= 2 else 1.0
        return np.array([self._v, self._p, d1, d2])

    def step(self, action) -> StepResult:
        if self._terminal:
            raise RuntimeError("step() after terminal; call reset() first")
        a = _clamp_action(np.asarray(action, dtype=np.float64), self.action_dim)
        cfg = self.config
        thrust, lean = float(a[0]), float(a[1])
        fell = False

        if self._unstable:
            # absorbing regime: posture diverges, actions cannot recover
            self._p = (cfg.unstable_growth * self._p
                       + cfg.unstable_push * np.sign(self._p)
                       + cfg.unstable_action_leak * lean)
            self._v *= cfg.unstable_speed_decay
            x_new = self._x + self._v
            reward = x_new - self._x
            self._x = x_new
            self._collapse_left -= 1
            if self._collapse_left <= 0 or abs(self._p) >= cfg.fall_angle:
                self._terminal = True
                fell = True
        else:
            wobble = float(self._rng.normal()) * cfg.posture_wobble
            self._p = ((1.0 - cfg.posture_damping) * self._p
                       + cfg.posture_gain * lean
                       + cfg.speed_posture_coupling * self._v * self._p
                       + wobble)
            self._v = float(np.clip(self._v + cfg.accel_gain * thrust
                                    - cfg.friction * self._v, 0.0, cfg.max_speed))
            x_new = self._x + self._v
            reward = x_new - self._x
            crossed = np.any((self._obstacles > self._x) & (self._obstacles <= x_new))
            self._x = x_new
            if crossed:
                if abs(self._p) > cfg.posture_instability_threshold:
                    self._unstable = True
                    self._collapse_left = cfg.unstable_collapse_steps
                else:
                    self._v *= cfg.stumble_speed_factor
            if not self._unstable and abs(self._p) >= cfg.fall_angle:
                # tipped over without an obstacle: same unrecoverable regime
                self._unstable = True
                self._collapse_left = cfg.unstable_collapse_steps

        self._steps += 1
        timeout = False
        if not self._terminal and self._steps >= cfg.episode_cap:
            self._terminal = True
            timeout = True
        info = {"fell": fell or (self._terminal and self._unstable),
                "unstable": self._unstable,
                "distance": self._x,
                "timeout": timeout}
        return StepResult(self._observe(), reward, self._terminal, info)

    @property
    def steps(self) -> int:
        return self._steps

    def get_state(self) -> dict:
        return {
            "x": self._x, "v": self._v, "p": self._p, "steps": self._steps,
            "unstable": self._unstable, "collapse_left": self._collapse_left,
            "terminal": self._terminal, "obstacles": self._obstacles.copy(),
            "rng": self._rng.bit_generator.state,
        }

    def set_state(self, state: dict) -> None:
        self._x = float(state["x"])
        self._v = float(state["v"])
        self._p = float(state["p"])
        self._steps = int(state["steps"])
        self._unstable = bool(state["unstable"])
        self._collapse_left = int(state["collapse_left"])
        self._terminal = bool(state["terminal"])
        self._obstacles = np.asarray(state["obstacles"]).copy()
        self._rng = np.random.default_rng(0)
        self._rng.bit_generator.state = state["rng"]

    def observe(self) -> np.ndarray:
        return self._observe()


def all_action_sequences_fall(env: ObstacleRunner, state: dict, horizon: int,
                              grid: Iterable[float] = (-1.0, 0.0, 1.0)) -> bool:
    """Brute-force dooming check: from `state`, does every action sequence on
    the discretized grid end with a fall within `horizon` steps?"""
    grid = [float(g) for g in grid]
    actions = [np.array([t, l]) for t in grid for l in grid]

    def explore(s: dict, depth: int) -> bool:
        if depth >= horizon:
            return False
        for a in actions:
            env.set_state(s)
            res = env.step(a)
            if res.terminal and not res.info["fell"]:
                return False
            if not res.terminal:
                if not explore(env.get_state(), depth + 1):
                    return False
        return True

    ok = explore(state, 0)
    env.set_state(state)
    return ok


# ---------------------------------------------------------------------------
# Observation pipeline wrappers
# ---------------------------------------------------------------------------

def _clamp_action(a: np.ndarray, dim: int) -> np.ndarray:
    if a.shape != (dim,):
        raise ValueError(f"action shape {a.shape} != ({dim},)")
    if np.any(np.abs(a) > 1.0):
        log.warning("action %s outside [-1, 1], clamping", a)
        a = np.clip(a, -1.0, 1.0)
    return a


def env_reset(env, seed: int | None = None) -> np.ndarray:
    return env.reset(seed)


def env_step(env, action) -> StepResult:
    return env.step(action)


def frame_skip_step(env, action, k: int = 4) -> StepResult:
    """Apply the same action k times (or until terminal); rewards sum,
    terminal flags OR together, the last observation wins."""
    if k < 1:
        raise ValueError("frame skip k must be >= 1")
    total = 0.0
    result = None
    for _ in range(k):
        result = env.step(action)
        total += result.reward
        if result.terminal:
            break
    return StepResult(result.observation, total, result.terminal, result.info)


class ObservationStack:
    """Keeps the last k observations; output is their concatenation, oldest
    first. Until k observations exist the earliest one pads the front."""

    def __init__(self, base_length: int, k: int = 3):
        if k < 1:
            raise ValueError("stack size k must be >= 1")
        self.base_length = base_length
        self.k = k
        self._history: list[np.ndarray] = []

    @property
    def output_length(self) -> int:
        return self.base_length * self.k

    def reset(self) -> None:
        self._history.clear()

    def push(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.base_length,):
            raise ValueError(f"observation shape {obs.shape} != ({self.base_length},)")
        self._history.append(obs)
        if len(self._history) > self.k:
            self._history.pop(0)
        pad = [self._history[0]] * (self.k - len(self._history))
        return np.concatenate(pad + self._history)


def stack_push(stack: ObservationStack, obs) -> np.ndarray:
    return stack.push(obs)


class ObservationPipeline:
    """Agent-facing view of an environment: action repeat + frame stacking.

    reset/step mirror the raw environment but return stacked states; the
    underlying per-frame step count is exposed for budget accounting.
    """

    def __init__(self, env, frame_skip: int = 4, stack_size: int = 3):
        if frame_skip < 1:
            raise ValueError("frame_skip must be >= 1")
        self.env = env
        self.frame_skip = frame_skip
        self.stack = ObservationStack(env.observation_dim, stack_size)
        self.frames = 0

    @property
    def state_dim(self) -> int:
        return self.stack.output_length

    @property
    def action_dim(self) -> int:
        return self.env.action_dim

    def reset(self, seed: int | None = None) -> np.ndarray:
        obs = self.env.reset(seed)
        self.stack.reset()
        return self.stack.push(obs)

    def step(self, action) -> StepResult:
        before = self.env.steps
        result = frame_skip_step(self.env, action, self.frame_skip)
        self.frames += self.env.steps - before
        return StepResult(self.stack.push(result.observation), result.reward,
                          result.terminal, result.info)


# ---------------------------------------------------------------------------
# Trajectory dump
# ---------------------------------------------------------------------------

class TrajectoryWriter:
    """Writes one delimited-text record per step: index, observation, action,
    reward, terminal, and (optionally) per-actor critic scores."""

    def __init__(self, fh, obs_dim: int, action_dim: int, n_scores: int = 0):
        self._fh = fh
        self.n_scores = n_scores
        cols = ["step"]
        cols += [f"obs_{i}" for i in range(obs_dim)]
        cols += [f"act_{i}" for i in range(action_dim)]
        cols += ["reward", "terminal"]
        if n_scores:
            cols += [f"score_{j}" for j in range(n_scores)] + ["chosen_index"]
        self._fh.write(",".join(cols) + "\n")

    def record(self, step: int, obs, action, reward: float, terminal: bool,
               scores=None, chosen_index: int | None = None) -> None:
        parts = [str(step)]
        parts += [repr(float(v)) for v in np.asarray(obs).ravel()]
        parts += [repr(float(v)) for v in np.asarray(action).ravel()]
        parts += [repr(float(reward)), "1" if terminal else "0"]
        if self.n_scores:
            if scores is None or chosen_index is None:
                raise ValueError("writer configured with scores; none provided")
            parts += [repr(float(s)) for s in scores] + [str(int(chosen_index))]
        self._fh.write(",".join(parts) + "\n")


def make_env(name: str, config=None):
    """Factory for the environments by name."""
    if name == "pendulum":
        return Pendulum(config)
    if name == "obstacle_runner":
        return ObstacleRunner(config)
    raise ValueError(f"unknown environment: {name!r}")

"""Parallel experience generation: workers run independent environment
instances against the latest published policy snapshot and feed a shared
replay buffer.

Workers are threads sharing nothing but the buffer and the snapshot box;
with a single worker everything runs serially in the calling thread, which
is the deterministic mode the tests rely on.
"""

from __future__ import annotations

import copy
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ace import EnsemblePolicy, select_action
from .ddpg import OuNoise, ReplayBuffer, Transition

log = logging.getLogger(__name__)


@dataclass
class WorkerConfig:
    worker_count: int = 1
    seeds: list[int] = field(default_factory=lambda: [0])
    snapshot_refresh_interval: int = 500
    noise_theta: float = 0.15
    noise_sigma: float = 0.2
    noise_dt: float = 1.0
    noise_sigmas: list[float] | None = None  # per-worker override

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if len(self.seeds) != self.worker_count:
            raise ValueError("need exactly one seed per worker")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("worker seeds must be pairwise distinct")
        if self.snapshot_refresh_interval < 1:
            raise ValueError("snapshot_refresh_interval must be >= 1")
        if self.noise_sigmas is not None and len(self.noise_sigmas) != self.worker_count:
            raise ValueError("noise_sigmas must match worker_count")

    def sigma_for(self, worker: int) -> float:
        return self.noise_sigmas[worker] if self.noise_sigmas else self.noise_sigma


@dataclass
class EpisodeStats:
    """Per-episode summary emitted by a worker; timeouts are flagged
    separately from falls."""

    worker_id: int
    episode_index: int
    total_reward: float
    steps: int
    fell: bool
    timeout: bool
    critic_scores: list[float] | None = None


class SnapshotBox:
    """Atomic holder for published policy parameters.

    publish() stores an immutable deep copy; readers always observe a fully
    written snapshot, never a mixture of two publishes.
    """

    def __init__(self, initial: EnsemblePolicy):
        self._lock = threading.Lock()
        self._value = copy.deepcopy(initial)
        self._version = 0

    def publish(self, policy: EnsemblePolicy) -> int:
        snap = copy.deepcopy(policy)
        with self._lock:
            self._value = snap
            self._version += 1
            return self._version

    def read(self) -> tuple[EnsemblePolicy, int]:
        with self._lock:
            return self._value, self._version


def snapshot_publish(box: SnapshotBox, policy: EnsemblePolicy) -> int:
    return box.publish(policy)


@dataclass
class RolloutReport:
    stats: list[EpisodeStats]
    failures: list[tuple[int, str]]


class RolloutSession:
    """Runs the configured workers until each finishes its episode budget or
    the stop condition fires. One worker runs serially in the calling
    thread; more run as daemon threads appending to the shared buffer."""

    def __init__(self, cfg: WorkerConfig, env_factory: Callable[[int], object],
                 snapshot_source: SnapshotBox, buffer: ReplayBuffer,
                 episodes_per_worker: int | None = None,
                 stop: Callable[[], bool] | None = None,
                 on_episode: Callable[[EpisodeStats], None] | None = None,
                 random_action_until: Callable[[], bool] | None = None):
        if episodes_per_worker is None and stop is None:
            raise ValueError("need an episode budget or a stop condition")
        self.cfg = cfg
        self.env_factory = env_factory
        self.snapshot_source = snapshot_source
        self.buffer = buffer
        self.episodes_per_worker = episodes_per_worker
        self.stop = stop or (lambda: False)
        self.on_episode = on_episode
        self.random_action_until = random_action_until
        self._stats: list[EpisodeStats] = []
        self._failures: list[tuple[int, str]] = []
        self._emit_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    def _emit(self, stats: EpisodeStats) -> None:
        with self._emit_lock:
            self._stats.append(stats)
        if self.on_episode is not None:
            self.on_episode(stats)

    def _worker(self, idx: int) -> None:
        try:
            env = self.env_factory(idx)
            seq = np.random.SeedSequence(self.cfg.seeds[idx]).spawn(2)
            noise_rng = np.random.default_rng(seq[0])
            episode_rng = np.random.default_rng(seq[1])
            noise = OuNoise(env.action_dim, self.cfg.noise_theta,
                            self.cfg.sigma_for(idx), self.cfg.noise_dt)
            policy, _ = self.snapshot_source.read()
            since_refresh = 0
            episode = 0
            while self.episodes_per_worker is None or episode < self.episodes_per_worker:
                if self.stop():
                    break
                state = env.reset(seed=int(episode_rng.integers(0, 2**63 - 1)))
                noise.reset()
                total, steps = 0.0, 0
                fell = timeout = False
                completed = False
                while not self.stop():
                    if since_refresh >= self.cfg.snapshot_refresh_interval:
                        policy, _ = self.snapshot_source.read()
                        since_refresh = 0
                    if self.random_action_until is not None and self.random_action_until():
                        action = noise_rng.uniform(-1.0, 1.0, size=env.action_dim)
                    else:
                        action, _ = select_action(policy, state)
                        action = np.clip(action + noise.step(noise_rng), -1.0, 1.0)
                    res = env.step(action)
                    bootstrap_terminal = res.terminal and not res.info.get("timeout", False)
                    self.buffer.store(
                        Transition(state, action, res.reward, res.observation,
                                   bootstrap_terminal),
                        worker_id=idx,
                    )
                    state = res.observation
                    total += res.reward
                    steps += 1
                    since_refresh += 1
                    if res.terminal:
                        fell = bool(res.info.get("fell", False))
                        timeout = bool(res.info.get("timeout", False))
                        completed = True
                        break
                if completed:
                    self._emit(EpisodeStats(idx, episode, total, steps, fell, timeout))
                episode += 1
        except Exception as exc:  # worker failure must not take down the rest
            log.exception("rollout worker %d failed", idx)
            with self._emit_lock:
                self._failures.append((idx, repr(exc)))

    def run(self) -> RolloutReport:
        if self.cfg.worker_count == 1:
            self._worker(0)
        else:
            self.start()
            return self.join()
        return RolloutReport(self._stats, self._failures)

    def start(self) -> None:
        self._threads = [
            threading.Thread(target=self._worker, args=(i,), daemon=True,
                             name=f"rollout-{i}")
            for i in range(self.cfg.worker_count)
        ]
        for t in self._threads:
            t.start()

    def alive(self) -> bool:
        return any(t.is_alive() for t in self._threads)

    def join(self) -> RolloutReport:
        for t in self._threads:
            t.join()
        return RolloutReport(self._stats, self._failures)


def run_workers(cfg: WorkerConfig, env_factory: Callable[[int], object],
                snapshot_source: SnapshotBox, buffer: ReplayBuffer,
                episodes_per_worker: int,
                on_episode: Callable[[EpisodeStats], None] | None = None) -> RolloutReport:
    """Collect a fixed number of episodes per worker into the buffer."""
    session = RolloutSession(cfg, env_factory, snapshot_source, buffer,
                             episodes_per_worker=episodes_per_worker,
                             on_episode=on_episode)
    return session.run()


def write_episode_stats(fh, stats: list[EpisodeStats]) -> None:
    """Delimited-text emission of an EpisodeStats stream."""
    fh.write("worker_id,episode_index,total_reward,steps,fell,timeout\n")
    for s in stats:
        fh.write(f"{s.worker_id},{s.episode_index},{s.total_reward!r},"
                 f"{s.steps},{int(s.fell)},{int(s.timeout)}\n")

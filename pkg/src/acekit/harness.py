"""Experiment harness: configuration, training orchestration, checkpoint
persistence, AXCY evaluation, ablations, and the command-line entry point.

A run directory holds everything one training produced: the resolved config
echo, checkpoints plus a manifest, per-episode learning curves (deterministic
columns; wall-clock timing goes to a sibling file so identically seeded runs
are byte-identical), and any evaluation reports later written against it.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .ace import AceTrainer, EnsemblePolicy, make_ensemble, select_action
from .ddpg import (
    DdpgAgent,
    DdpgHyperparameters,
    OuNoise,
    ReplayBuffer,
    Transition,
)
from .envs import (
    ObservationPipeline,
    ObstacleRunnerConfig,
    PendulumConfig,
    TrajectoryWriter,
    make_env,
)
from .numerics import ACTIVATION_KINDS, load_mlp, save_mlp
from .rollout import RolloutSession, SnapshotBox, WorkerConfig

log = logging.getLogger(__name__)

# alias the checkpoint format owned by numerics
checkpoint_save = save_mlp
checkpoint_load = load_mlp

_ENV_CONFIGS = {"pendulum": PendulumConfig, "obstacle_runner": ObstacleRunnerConfig}
_MANIFEST_VERSION = 1

# seed-stream tags: every random element of a run derives from the one
# config seed through these
_TAG_INIT, _TAG_NOISE, _TAG_SAMPLE, _TAG_ENV, _TAG_WARMUP, _TAG_EVAL = range(1, 7)


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass
class MemberOverride:
    """Optional per-ensemble-member heterogeneity knobs."""

    seed: int | None = None
    widths: list[int] | None = None
    noise_sigma: float | None = None


@dataclass
class EnsembleSpec:
    n_actors: int = 1
    n_critics: int = 0
    overrides: list[MemberOverride] = field(default_factory=list)

    def override_for(self, i: int) -> MemberOverride:
        return self.overrides[i] if i < len(self.overrides) else MemberOverride()


@dataclass
class ExperimentConfig:
    environment: str = "obstacle_runner"
    env: dict = field(default_factory=dict)
    seed: int = 0
    train_mode: str = "ddpg"  # "ddpg": independent pairs; "ace": joint ensemble
    widths: list[int] = field(default_factory=lambda: [64, 32])
    hidden_activation: str = "selu"
    frame_skip: int = 4
    obs_stack: int = 3
    hyperparameters: DdpgHyperparameters = field(default_factory=DdpgHyperparameters)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    worker_count: int = 1
    snapshot_refresh_interval: int = 500
    total_steps: int = 20_000
    checkpoint_interval: int = 0  # 0: initial + final checkpoints only
    buffer_capacity: int = 2_000_000
    evaluation_episodes: int = 100
    fall_reward_threshold: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.environment not in _ENV_CONFIGS:
            raise ConfigError(f"environment: unknown environment {self.environment!r}")
        if self.train_mode not in ("ddpg", "ace"):
            raise ConfigError(f"train_mode: must be 'ddpg' or 'ace', got {self.train_mode!r}")
        if self.hidden_activation not in ACTIVATION_KINDS:
            raise ConfigError(f"hidden_activation: unknown kind {self.hidden_activation!r}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths: need at least one positive layer width")
        if self.frame_skip < 1:
            raise ConfigError("frame_skip: must be >= 1")
        if self.obs_stack < 1:
            raise ConfigError("obs_stack: must be >= 1")
        n, m = self.ensemble.n_actors, self.ensemble.n_critics
        if n < 1:
            raise ConfigError("ensemble.n_actors: must be >= 1")
        if m not in (0, 1, n):
            raise ConfigError(f"ensemble.n_critics: must be 0, 1 or n_actors={n}, got {m}")
        if m == 0 and n != 1:
            raise ConfigError("ensemble.n_critics: 0 critics allowed only with 1 actor")
        if self.train_mode == "ace" and m == 0:
            raise ConfigError("ensemble.n_critics: joint ensemble training needs >= 1 critic")
        if self.worker_count < 1:
            raise ConfigError("worker_count: must be >= 1")
        if self.snapshot_refresh_interval < 1:
            raise ConfigError("snapshot_refresh_interval: must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps: must be >= 0")
        if self.buffer_capacity < 1:
            raise ConfigError("buffer_capacity: must be >= 1")
        if self.evaluation_episodes < 1:
            raise ConfigError("evaluation_episodes: must be >= 1")
        try:
            self.env_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env: {exc}") from exc

    def env_config(self):
        cls = _ENV_CONFIGS[self.environment]
        try:
            return cls(**self.env)
        except TypeError as exc:
            raise ConfigError(f"env: unknown field for {self.environment}: {exc}") from exc

    def label(self) -> str:
        return f"A{self.ensemble.n_actors}C{self.ensemble.n_critics}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
        if "hyperparameters" in data:
            hp = data["hyperparameters"]
            if not isinstance(hp, dict):
                raise ConfigError("hyperparameters: must be an object")
            unknown = set(hp) - set(DdpgHyperparameters.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"hyperparameters.{sorted(unknown)[0]}: unknown field")
            try:
                data["hyperparameters"] = DdpgHyperparameters(**hp)
            except ValueError as exc:
                raise ConfigError(f"hyperparameters: {exc}") from exc
        if "ensemble" in data:
            ens = data["ensemble"]
            if not isinstance(ens, dict):
                raise ConfigError("ensemble: must be an object")
            unknown = set(ens) - set(EnsembleSpec.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"ensemble.{sorted(unknown)[0]}: unknown field")
            overrides = []
            for i, o in enumerate(ens.get("overrides", [])):
                extra = set(o) - set(MemberOverride.__dataclass_fields__)
                if extra:
                    raise ConfigError(f"ensemble.overrides[{i}].{sorted(extra)[0]}: unknown field")
                overrides.append(MemberOverride(**o))
            data["ensemble"] = EnsembleSpec(ens.get("n_actors", 1),
                                            ens.get("n_critics", 0), overrides)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def _write_config_echo(config: ExperimentConfig, run_dir: Path) -> None:
    with open(run_dir / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _member_entropy(config: ExperimentConfig, member: int) -> list[int]:
    override = config.ensemble.override_for(member)
    if override.seed is not None:
        return [int(override.seed)]
    return [int(config.seed), member]


def _build_pipeline(config: ExperimentConfig, env_seed: int) -> ObservationPipeline:
    env_cfg = replace(config.env_config(), rng_seed=env_seed)
    return ObservationPipeline(make_env(config.environment, env_cfg),
                               config.frame_skip, config.obs_stack)


class _CurveWriter:
    """Learning-curve emission: deterministic columns in one file, wall-clock
    timing in a sibling file."""

    def __init__(self, run_dir: Path, member: int):
        self.curve_path = run_dir / f"learning_curve_{member:02d}.csv"
        self.timing_path = run_dir / f"timing_{member:02d}.csv"
        self._curve = open(self.curve_path, "w")
        self._timing = open(self.timing_path, "w")
        self._curve.write("episode,total_reward,steps,cumulative_steps\n")
        self._timing.write("episode,wall_time_s\n")
        self._t0 = time.monotonic()

    def row(self, episode: int, total_reward: float, steps: int, cumulative: int) -> None:
        self._curve.write(f"{episode},{total_reward!r},{steps},{cumulative}\n")
        self._timing.write(f"{episode},{time.monotonic() - self._t0:.3f}\n")

    def close(self) -> None:
        self._curve.close()
        self._timing.close()


def _save_member(run_dir: Path, member: int, actor, critic) -> tuple[str, str]:
    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    actor_name = f"actor_{member:02d}.ckpt"
    critic_name = f"critic_{member:02d}.ckpt"
    save_mlp(actor, ckpt / actor_name)
    save_mlp(critic, ckpt / critic_name)
    return actor_name, critic_name


def _train_pair_serial(config: ExperimentConfig, member: int, run_dir: Path) -> DdpgAgent:
    """Deterministic single-worker training loop for one actor-critic pair:
    one train step per environment step once warmup completes."""
    hp = config.hyperparameters
    entropy = _member_entropy(config, member)
    init_rng = _rng(*entropy, _TAG_INIT)
    noise_rng = _rng(*entropy, _TAG_NOISE)
    sample_rng = _rng(*entropy, _TAG_SAMPLE)
    env_seed_rng = _rng(*entropy, _TAG_ENV)
    warmup_rng = _rng(*entropy, _TAG_WARMUP)

    override = config.ensemble.override_for(member)
    widths = override.widths or config.widths
    sigma = override.noise_sigma if override.noise_sigma is not None else hp.noise_sigma

    pipe = _build_pipeline(config, int(env_seed_rng.integers(0, 2**31 - 1)))
    agent = DdpgAgent(pipe.state_dim, pipe.action_dim, hp, widths,
                      config.hidden_activation, init_rng)
    noise = OuNoise(pipe.action_dim, hp.noise_theta, sigma, hp.noise_dt)
    buffer = ReplayBuffer(config.buffer_capacity, pipe.state_dim, pipe.action_dim)

    _save_member(run_dir, member, agent.actor, agent.critic)
    curve = _CurveWriter(run_dir, member)
    decisions = 0
    episode = 0
    try:
        while decisions < config.total_steps:
            state = pipe.reset(seed=int(env_seed_rng.integers(0, 2**63 - 1)))
            noise.reset()
            ep_reward, ep_steps = 0.0, 0
            while True:
                if decisions < hp.warmup_steps:
                    action = warmup_rng.uniform(-1.0, 1.0, size=pipe.action_dim)
                else:
                    action = np.clip(agent.action(state) + noise.step(noise_rng), -1.0, 1.0)
                res = pipe.step(action)
                buffer.store(Transition(state, action, res.reward, res.observation,
                                        res.terminal and not res.info.get("timeout", False)))
                state = res.observation
                decisions += 1
                ep_reward += res.reward
                ep_steps += 1
                if decisions > hp.warmup_steps:
                    agent.train_step(buffer, sample_rng)
                if config.checkpoint_interval and decisions % config.checkpoint_interval == 0:
                    _save_member(run_dir, member, agent.actor, agent.critic)
                if res.terminal or decisions >= config.total_steps:
                    break
            curve.row(episode, ep_reward, ep_steps, decisions)
            episode += 1
    finally:
        curve.close()
    _save_member(run_dir, member, agent.actor, agent.critic)
    return agent


def _train_pair_parallel(config: ExperimentConfig, member: int, run_dir: Path) -> DdpgAgent:
    """Worker threads collect experience against published snapshots while
    the trainer paces itself to one train step per collected step."""
    hp = config.hyperparameters
    entropy = _member_entropy(config, member)
    init_rng = _rng(*entropy, _TAG_INIT)
    sample_rng = _rng(*entropy, _TAG_SAMPLE)

    override = config.ensemble.override_for(member)
    widths = override.widths or config.widths
    sigma = override.noise_sigma if override.noise_sigma is not None else hp.noise_sigma

    probe = _build_pipeline(config, 0)
    agent = DdpgAgent(probe.state_dim, probe.action_dim, hp, widths,
                      config.hidden_activation, init_rng)
    buffer = ReplayBuffer(config.buffer_capacity, probe.state_dim, probe.action_dim)
    box = SnapshotBox(make_ensemble([agent.actor], []))

    worker_seeds = [int(_rng(*entropy, _TAG_ENV, w).integers(0, 2**31 - 1))
                    for w in range(config.worker_count)]
    cfg = WorkerConfig(config.worker_count, worker_seeds,
                       config.snapshot_refresh_interval,
                       hp.noise_theta, sigma, hp.noise_dt)
    session = RolloutSession(
        cfg, lambda w: _build_pipeline(config, worker_seeds[w]), box, buffer,
        stop=lambda: buffer.total_stored >= config.total_steps,
        random_action_until=lambda: buffer.total_stored < hp.warmup_steps,
    )

    _save_member(run_dir, member, agent.actor, agent.critic)
    session.start()
    trained = 0
    while True:
        target = buffer.total_stored - hp.warmup_steps
        if trained < target and buffer.size >= hp.batch_size:
            agent.train_step(buffer, sample_rng)
            trained += 1
            if trained % config.snapshot_refresh_interval == 0:
                box.publish(make_ensemble([agent.actor], []))
            if config.checkpoint_interval and trained % config.checkpoint_interval == 0:
                _save_member(run_dir, member, agent.actor, agent.critic)
        elif session.alive():
            time.sleep(0.001)
        else:
            break
    report = session.join()
    if report.failures:
        log.warning("member %d: %d rollout worker(s) failed: %s",
                    member, len(report.failures), report.failures)
    curve = _CurveWriter(run_dir, member)
    cumulative = 0
    for i, s in enumerate(sorted(report.stats, key=lambda s: (s.worker_id, s.episode_index))):
        cumulative += s.steps
        curve.row(i, s.total_reward, s.steps, cumulative)
    curve.close()
    _save_member(run_dir, member, agent.actor, agent.critic)
    return agent


def _train_ace_joint(config: ExperimentConfig, run_dir: Path) -> AceTrainer:
    """Joint ensemble training: the ensemble-selected action (plus noise)
    drives one shared buffer; every member updates every step."""
    hp = config.hyperparameters
    n, m = config.ensemble.n_actors, config.ensemble.n_critics
    entropy = [int(config.seed)]
    init_rng = _rng(*entropy, _TAG_INIT)
    noise_rng = _rng(*entropy, _TAG_NOISE)
    sample_rng = _rng(*entropy, _TAG_SAMPLE)
    env_seed_rng = _rng(*entropy, _TAG_ENV)
    warmup_rng = _rng(*entropy, _TAG_WARMUP)

    member_widths = [config.ensemble.override_for(j).widths or config.widths
                     for j in range(max(n, m))]
    pipe = _build_pipeline(config, int(env_seed_rng.integers(0, 2**31 - 1)))
    trainer = AceTrainer(pipe.state_dim, pipe.action_dim, n, m, hp,
                         member_widths, config.hidden_activation, init_rng)
    noise = OuNoise(pipe.action_dim, hp.noise_theta, hp.noise_sigma, hp.noise_dt)
    buffer = ReplayBuffer(config.buffer_capacity, pipe.state_dim, pipe.action_dim)

    for j in range(n):
        _save_member(run_dir, j, trainer.actors[j], trainer.critics[j % m])
    curve = _CurveWriter(run_dir, 0)
    decisions = 0
    episode = 0
    try:
        while decisions < config.total_steps:
            state = pipe.reset(seed=int(env_seed_rng.integers(0, 2**63 - 1)))
            noise.reset()
            ep_reward, ep_steps = 0.0, 0
            while True:
                if decisions < hp.warmup_steps:
                    action = warmup_rng.uniform(-1.0, 1.0, size=pipe.action_dim)
                else:
                    action = trainer.behavior_action(state, noise, noise_rng)
                res = pipe.step(action)
                buffer.store(Transition(state, action, res.reward, res.observation,
                                        res.terminal and not res.info.get("timeout", False)))
                state = res.observation
                decisions += 1
                ep_reward += res.reward
                ep_steps += 1
                if decisions > hp.warmup_steps:
                    trainer.train_step(buffer, sample_rng)
                if res.terminal or decisions >= config.total_steps:
                    break
            curve.row(episode, ep_reward, ep_steps, decisions)
            episode += 1
    finally:
        curve.close()
    for j in range(n):
        _save_member(run_dir, j, trainer.actors[j], trainer.critics[j % m])
    return trainer


def _write_manifest(config: ExperimentConfig, run_dir: Path, members: list[dict],
                    state_dim: int, action_dim: int) -> None:
    manifest = {
        "format_version": _MANIFEST_VERSION,
        "environment": config.environment,
        "env": config.env,
        "frame_skip": config.frame_skip,
        "obs_stack": config.obs_stack,
        "hidden_activation": config.hidden_activation,
        "train_mode": config.train_mode,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "members": members,
    }
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(config: ExperimentConfig, out_dir=None) -> Path:
    """Train per the config and return the run directory (config echo,
    checkpoints + manifest, learning curves)."""
    config.validate()
    if out_dir is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out_dir = Path("runs") / f"{stamp}-{config.train_mode}-{config.label()}"
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_config_echo(config, run_dir)

    probe = _build_pipeline(config, 0)
    state_dim, action_dim = probe.state_dim, probe.action_dim

    members = []
    if config.train_mode == "ace":
        _train_ace_joint(config, run_dir)
        n, m = config.ensemble.n_actors, config.ensemble.n_critics
        for j in range(n):
            o = config.ensemble.override_for(j)
            members.append({"actor": f"actor_{j:02d}.ckpt",
                            "critic": f"critic_{j:02d}.ckpt",
                            "widths": list(o.widths or config.widths),
                            "seed": o.seed, "noise_sigma": o.noise_sigma,
                            "critic_shared_from": j % m})
    else:
        train = _train_pair_serial if config.worker_count == 1 else _train_pair_parallel
        for i in range(config.ensemble.n_actors):
            log.info("training pair %d/%d", i + 1, config.ensemble.n_actors)
            train(config, i, run_dir)
            o = config.ensemble.override_for(i)
            members.append({"actor": f"actor_{i:02d}.ckpt",
                            "critic": f"critic_{i:02d}.ckpt",
                            "widths": list(o.widths or config.widths),
                            "seed": o.seed, "noise_sigma": o.noise_sigma})
    _write_manifest(config, run_dir, members, state_dim, action_dim)
    return run_dir


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

_LABEL_RE = re.compile(r"A(\d+)C(\d+)")


def parse_label(label: str) -> tuple[int, int]:
    m = _LABEL_RE.fullmatch(label)
    if not m:
        raise ValueError(f"label {label!r} is not of the form A<X>C<Y>")
    return int(m.group(1)), int(m.group(2))


@dataclass
class EvaluationReport:
    """AXCY evaluation outcome: per-episode rewards and the summary columns
    in the ensemble-comparison table order."""

    label: str
    episodes: int
    n_actors: int
    n_critics: int
    rewards: list[float]
    fells: list[bool]
    steps: list[int]
    average_reward: float
    max_reward: float
    fall_count: int
    fall_reward_threshold: float

    @classmethod
    def build(cls, label: str, rewards, fells, steps, threshold: float | None):
        n, m = parse_label(label)
        rewards = [float(r) for r in rewards]
        if threshold is None:
            # default: 30% of the empirical best episode of this evaluation;
            # pass an explicit threshold (e.g. from an A1C0 baseline) to
            # compare configurations on equal footing
            threshold = 0.3 * max(rewards)
        falls = sum(1 for r, f in zip(rewards, fells) if f or r < threshold)
        return cls(label, len(rewards), n, m, rewards, list(fells), list(steps),
                   float(np.mean(rewards)), float(np.max(rewards)), falls,
                   float(threshold))

    def row(self) -> str:
        return (f"{self.label},{self.episodes},{self.n_actors},{self.n_critics},"
                f"{self.average_reward!r},{self.max_reward!r},{self.fall_count},"
                f"{self.fall_reward_threshold!r}")


REPORT_HEADER = ("label,episodes,n_actors,n_critics,average_reward,max_reward,"
                 "fall_count,fall_reward_threshold")


def load_ensemble(run_dir, label: str) -> tuple[EnsemblePolicy, dict]:
    """Load the AXCY subset of a trained run: the first X actors, and either
    no critic, the critic paired with actor 0, or all X pairing critics."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path}: no manifest found")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != _MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('format_version')!r}")
    x, y = parse_label(label)
    members = manifest["members"]
    if x < 1 or x > len(members):
        raise ValueError(f"label {label}: run has {len(members)} actors, asked for {x}")
    if y not in (0, 1, x):
        raise ValueError(f"label {label}: critic count must be 0, 1 or {x}")
    if y == 0 and x != 1:
        raise ValueError(f"label {label}: critic-less evaluation needs exactly 1 actor")
    ckpt = run_dir / "checkpoints"
    actors = [load_mlp(ckpt / members[j]["actor"]) for j in range(x)]
    critics = [load_mlp(ckpt / members[j]["critic"]) for j in range(y)]
    ens = make_ensemble(actors, critics)
    if ens.state_dim != manifest["state_dim"] or ens.action_dim != manifest["action_dim"]:
        raise ValueError("checkpoint dims disagree with the manifest")
    return ens, manifest


def _pipeline_from_manifest(manifest: dict, env_seed: int = 0) -> ObservationPipeline:
    env_cfg = _ENV_CONFIGS[manifest["environment"]](**manifest["env"])
    env_cfg = replace(env_cfg, rng_seed=env_seed)
    return ObservationPipeline(make_env(manifest["environment"], env_cfg),
                               manifest["frame_skip"], manifest["obs_stack"])


def cmd_evaluate(run_dir, label: str, episodes: int = 100, seed: int = 0,
                 fall_reward_threshold: float | None = None,
                 dump_trajectories: bool = False,
                 report_dir=None) -> EvaluationReport:
    """Deterministic noise-free evaluation of an AXCY ensemble over seeded
    episodes; writes report.csv and rewards.csv (and optional per-episode
    trajectory dumps with the selection traces)."""
    ens, manifest = load_ensemble(run_dir, label)
    pipe = _pipeline_from_manifest(manifest)
    if report_dir is None:
        report_dir = Path(run_dir) / "eval" / f"{label}_seed{seed}"
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)

    rewards, fells, steps = [], [], []
    for ep in range(episodes):
        ep_seed = int(_rng(seed, _TAG_EVAL, ep).integers(0, 2**63 - 1))
        state = pipe.reset(seed=ep_seed)
        writer = None
        fh = None
        if dump_trajectories:
            traj_dir = report_dir / "trajectories"
            traj_dir.mkdir(exist_ok=True)
            fh = open(traj_dir / f"episode_{ep:03d}.csv", "w")
            writer = TrajectoryWriter(fh, pipe.state_dim, pipe.action_dim,
                                      n_scores=ens.n_actors if ens.n_critics else 0)
        total, n, fell = 0.0, 0, False
        while True:
            action, trace = select_action(ens, state)
            res = pipe.step(action)
            if writer is not None:
                if trace.scores is not None:
                    writer.record(n, state, action, res.reward, res.terminal,
                                  scores=trace.scores, chosen_index=trace.chosen_index)
                else:
                    writer.record(n, state, action, res.reward, res.terminal)
            state = res.observation
            total += res.reward
            n += 1
            if res.terminal:
                fell = bool(res.info.get("fell", False))
                break
        if fh is not None:
            fh.close()
        rewards.append(total)
        fells.append(fell)
        steps.append(n)

    report = EvaluationReport.build(label, rewards, fells, steps, fall_reward_threshold)
    with open(report_dir / "report.csv", "w") as fh:
        fh.write(REPORT_HEADER + "\n" + report.row() + "\n")
    with open(report_dir / "rewards.csv", "w") as fh:
        fh.write("episode,reward,steps,fell\n")
        for i, (r, s, f) in enumerate(zip(report.rewards, report.steps, report.fells)):
            fh.write(f"{i},{r!r},{s},{int(f)}\n")
    return report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

def cmd_ablate_activation(config: ExperimentConfig, kinds: list[str],
                          out_dir) -> list[tuple[str, EvaluationReport]]:
    """One seeded training run per activation kind, identical otherwise;
    learning curves live in the per-kind run dirs, the final evaluations in
    ablation_summary.csv."""
    if not kinds:
        raise ValueError("need at least one activation kind")
    for kind in kinds:
        if kind not in ACTIVATION_KINDS:
            raise ValueError(f"unknown activation kind: {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for kind in kinds:
        cfg = replace(config, hidden_activation=kind)
        run_dir = cmd_train(cfg, out_dir / f"act_{kind}")
        report = cmd_evaluate(run_dir, cfg.label(), cfg.evaluation_episodes,
                              seed=cfg.seed,
                              fall_reward_threshold=cfg.fall_reward_threshold)
        results.append((kind, report))
    with open(out_dir / "ablation_summary.csv", "w") as fh:
        fh.write("hidden_activation," + REPORT_HEADER + "\n")
        for kind, report in results:
            fh.write(f"{kind},{report.row()}\n")
    return results


def cmd_ablate_workers(config: ExperimentConfig, counts: list[int],
                       out_dir) -> list[tuple[int, EvaluationReport]]:
    """One training run per data-collection worker count, identical
    otherwise; emits workers_summary.csv plus per-count curves."""
    if not counts or any(c < 1 for c in counts):
        raise ValueError("worker counts must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for count in counts:
        cfg = replace(config, worker_count=count)
        run_dir = cmd_train(cfg, out_dir / f"workers_{count:02d}")
        report = cmd_evaluate(run_dir, cfg.label(), cfg.evaluation_episodes,
                              seed=cfg.seed,
                              fall_reward_threshold=cfg.fall_reward_threshold)
        results.append((count, report))
    with open(out_dir / "workers_summary.csv", "w") as fh:
        fh.write("worker_count," + REPORT_HEADER + "\n")
        for count, report in results:
            fh.write(f"{count},{report.row()}\n")
    return results


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    config = (ExperimentConfig.from_json(args.config) if args.config
              else ExperimentConfig())
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="acekit",
                                     description="DDPG / ensemble-selection training harness")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="train per a config file")
    p_train.add_argument("--config", help="JSON config path (defaults apply if omitted)")
    p_train.add_argument("--seed", type=int, default=None, help="override config seed")
    p_train.add_argument("--out", default=None, help="run directory")

    p_eval = sub.add_parser("evaluate", help="evaluate a trained run as AXCY")
    p_eval.add_argument("--run", required=True, help="run directory with manifest.json")
    p_eval.add_argument("--label", required=True, help="ensemble label, e.g. A10C10")
    p_eval.add_argument("--episodes", type=int, default=100)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--threshold", type=float, default=None,
                        help="fall reward threshold (default: 30%% of this run's max)")
    p_eval.add_argument("--dump-trajectories", action="store_true")

    p_act = sub.add_parser("ablate-activation", help="compare hidden activations")
    p_act.add_argument("--config", help="JSON config path")
    p_act.add_argument("--seed", type=int, default=None)
    p_act.add_argument("--kinds", required=True, help="comma list, e.g. selu,relu")
    p_act.add_argument("--out", required=True)

    p_wrk = sub.add_parser("ablate-workers", help="compare rollout worker counts")
    p_wrk.add_argument("--config", help="JSON config path")
    p_wrk.add_argument("--seed", type=int, default=None)
    p_wrk.add_argument("--counts", required=True, help="comma list, e.g. 1,2,4")
    p_wrk.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.verb == "train":
            run_dir = cmd_train(_load_config(args), args.out)
            print(f"run directory: {run_dir}")
        elif args.verb == "evaluate":
            report = cmd_evaluate(args.run, args.label, args.episodes, args.seed,
                                  args.threshold, args.dump_trajectories)
            print(REPORT_HEADER)
            print(report.row())
        elif args.verb == "ablate-activation":
            results = cmd_ablate_activation(_load_config(args),
                                            args.kinds.split(","), args.out)
            print("hidden_activation," + REPORT_HEADER)
            for kind, report in results:
                print(f"{kind},{report.row()}")
        elif args.verb == "ablate-workers":
            counts = [int(c) for c in args.counts.split(",")]
            results = cmd_ablate_workers(_load_config(args), counts, args.out)
            print("worker_count," + REPORT_HEADER)
            for count, report in results:
                print(f"{count},{report.row()}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

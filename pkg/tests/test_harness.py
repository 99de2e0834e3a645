"""Harness: config validation, run dirs, evaluation reports, ablations, CLI."""

import json

import numpy as np
import pytest

from acekit.harness import (
    ConfigError,
    EnsembleSpec,
    EvaluationReport,
    ExperimentConfig,
    MemberOverride,
    REPORT_HEADER,
    checkpoint_load,
    checkpoint_save,
    cmd_ablate_activation,
    cmd_ablate_workers,
    cmd_evaluate,
    cmd_train,
    load_ensemble,
    main,
    parse_label,
)
from acekit.ddpg import DdpgHyperparameters, make_actor
from acekit.numerics import mlp_forward


def tiny_config(**kw) -> ExperimentConfig:
    """Pendulum config small enough for sub-second training in tests."""
    base = dict(
        environment="pendulum",
        env={"episode_cap": 25},
        seed=0,
        frame_skip=1,
        obs_stack=1,
        widths=[8],
        hyperparameters=DdpgHyperparameters(batch_size=16, warmup_steps=20),
        total_steps=120,
        buffer_capacity=10_000,
        evaluation_episodes=3,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_defaults_follow_training_table(self):
        cfg = ExperimentConfig()
        assert cfg.hyperparameters.gamma == 0.96
        assert cfg.hyperparameters.batch_size == 128
        assert cfg.buffer_capacity == 2_000_000
        assert cfg.widths == [64, 32]
        assert cfg.frame_skip == 4 and cfg.obs_stack == 3
        assert cfg.evaluation_episodes == 100

    def test_invalid_critic_count_named(self):
        with pytest.raises(ConfigError, match="ensemble.n_critics"):
            ExperimentConfig(ensemble=EnsembleSpec(n_actors=10, n_critics=2))

    def test_zero_actors_named(self):
        with pytest.raises(ConfigError, match="ensemble.n_actors"):
            ExperimentConfig(ensemble=EnsembleSpec(n_actors=0, n_critics=0))

    def test_unknown_environment_named(self):
        with pytest.raises(ConfigError, match="environment"):
            ExperimentConfig(environment="walker")

    def test_unknown_top_level_field_named(self):
        with pytest.raises(ConfigError, match="gammma"):
            ExperimentConfig.from_dict({"gammma": 0.9})

    def test_unknown_env_field_named(self):
        with pytest.raises(ConfigError, match="env"):
            ExperimentConfig(environment="pendulum", env={"bogus": 1})

    def test_unknown_hyperparameter_named(self):
        with pytest.raises(ConfigError, match="hyperparameters.learning_rate"):
            ExperimentConfig.from_dict({"hyperparameters": {"learning_rate": 1e-3}})

    def test_ace_mode_requires_critics(self):
        with pytest.raises(ConfigError, match="n_critics"):
            ExperimentConfig(train_mode="ace",
                             ensemble=EnsembleSpec(n_actors=1, n_critics=0))

    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config(ensemble=EnsembleSpec(
            n_actors=2, n_critics=2,
            overrides=[MemberOverride(seed=5, widths=[6], noise_sigma=0.3)]))
        path = tmp_path / "cfg.json"
        with open(path, "w") as fh:
            json.dump(cfg.to_dict(), fh)
        back = ExperimentConfig.from_json(path)
        assert back == cfg

    def test_label(self):
        cfg = tiny_config(ensemble=EnsembleSpec(n_actors=3, n_critics=3))
        assert cfg.label() == "A3C3"


class TestTrain:
    def test_zero_steps_writes_initial_checkpoint_only(self, tmp_path):
        cfg = tiny_config(total_steps=0)
        run = cmd_train(cfg, tmp_path / "run")
        assert (run / "checkpoints" / "actor_00.ckpt").exists()
        assert (run / "manifest.json").exists()
        curve = (run / "learning_curve_00.csv").read_text().splitlines()
        assert curve == ["episode,total_reward,steps,cumulative_steps"]

    def test_config_echoed(self, tmp_path):
        cfg = tiny_config(total_steps=0)
        run = cmd_train(cfg, tmp_path / "run")
        echoed = ExperimentConfig.from_json(run / "config.json")
        assert echoed == cfg

    def test_single_worker_runs_byte_identical(self, tmp_path):
        cfg = tiny_config()
        run_a = cmd_train(cfg, tmp_path / "a")
        run_b = cmd_train(cfg, tmp_path / "b")
        curve_a = (run_a / "learning_curve_00.csv").read_bytes()
        curve_b = (run_b / "learning_curve_00.csv").read_bytes()
        assert curve_a == curve_b
        ckpt_a = (run_a / "checkpoints" / "actor_00.ckpt").read_bytes()
        ckpt_b = (run_b / "checkpoints" / "actor_00.ckpt").read_bytes()
        assert ckpt_a == ckpt_b

    def test_multiple_pairs_trained(self, tmp_path):
        cfg = tiny_config(
            total_steps=60,
            ensemble=EnsembleSpec(n_actors=2, n_critics=2,
                                  overrides=[MemberOverride(),
                                             MemberOverride(widths=[6])]))
        run = cmd_train(cfg, tmp_path / "run")
        manifest = json.loads((run / "manifest.json").read_text())
        assert len(manifest["members"]) == 2
        assert (run / "checkpoints" / "critic_01.ckpt").exists()
        ens, _ = load_ensemble(run, "A2C2")
        assert ens.n_actors == 2 and ens.n_critics == 2
        # heterogeneous widths survived
        assert ens.actors[1].weights[0].shape[0] == 6

    def test_ace_mode_trains_jointly(self, tmp_path):
        cfg = tiny_config(train_mode="ace", total_steps=80,
                          ensemble=EnsembleSpec(n_actors=2, n_critics=2))
        run = cmd_train(cfg, tmp_path / "run")
        ens, _ = load_ensemble(run, "A2C2")
        assert ens.n_actors == 2

    def test_parallel_worker_training_completes(self, tmp_path):
        cfg = tiny_config(worker_count=2, total_steps=150,
                          snapshot_refresh_interval=25)
        run = cmd_train(cfg, tmp_path / "run")
        assert (run / "checkpoints" / "actor_00.ckpt").exists()
        curve = (run / "learning_curve_00.csv").read_text().splitlines()
        assert len(curve) > 1  # collected at least one episode


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    cfg = tiny_config()
    return cmd_train(cfg, tmp_path_factory.mktemp("runs") / "run"), cfg


class TestEvaluate:
    def test_repeat_evaluations_identical(self, trained_run, tmp_path):
        run, _ = trained_run
        a = cmd_evaluate(run, "A1C0", episodes=4, seed=3, report_dir=tmp_path / "a")
        b = cmd_evaluate(run, "A1C0", episodes=4, seed=3, report_dir=tmp_path / "b")
        assert a.rewards == b.rewards
        assert (tmp_path / "a" / "report.csv").read_bytes() == \
               (tmp_path / "b" / "report.csv").read_bytes()
        assert (tmp_path / "a" / "rewards.csv").read_bytes() == \
               (tmp_path / "b" / "rewards.csv").read_bytes()

    def test_single_episode_average_equals_max(self, trained_run, tmp_path):
        run, _ = trained_run
        report = cmd_evaluate(run, "A1C0", episodes=1, seed=1, report_dir=tmp_path / "r")
        assert report.average_reward == report.max_reward

    def test_report_arithmetic_recomputable(self, trained_run, tmp_path):
        run, _ = trained_run
        report = cmd_evaluate(run, "A1C1", episodes=5, seed=2, report_dir=tmp_path / "r")
        lines = (tmp_path / "r" / "rewards.csv").read_text().strip().splitlines()[1:]
        rewards = [float(line.split(",")[1]) for line in lines]
        fells = [bool(int(line.split(",")[3])) for line in lines]
        assert report.average_reward == pytest.approx(np.mean(rewards), abs=1e-9)
        assert report.max_reward == max(rewards)
        refalls = sum(1 for r, f in zip(rewards, fells)
                      if f or r < report.fall_reward_threshold)
        assert report.fall_count == refalls

    def test_label_exceeding_actors_rejected(self, trained_run):
        run, _ = trained_run
        with pytest.raises(ValueError, match="1 actors"):
            cmd_evaluate(run, "A2C1", episodes=1)

    def test_invalid_critic_label_rejected(self, trained_run):
        run, _ = trained_run
        with pytest.raises(ValueError, match="critic count"):
            cmd_evaluate(run, "A1C2", episodes=1)

    def test_malformed_label_rejected(self, trained_run):
        run, _ = trained_run
        with pytest.raises(ValueError, match="not of the form"):
            cmd_evaluate(run, "B1C0", episodes=1)

    def test_trajectory_dump_has_score_columns(self, trained_run, tmp_path):
        run, _ = trained_run
        cmd_evaluate(run, "A1C1", episodes=1, seed=0, dump_trajectories=True,
                     report_dir=tmp_path / "r")
        traj = (tmp_path / "r" / "trajectories" / "episode_000.csv").read_text()
        header = traj.splitlines()[0]
        assert "score_0" in header and "chosen_index" in header

    def test_evaluation_leaves_checkpoints_untouched(self, trained_run, tmp_path):
        run, _ = trained_run
        before = (run / "checkpoints" / "actor_00.ckpt").read_bytes()
        cmd_evaluate(run, "A1C0", episodes=2, seed=5, report_dir=tmp_path / "r")
        assert (run / "checkpoints" / "actor_00.ckpt").read_bytes() == before

    def test_explicit_threshold_used(self):
        report = EvaluationReport.build(
            "A1C0", rewards=[1.0, 5.0, 10.0], fells=[False, False, False],
            steps=[3, 3, 3], threshold=4.0)
        assert report.fall_count == 1
        assert report.fall_reward_threshold == 4.0

    def test_default_threshold_is_30_percent_of_max(self):
        report = EvaluationReport.build(
            "A1C0", rewards=[1.0, 5.0, 10.0], fells=[False, False, False],
            steps=[3, 3, 3], threshold=None)
        assert report.fall_reward_threshold == pytest.approx(3.0)
        assert report.fall_count == 1

    def test_fell_flag_counts_even_above_threshold(self):
        report = EvaluationReport.build(
            "A1C0", rewards=[10.0, 9.0], fells=[True, False], steps=[2, 2],
            threshold=0.5)
        assert report.fall_count == 1


class TestCheckpointAliases:
    def test_round_trip_preserves_forward_outputs(self, tmp_path):
        rng = np.random.default_rng(0)
        net = make_actor(3, 2, (6, 4), rng=rng)
        path = tmp_path / "net.ckpt"
        checkpoint_save(net, path)
        back = checkpoint_load(path)
        for _ in range(100):
            x = rng.normal(size=3)
            np.testing.assert_array_equal(mlp_forward(net, x)[0], mlp_forward(back, x)[0])

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"\x00" * 64)
        with pytest.raises(ValueError):
            checkpoint_load(path)


class TestAblations:
    def test_single_kind_matches_plain_training(self, tmp_path):
        cfg = tiny_config(total_steps=60)
        results = cmd_ablate_activation(cfg, ["selu"], tmp_path / "abl")
        assert len(results) == 1
        plain = cmd_train(cfg, tmp_path / "plain")
        curve_a = (tmp_path / "abl" / "act_selu" / "learning_curve_00.csv").read_bytes()
        curve_b = (plain / "learning_curve_00.csv").read_bytes()
        assert curve_a == curve_b

    def test_two_kinds_differ_only_via_activation(self, tmp_path):
        cfg = tiny_config(total_steps=60)
        results = cmd_ablate_activation(cfg, ["selu", "relu"], tmp_path / "abl")
        assert [k for k, _ in results] == ["selu", "relu"]
        echo_a = json.loads((tmp_path / "abl" / "act_selu" / "config.json").read_text())
        echo_b = json.loads((tmp_path / "abl" / "act_relu" / "config.json").read_text())
        diff = {k for k in echo_a if echo_a[k] != echo_b[k]}
        assert diff == {"hidden_activation"}
        summary = (tmp_path / "abl" / "ablation_summary.csv").read_text().splitlines()
        assert summary[0] == "hidden_activation," + REPORT_HEADER
        assert len(summary) == 3

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="swish"):
            cmd_ablate_activation(tiny_config(), ["swish"], tmp_path / "abl")

    def test_empty_kinds_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            cmd_ablate_activation(tiny_config(), [], tmp_path / "abl")

    def test_worker_ablation_summary(self, tmp_path):
        cfg = tiny_config(total_steps=60)
        results = cmd_ablate_workers(cfg, [1, 2], tmp_path / "wrk")
        assert [c for c, _ in results] == [1, 2]
        summary = (tmp_path / "wrk" / "workers_summary.csv").read_text().splitlines()
        assert summary[0].startswith("worker_count,")
        assert len(summary) == 3


class TestCli:
    def test_train_then_evaluate(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        with open(cfg_path, "w") as fh:
            json.dump(tiny_config().to_dict(), fh)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["evaluate", "--run", str(out), "--label", "A1C0",
                     "--episodes", "2"]) == 0
        printed = capsys.readouterr().out
        assert "A1C0,2,1,0," in printed

    def test_invalid_config_exits_2(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text('{"ensemble": {"n_actors": 10, "n_critics": 2}}')
        assert main(["train", "--config", str(cfg_path)]) == 2
        assert "n_critics" in capsys.readouterr().err

    def test_seed_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        with open(cfg_path, "w") as fh:
            json.dump(tiny_config(total_steps=0).to_dict(), fh)
        out = tmp_path / "run"
        main(["train", "--config", str(cfg_path), "--seed", "77", "--out", str(out)])
        echoed = json.loads((out / "config.json").read_text())
        assert echoed["seed"] == 77


def test_parse_label():
    assert parse_label("A10C10") == (10, 10)
    assert parse_label("A1C0") == (1, 0)
    with pytest.raises(ValueError):
        parse_label("AC")

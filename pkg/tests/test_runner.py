"""Metrics, experiment pipeline artifacts, determinism, and the CLI."""

import json
from pathlib import Path

import numpy as np
import pytest

from localopf import Trajectory, evaluate
from localopf.cli import STAGE_EXIT, main
from localopf.runner import (
    config_hash,
    load_trajectory,
    run_experiment,
    save_trajectory,
    volt_violation_series,
    write_manifest,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "localopf" / "data"
CONFIG8 = DATA / "config_8bus.yaml"


def _traj(t, x, v, objective):
    T, n = np.asarray(v).shape
    return Trajectory(
        t=np.asarray(t),
        x=np.asarray(x, dtype=float),
        v=np.asarray(v, dtype=float),
        p_u=np.zeros((T, n)),
        q_u=np.zeros((T, n)),
        objective=np.asarray(objective, dtype=float),
    )


def test_evaluate_identical_trajectories_zero_gap():
    v = np.full((3, 2), 1.0)
    a = _traj([0, 1, 2], np.zeros((3, 4)), v, [1.0, 2.0, 3.0])
    rep = evaluate(a, a, 0.9025, 1.1025)
    assert rep.absolute_gap == 0.0
    assert rep.relative_gap == 0.0
    assert rep.volt_violation == 0.0
    assert rep.excluded_steps == 0


def test_evaluate_hand_built_two_step():
    # magnitudes: limits V in [0.9, 1.1]; step 1 under by 0.1, step 2 over by 0.1
    v_ctrl = np.array([[0.64, 1.0], [1.44, 1.0]])
    ctrl = _traj([0, 1], np.zeros((2, 4)), v_ctrl, [2.0, 3.0])
    orac = _traj([0, 1], np.zeros((2, 4)), np.ones((2, 2)), [1.0, 0.0])
    rep = evaluate(ctrl, orac, 0.81, 1.21)
    assert rep.absolute_gap == pytest.approx(0.5 * (1.0 + 3.0), abs=1e-12)
    # the zero-oracle step is excluded and counted
    assert rep.relative_gap == pytest.approx(1.0, abs=1e-12)
    assert rep.excluded_steps == 1
    assert rep.volt_violation == pytest.approx(0.1, abs=1e-12)
    assert rep.per_step["absolute_gap"] == [1.0, 3.0]


def test_evaluate_rejects_horizon_mismatch():
    a = _traj([0], np.zeros((1, 2)), np.ones((1, 1)), [0.0])
    b = _traj([0, 1], np.zeros((2, 2)), np.ones((2, 1)), [0.0, 0.0])
    with pytest.raises(ValueError):
        evaluate(a, b, 0.9, 1.1)


def test_volt_violation_series_hand_computed():
    v = np.array([[0.9604, 1.0], [1.1025, 1.1236]])  # V = [[0.98,1],[1.05,1.06]]
    out = volt_violation_series(v, 0.9801, 1.0404)  # V in [0.99, 1.02]
    np.testing.assert_allclose(out, [0.01, np.hypot(0.03, 0.04)], atol=1e-12)


def test_trajectory_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    T, n = 4, 3
    traj = _traj(np.arange(T), rng.normal(size=(T, 2 * n)),
                 rng.uniform(0.9, 1.1, (T, n)), rng.normal(size=T) ** 2)
    traj = Trajectory(t=traj.t, x=traj.x, v=traj.v,
                      p_u=rng.normal(size=(T, n)), q_u=rng.normal(size=(T, n)),
                      objective=traj.objective)
    path = tmp_path / "traj.csv"
    save_trajectory(traj, path, with_objective=True)
    back = load_trajectory(path)
    np.testing.assert_array_equal(back.t, traj.t)
    np.testing.assert_array_equal(back.x, traj.x)  # repr() round-trips exactly
    np.testing.assert_array_equal(back.v, traj.v)
    np.testing.assert_array_equal(back.p_u, traj.p_u)
    np.testing.assert_array_equal(back.q_u, traj.q_u)
    np.testing.assert_array_equal(back.objective, traj.objective)


def test_config_hash_stable_and_sensitive():
    a = {"x": 1, "nested": {"b": 2, "a": 1}}
    b = {"nested": {"a": 1, "b": 2}, "x": 1}
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({"x": 2, "nested": {"b": 2, "a": 1}})
    assert len(config_hash(a)) == 16


def test_write_manifest_sorted(tmp_path):
    path = tmp_path / "manifest.txt"
    write_manifest(path, {"zeta": 1, "alpha": "two"})
    assert path.read_text() == "alpha=two\nzeta=1\n"


# ---------------------------------------------------------------------------
# End-to-end pipeline on the small shipped configuration


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run8")
    return run_experiment(CONFIG8, output_dir=out)


EXPECTED_FILES = [
    "training_log.csv", "policy.npz", "controller_trajectory.csv",
    "no_control_trajectory.csv", "baseline_trajectory.csv",
    "oracle_trajectory.csv", "report.json", "manifest.txt",
]


def test_run_experiment_artifacts(run_dir):
    for name in EXPECTED_FILES:
        assert (run_dir / name).exists(), name
    with open(run_dir / "report.json", encoding="utf-8") as fh:
        rep = json.load(fh)
    for section in ("controller", "no_control", "baseline", "stability"):
        assert section in rep
    assert rep["controller"]["volt_violation"] >= 0.0
    # trained controller beats the uncontrolled plant on this instance
    assert rep["controller"]["volt_violation"] < rep["no_control"]["volt_violation"]
    manifest = dict(
        line.split("=", 1) for line in
        (run_dir / "manifest.txt").read_text().strip().splitlines()
    )
    assert manifest["n_bus"] == "7"
    assert "config_hash" in manifest and "rho" in manifest


def test_run_experiment_deterministic(run_dir, tmp_path):
    again = run_experiment(CONFIG8, output_dir=tmp_path / "rerun")
    for name in EXPECTED_FILES:
        if name in ("report.json",):  # wall-clock timings live here
            continue
        a = (run_dir / name).read_bytes()
        b = (again / name).read_bytes()
        assert a == b, f"{name} differs between identical reruns"


def test_run_experiment_missing_output_dir(tmp_path, monkeypatch):
    import yaml

    from localopf.runner import StageError, load_config

    cfg = load_config(CONFIG8)
    cfg.pop("output_dir", None)
    path = tmp_path / "no_out.yaml"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh)
    monkeypatch.delenv("LOCALOPF_OUTDIR", raising=False)
    with pytest.raises(StageError) as exc:
        run_experiment(path)
    assert exc.value.stage == "config"


# ---------------------------------------------------------------------------
# CLI


def test_cli_build_feeder(capsys):
    assert main(["build-feeder", str(CONFIG8)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_bus"] == 7
    assert out["R_symmetric"] and out["X_symmetric"]
    assert out["R_min_eig"] > 0


def test_cli_build_feeder_bad_path(tmp_path, capsys):
    import yaml

    cfg = tmp_path / "bad.yaml"
    with open(cfg, "w", encoding="utf-8") as fh:
        yaml.safe_dump({"feeder": "missing.txt"}, fh)
    assert main(["build-feeder", str(cfg)]) == STAGE_EXIT["feeder"]


def test_cli_gen_scenario(tmp_path, capsys):
    out = tmp_path / "scn.csv"
    assert main(["gen-scenario", str(CONFIG8), "--seed", "3",
                 "--output", str(out)]) == 0
    assert out.exists() and out.with_suffix(".yaml").exists()
    from localopf.scenario import load_scenario

    scn = load_scenario(out, out.with_suffix(".yaml"))
    assert scn.seed == 3
    assert len(scn) == 120  # horizon_train of the shipped config


def test_cli_check_conditions(capsys):
    assert main(["check-conditions", str(CONFIG8)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["all_ok"] is True
    assert out["c3_margin"] > 0


def test_cli_check_conditions_fails_on_big_alpha(tmp_path, capsys):
    # a too-large step size has no admissible gain clamp at all, so a
    # pre-saved policy is needed to reach the report
    from localopf import init_policy, load_feeder, save_policy

    graph = load_feeder(DATA / "feeder_8bus.txt")
    pol = init_policy(graph, [3, 5, 7], k_max=0.05, seed=0)
    ckpt = tmp_path / "pol.npz"
    save_policy(pol, ckpt)
    code = main(["check-conditions", str(CONFIG8), "--policy", str(ckpt),
                 "-o", "trainer.alpha=1.01"])
    assert code == STAGE_EXIT["stability"]
    out = json.loads(capsys.readouterr().out)
    assert out["step_ok"] is False


def test_cli_evaluate(run_dir, capsys):
    code = main(["evaluate", str(run_dir / "controller_trajectory.csv"),
                 str(run_dir / "oracle_trajectory.csv"),
                 "--v-lo", "0.9025", "--v-hi", "1.1025"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["absolute_gap"] >= 0.0


def test_cli_run_reports_stage_exit_code(tmp_path, capsys):
    import yaml

    from localopf.runner import load_config

    cfg = load_config(CONFIG8)
    cfg["feeder"] = "does_not_exist.txt"
    cfg["output_dir"] = str(tmp_path / "out")
    path = tmp_path / "broken.yaml"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh)
    assert main(["run", str(path)]) == STAGE_EXIT["feeder"]


def test_cli_train_and_overrides(tmp_path, capsys):
    out = tmp_path / "train_out"
    code = main(["train", str(CONFIG8), "--output", str(out),
                 "-o", "trainer.epochs=1", "-o", "scenario.horizon_train=16"])
    assert code == 0
    assert (out / "policy.npz").exists()
    log = (out / "training_log.csv").read_text().strip().splitlines()
    assert log[0].startswith("epoch,")
    assert len(log) == 2  # header + 1 epoch

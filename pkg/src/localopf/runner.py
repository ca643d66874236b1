"""Metrics, trajectory bookkeeping, and experiment orchestration.

Reproduces the full pipeline — generate scenarios, train the local policies,
operate the controller on the nonlinear plant, solve the per-slot ground
truth, evaluate — and writes every artifact (trajectory CSVs, training log,
evaluation report, flat manifest) to a run directory.  Reruns with an
identical config are bit-identical at the CSV level; wall-clock timings live
only in the JSON report.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .controller import (
    ControllerConfig,
    ControllerState,
    check_stability,
    plant_voltage,
    rho_alpha,
    step,
)
from .feeder import FeederGraph, LinearVoltageModel, build_sensitivities, load_feeder
from .oracle import BaselineState, baseline_step, solve_opf_linear
from .policy import save_policy
from .scenario import (
    GeneratorConfig,
    Scenario,
    convexity_constants,
    cost_value,
    generate_profile,
)
from .trainer import TrainerConfig, train


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed record of setpoints, voltages, and objective values."""

    t: np.ndarray  # (T,)
    x: np.ndarray  # (T, 2N)
    v: np.ndarray  # (T, N) squared voltages
    p_u: np.ndarray  # (T, N)
    q_u: np.ndarray  # (T, N)
    objective: np.ndarray  # (T,)

    @property
    def horizon(self) -> int:
        return len(self.t)

    @property
    def n(self) -> int:
        return self.v.shape[1]


def save_trajectory(traj: Trajectory, path, with_objective: bool = False) -> None:
    """Long-format CSV `t,node,p,q,v,p_u,q_u[,objective]`; repr() floats."""
    n = traj.n
    header = ["t", "node", "p", "q", "v", "p_u", "q_u"]
    if with_objective:
        header.append("objective")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for ti in range(traj.horizon):
            for i in range(n):
                row = [
                    int(traj.t[ti]), i + 1,
                    repr(float(traj.x[ti, i])), repr(float(traj.x[ti, n + i])),
                    repr(float(traj.v[ti, i])),
                    repr(float(traj.p_u[ti, i])), repr(float(traj.q_u[ti, i])),
                ]
                if with_objective:
                    row.append(repr(float(traj.objective[ti])))
                writer.writerow(row)


def load_trajectory(path) -> Trajectory:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    ts = sorted({int(r["t"]) for r in rows})
    n = max(int(r["node"]) for r in rows)
    T = len(ts)
    t_index = {t: i for i, t in enumerate(ts)}
    x = np.zeros((T, 2 * n))
    v = np.zeros((T, n))
    p_u = np.zeros((T, n))
    q_u = np.zeros((T, n))
    obj = np.zeros(T)
    has_obj = rows and "objective" in rows[0]
    for r in rows:
        ti = t_index[int(r["t"])]
        i = int(r["node"]) - 1
        x[ti, i] = float(r["p"])
        x[ti, n + i] = float(r["q"])
        v[ti, i] = float(r["v"])
        p_u[ti, i] = float(r["p_u"])
        q_u[ti, i] = float(r["q_u"])
        if has_obj:
            obj[ti] = float(r["objective"])
    return Trajectory(t=np.array(ts), x=x, v=v, p_u=p_u, q_u=q_u, objective=obj)


@dataclass(frozen=True)
class EvaluationReport:
    absolute_gap: float
    relative_gap: float
    volt_violation: float
    excluded_steps: int  # relative-gap steps dropped for a zero oracle objective
    mean_step_time: float
    per_step: dict
    config_echo: dict


def volt_violation_series(v: np.ndarray, v_lo, v_hi) -> np.ndarray:
    """Per-step ||[V_lo - V]_+||_2 + ||[V - V_hi]_+||_2 on voltage magnitudes."""
    V = np.sqrt(np.asarray(v, dtype=float))
    V_lo = np.sqrt(np.broadcast_to(np.asarray(v_lo, dtype=float), v.shape[1:]))
    V_hi = np.sqrt(np.broadcast_to(np.asarray(v_hi, dtype=float), v.shape[1:]))
    under = np.linalg.norm(np.maximum(V_lo - V, 0.0), axis=1)
    over = np.linalg.norm(np.maximum(V - V_hi, 0.0), axis=1)
    return under + over


def evaluate(
    controlled: Trajectory,
    oracle_traj: Trajectory,
    v_lo,
    v_hi,
    mean_step_time: float = 0.0,
    config_echo: dict | None = None,
    zero_tol: float = 0.0,
) -> EvaluationReport:
    """Horizon-averaged gap and voltage-violation statistics.

    Steps where the oracle objective is zero (<= ``zero_tol``) are excluded
    from the relative gap and counted in ``excluded_steps``.
    """
    if controlled.horizon != oracle_traj.horizon:
        raise ValueError("trajectories must share the horizon")
    gap = np.abs(controlled.objective - oracle_traj.objective)
    denom = oracle_traj.objective
    nonzero = denom > zero_tol
    rel = gap[nonzero] / denom[nonzero]
    viol = volt_violation_series(controlled.v, v_lo, v_hi)
    return EvaluationReport(
        absolute_gap=float(np.mean(gap)),
        relative_gap=float(np.mean(rel)) if np.any(nonzero) else 0.0,
        volt_violation=float(np.mean(viol)),
        excluded_steps=int(np.sum(~nonzero)),
        mean_step_time=mean_step_time,
        per_step={
            "t": controlled.t.tolist(),
            "absolute_gap": gap.tolist(),
            "volt_violation": viol.tolist(),
        },
        config_echo=config_echo or {},
    )


# ---------------------------------------------------------------------------
# Trajectory producers.

def run_controller(
    scenario: Scenario,
    policy,
    model: LinearVoltageModel,
    graph: FeederGraph,
    cfg: ControllerConfig,
    x0: np.ndarray | None = None,
):
    """Operate the trained controller over a scenario.

    Returns (Trajectory, mean per-step wall time in seconds).  Starts from the
    box midpoint unless ``x0`` is given.
    """
    first = scenario.steps[0]
    n = graph.n
    x = first.box.midpoint.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    state = ControllerState(
        x=x, v_hat=plant_voltage(x, first, model, graph, cfg.plant), t=-1
    )
    rows_x, rows_v, objs = [], [], []
    elapsed = 0.0
    for s in scenario.steps:
        t0 = time.perf_counter()
        state = step(state, s, policy, model, graph, cfg)
        elapsed += time.perf_counter() - t0
        rows_x.append(state.x)
        rows_v.append(state.v_hat)
        objs.append(cost_value(s.cost, state.x[:n], state.x[n:]))
    traj = Trajectory(
        t=np.array([s.t for s in scenario.steps]),
        x=np.array(rows_x),
        v=np.array(rows_v),
        p_u=np.array([s.p_u for s in scenario.steps]),
        q_u=np.array([s.q_u for s in scenario.steps]),
        objective=np.array(objs),
    )
    return traj, elapsed / len(scenario.steps)


def run_no_control(
    scenario: Scenario, model: LinearVoltageModel, graph: FeederGraph
) -> Trajectory:
    """Hold every controllable setpoint at zero; record the plant response."""
    n = graph.n
    x = np.zeros(2 * n)
    rows_v, objs = [], []
    for s in scenario.steps:
        rows_v.append(plant_voltage(x, s, model, graph, "nonlinear"))
        objs.append(cost_value(s.cost, x[:n], x[n:]))
    return Trajectory(
        t=np.array([s.t for s in scenario.steps]),
        x=np.tile(x, (len(scenario.steps), 1)),
        v=np.array(rows_v),
        p_u=np.array([s.p_u for s in scenario.steps]),
        q_u=np.array([s.q_u for s in scenario.steps]),
        objective=np.array(objs),
    )


def run_baseline(
    scenario: Scenario,
    model: LinearVoltageModel,
    graph: FeederGraph,
    v_lo,
    v_hi,
    alpha_b: float,
    sigma_b: float,
    x0: np.ndarray | None = None,
) -> Trajectory:
    """Operate the communication-heavy feedback primal-dual comparator."""
    first = scenario.steps[0]
    n = graph.n
    x = first.box.midpoint.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    state = BaselineState(
        x=x, mu_lo=np.zeros(n), mu_hi=np.zeros(n), alpha_b=alpha_b, sigma_b=sigma_b
    )
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    rows_x, rows_v, objs = [], [], []
    for s in scenario.steps:
        state = baseline_step(state, s, model, graph, v_lo, v_hi)
        rows_x.append(state.x)
        rows_v.append(plant_voltage(state.x, s, model, graph, "nonlinear"))
        objs.append(cost_value(s.cost, state.x[:n], state.x[n:]))
    return Trajectory(
        t=np.array([s.t for s in scenario.steps]),
        x=np.array(rows_x),
        v=np.array(rows_v),
        p_u=np.array([s.p_u for s in scenario.steps]),
        q_u=np.array([s.q_u for s in scenario.steps]),
        objective=np.array(objs),
    )


def run_oracle(
    scenario: Scenario,
    model: LinearVoltageModel,
    v_lo,
    v_hi,
    tol: float = 1e-8,
) -> Trajectory:
    """Per-slot ground-truth optima under the linearized plant, warm-started."""
    n = model.R.shape[0]
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    warm = None
    rows_x, rows_v, objs = [], [], []
    for s in scenario.steps:
        sol = solve_opf_linear(s, model, v_lo, v_hi, tol=tol, warm_duals=warm)
        warm = (sol.mu_lo, sol.mu_hi)
        rows_x.append(sol.x_star)
        rows_v.append(sol.v_star)
        objs.append(sol.objective)
    return Trajectory(
        t=np.array([s.t for s in scenario.steps]),
        x=np.array(rows_x),
        v=np.array(rows_v),
        p_u=np.array([s.p_u for s in scenario.steps]),
        q_u=np.array([s.q_u for s in scenario.steps]),
        objective=np.array(objs),
    )


# ---------------------------------------------------------------------------
# Experiment orchestration.

class StageError(RuntimeError):
    """Pipeline failure; carries the stage name for exit-code mapping."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


STAGES = ("config", "feeder", "scenario", "stability", "train",
          "operate", "oracle", "evaluate", "write")


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise StageError("config", f"config root must be a mapping: {path}")
    return cfg


def config_hash(cfg: dict) -> str:
    """Stable hash of the fully-resolved configuration."""
    canon = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _generator_config(scfg: dict, graph: FeederGraph, horizon: int) -> GeneratorConfig:
    return GeneratorConfig(
        controllable=tuple(int(i) for i in scfg["controllable"]),
        d_def_p_kva=np.asarray(scfg["d_def_p_kva"], dtype=float),
        d_def_q_kva=np.asarray(scfg["d_def_q_kva"], dtype=float),
        horizon=horizon,
        tau=float(scfg.get("tau", 6.0)),
        trend=tuple((float(h), float(f)) for h, f in scfg.get(
            "trend", ((0.0, 0.55), (8.0, 1.0)))),
        noise_sd=float(scfg.get("noise_sd", 0.1)),
        joint_noise=bool(scfg.get("joint_noise", True)),
        cost_weight=float(scfg.get("cost_weight", 1.0)),
        p_cap_kva=float(scfg.get("p_cap_kva", 500.0)),
        q_cap_kvar=float(scfg.get("q_cap_kvar", 300.0)),
    )


def _trainer_config(tcfg: dict, limits: dict) -> TrainerConfig:
    return TrainerConfig(
        mode=str(tcfg.get("mode", "gradient")),
        alpha=float(tcfg.get("alpha", 0.48)),
        beta=float(tcfg.get("beta", 0.1)),
        lambda_mode=str(tcfg.get("lambda_mode", "fixed")),
        lambda_value=float(tcfg.get("lambda_value", 5e-4)),
        sigma_phi=float(tcfg.get("sigma_phi", 1e-3)),
        sigma_mu=float(tcfg.get("sigma_mu", 100.0)),
        batch_size=int(tcfg.get("batch_size", 32)),
        epochs=int(tcfg.get("epochs", 50)),
        seed=int(tcfg.get("seed", 0)),
        eq_tol=float(tcfg.get("eq_tol", 1e-9)),
        eq_max_iters=int(tcfg.get("eq_max_iters", 2000)),
        mu_init=float(tcfg.get("mu_init", 1.0)),
        v_lo=float(limits["v_lo"]),
        v_hi=float(limits["v_hi"]),
        arch=tuple(int(a) for a in tcfg.get("arch", (3, 64))),
    )


def write_training_log(log, path) -> None:
    """CSV per epoch `epoch,lagrangian,mean_cost,viol_rate_lo,viol_rate_hi,mu_norm`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "lagrangian", "mean_cost", "viol_rate_lo", "viol_rate_hi", "mu_norm"]
        )
        for row in log:
            writer.writerow([
                row["epoch"],
                repr(float(row["lagrangian"])), repr(float(row["mean_cost"])),
                repr(float(row["viol_rate_lo"])), repr(float(row["viol_rate_hi"])),
                repr(float(row["mu_norm"])),
            ])


def write_manifest(path, entries: dict) -> None:
    """Flat `key=value` manifest, sorted by key."""
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={entries[key]}\n")


def run_experiment(config_path, output_dir=None) -> Path:
    """End-to-end pipeline from a single config file.

    Stages: config → feeder → scenario → stability → train → operate →
    oracle → evaluate → write.  The output directory resolves, in order,
    from the ``output_dir`` argument, the LOCALOPF_OUTDIR environment
    variable, and the config's ``output_dir`` key.  Returns the directory.
    """
    cfg = load_config(config_path)
    out = output_dir or os.environ.get("LOCALOPF_OUTDIR") or cfg.get("output_dir")
    if out is None:
        raise StageError("config", "no output directory configured")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    try:
        feeder_path = Path(cfg["feeder"])
        if not feeder_path.is_absolute():
            feeder_path = Path(config_path).parent / feeder_path
        graph = load_feeder(feeder_path)
        model = build_sensitivities(graph)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("feeder", str(exc)) from exc

    try:
        scfg = cfg["scenario"]
        train_seeds = [int(s) for s in scfg.get("train_seeds", [1])]
        test_seed = int(scfg.get("test_seed", 1000))
        gen_train = _generator_config(scfg, graph, int(scfg["horizon_train"]))
        gen_test = _generator_config(scfg, graph, int(scfg["horizon_test"]))
        train_scns = [generate_profile(graph, gen_train, s) for s in train_seeds]
        test_scn = generate_profile(graph, gen_test, test_seed)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("scenario", str(exc)) from exc

    limits = cfg.get("limits", {"v_lo": 0.95**2, "v_hi": 1.05**2})
    tr_cfg = _trainer_config(cfg.get("trainer", {}), limits)

    try:
        state, log = train(train_scns, tr_cfg, graph, model)
    except ValueError as exc:
        if "stability" in str(exc):
            raise StageError("stability", str(exc)) from exc
        raise StageError("train", str(exc)) from exc
    except Exception as exc:
        raise StageError("train", str(exc)) from exc
    write_training_log(log, out / "training_log.csv")
    save_policy(state.policy, out / "policy.npz")

    m, xi = convexity_constants(test_scn.steps[0].cost)
    report_stab = check_stability(m, xi, model.a_norm, state.policy, tr_cfg.alpha)

    ctrl_cfg = ControllerConfig(alpha=tr_cfg.alpha, plant="nonlinear")
    x0 = test_scn.steps[0].box.midpoint
    try:
        ctrl_traj, step_time = run_controller(test_scn, state.policy, model, graph,
                                              ctrl_cfg, x0=x0)
        nc_traj = run_no_control(test_scn, model, graph)
        bcfg = cfg.get("baseline", {})
        base_traj = run_baseline(
            test_scn, model, graph, limits["v_lo"], limits["v_hi"],
            alpha_b=float(bcfg.get("alpha_b", tr_cfg.alpha)),
            sigma_b=float(bcfg.get("sigma_b", 5.0)), x0=x0,
        )
    except Exception as exc:
        raise StageError("operate", str(exc)) from exc

    try:
        oracle_traj = run_oracle(test_scn, model, limits["v_lo"], limits["v_hi"])
    except Exception as exc:
        raise StageError("oracle", str(exc)) from exc

    try:
        report = evaluate(ctrl_traj, oracle_traj, limits["v_lo"], limits["v_hi"],
                          mean_step_time=step_time, config_echo=cfg)
        nc_report = evaluate(nc_traj, oracle_traj, limits["v_lo"], limits["v_hi"])
        base_report = evaluate(base_traj, oracle_traj, limits["v_lo"], limits["v_hi"])
    except Exception as exc:
        raise StageError("evaluate", str(exc)) from exc

    try:
        save_trajectory(ctrl_traj, out / "controller_trajectory.csv")
        save_trajectory(nc_traj, out / "no_control_trajectory.csv")
        save_trajectory(base_traj, out / "baseline_trajectory.csv")
        save_trajectory(oracle_traj, out / "oracle_trajectory.csv", with_objective=True)
        payload = {
            "controller": _report_dict(report),
            "no_control": _report_dict(nc_report),
            "baseline": _report_dict(base_report),
            "stability": {
                "rho": report_stab.rho,
                "L_theta": report_stab.L_theta,
                "c3_bound": report_stab.c3_bound,
                "alpha": tr_cfg.alpha,
                "a_norm": model.a_norm,
            },
            "mean_step_time": step_time,
        }
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        write_manifest(out / "manifest.txt", {
            "config_hash": config_hash(cfg),
            "package_version": __version__,
            "numpy_version": np.__version__,
            "feeder": str(cfg["feeder"]),
            "n_bus": graph.n,
            "train_seeds": ",".join(str(s) for s in train_seeds),
            "test_seed": test_seed,
            "trainer_seed": tr_cfg.seed,
            "beta": tr_cfg.beta,
            "alpha": tr_cfg.alpha,
            "mode": tr_cfg.mode,
            "epochs": tr_cfg.epochs,
            "batch_size": tr_cfg.batch_size,
            "x0": ",".join(repr(float(xx)) for xx in x0),
            "rho": repr(float(report_stab.rho)),
        })
    except Exception as exc:
        raise StageError("write", str(exc)) from exc
    return out


def _report_dict(report: EvaluationReport) -> dict:
    return {
        "absolute_gap": report.absolute_gap,
        "relative_gap": report.relative_gap,
        "volt_violation": report.volt_violation,
        "excluded_steps": report.excluded_steps,
    }


def sweep_beta(config_path, betas=(0.05, 0.1, 0.5), output_dir=None) -> Path:
    """Run the experiment per beta and emit a comparison table.

    Writes `beta_sweep.csv` with one row per beta:
    `beta,volt_violation,absolute_gap,relative_gap` plus the no-control and
    baseline violation columns for context.
    """
    cfg = load_config(config_path)
    out = Path(output_dir or os.environ.get("LOCALOPF_OUTDIR")
               or cfg.get("output_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for beta in betas:
        sub = out / f"beta_{beta}"
        cfg_b = dict(cfg)
        cfg_b["trainer"] = dict(cfg.get("trainer", {}), beta=float(beta))
        cfg_b["output_dir"] = str(sub)
        tmp = out / f"config_beta_{beta}.yaml"
        with open(tmp, "w", encoding="utf-8") as fh:
            yaml.safe_dump(cfg_b, fh, sort_keys=True)
        # resolve the feeder path relative to the original config location
        feeder_path = Path(cfg["feeder"])
        if not feeder_path.is_absolute():
            cfg_b["feeder"] = str((Path(config_path).parent / feeder_path).resolve())
            with open(tmp, "w", encoding="utf-8") as fh:
                yaml.safe_dump(cfg_b, fh, sort_keys=True)
        run_dir = run_experiment(tmp, output_dir=sub)
        with open(run_dir / "report.json", encoding="utf-8") as fh:
            rep = json.load(fh)
        rows.append([
            beta,
            rep["controller"]["volt_violation"],
            rep["controller"]["absolute_gap"],
            rep["controller"]["relative_gap"],
            rep["no_control"]["volt_violation"],
            rep["baseline"]["volt_violation"],
        ])
    with open(out / "beta_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["beta", "volt_violation", "absolute_gap", "relative_gap",
                         "no_control_volt_violation", "baseline_volt_violation"])
        for row in rows:
            writer.writerow([row[0]] + [repr(float(val)) for val in row[1:]])
    return out

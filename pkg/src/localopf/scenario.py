"""Time-varying load scenarios, quadratic costs, and box capability sets.

The generator produces per-slot uncontrollable injections from a slow trend
(piecewise-linear daily profile) plus per-node Gaussian disturbances, mirroring
how declining solar generation shifts net demand onto controllable resources.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import yaml

from .feeder import FeederGraph


@dataclass(frozen=True)
class CostModel:
    """Separable quadratic generation cost.

    f_i(p, q) = weight * ((p_i - p_floor_i)^2 + (q_i - q_floor_i)^2).
    """

    p_floor: np.ndarray
    q_floor: np.ndarray
    weight: float = 1.0

    @property
    def floor(self) -> np.ndarray:
        return np.concatenate([self.p_floor, self.q_floor])


def cost_value(cost: CostModel, p: np.ndarray, q: np.ndarray) -> float:
    dp = p - cost.p_floor
    dq = q - cost.q_floor
    return float(cost.weight * (dp @ dp + dq @ dq))


def cost_grad(cost: CostModel, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Stacked gradient [d/dp; d/dq] = 2*weight*(x - floor)."""
    return 2.0 * cost.weight * (np.concatenate([p, q]) - cost.floor)


def convexity_constants(cost: CostModel) -> tuple[float, float]:
    """(m, xi): strong convexity and smoothness of the quadratic family."""
    return 2.0 * cost.weight, 2.0 * cost.weight


@dataclass(frozen=True)
class BoxLimits:
    """Per-node capability box; non-controllable nodes carry degenerate [0, 0]."""

    p_lo: np.ndarray
    p_hi: np.ndarray
    q_lo: np.ndarray
    q_hi: np.ndarray

    def __post_init__(self):
        if np.any(self.p_lo > self.p_hi) or np.any(self.q_lo > self.q_hi):
            raise ValueError("box limits must satisfy lo <= hi elementwise")

    @property
    def lo(self) -> np.ndarray:
        return np.concatenate([self.p_lo, self.q_lo])

    @property
    def hi(self) -> np.ndarray:
        return np.concatenate([self.p_hi, self.q_hi])

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


def project_box(x: np.ndarray, box: BoxLimits) -> np.ndarray:
    """Euclidean projection onto the box: elementwise clamp."""
    return np.clip(x, box.lo, box.hi)


@dataclass(frozen=True)
class ScenarioStep:
    """One time slot of the moving OPF instance."""

    t: int
    tau: float  # slot length, seconds
    p_u: np.ndarray
    q_u: np.ndarray
    cost: CostModel
    box: BoxLimits


@dataclass(frozen=True)
class Scenario:
    steps: tuple[ScenarioStep, ...]
    seed: int
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for the synthetic load generator.

    Default loads are given in kVA/kVAR and converted to per-unit on the
    feeder base.  ``trend`` is a list of (hour, fraction) breakpoints that is
    linearly interpolated over the horizon.  The Gaussian disturbance at a
    controllable node i is Normal(1, noise_sd)/sqrt(d_def_p_kva[i]).
    """

    controllable: tuple[int, ...]
    d_def_p_kva: np.ndarray  # length N, indexed by bus id - 1
    d_def_q_kva: np.ndarray
    horizon: int
    tau: float = 6.0
    trend: tuple[tuple[float, float], ...] = ((0.0, 0.55), (8.0, 1.0))
    noise_sd: float = 0.1
    joint_noise: bool = True  # one draw per node-slot applied to both p and q
    cost_weight: float = 1.0
    p_cap_kva: float = 500.0
    q_cap_kvar: float = 300.0


def trend_curve(breakpoints, horizon: int, tau: float) -> np.ndarray:
    """Piecewise-linear interpolation of (hour, fraction) breakpoints."""
    bp = sorted(breakpoints)
    hours = np.arange(horizon) * tau / 3600.0
    return np.interp(hours, [h for h, _ in bp], [f for _, f in bp])


def generate_profile(graph: FeederGraph, cfg: GeneratorConfig, seed: int) -> Scenario:
    """Build a seed-deterministic synthetic scenario for ``graph``."""
    n = graph.n
    d_p = np.asarray(cfg.d_def_p_kva, dtype=float)
    d_q = np.asarray(cfg.d_def_q_kva, dtype=float)
    if d_p.shape != (n,) or d_q.shape != (n,):
        raise ValueError(f"default loads must have length {n}")
    ctrl = np.array(sorted(cfg.controllable), dtype=int)
    if np.any(ctrl < 1) or np.any(ctrl > n):
        raise ValueError(f"controllable node ids must lie in 1..{n}: {ctrl}")
    ci = ctrl - 1
    if np.any(d_p[ci] <= 0.0):
        bad = ctrl[d_p[ci] <= 0.0]
        raise ValueError(f"zero default load at noisy controllable nodes {bad.tolist()}")

    rng = np.random.default_rng(seed)
    base = graph.base_power
    kappa_trend = trend_curve(cfg.trend, cfg.horizon, cfg.tau)

    # Box: controllable nodes get [0, cap]; others are pinned to zero.
    p_hi = np.zeros(n)
    q_hi = np.zeros(n)
    p_hi[ci] = cfg.p_cap_kva / base
    q_hi[ci] = cfg.q_cap_kvar / base
    box = BoxLimits(np.zeros(n), p_hi, np.zeros(n), q_hi)
    cost = CostModel(np.zeros(n), np.zeros(n), weight=cfg.cost_weight)

    steps = []
    for t in range(cfg.horizon):
        p_u = -d_p / base
        q_u = -d_q / base
        draw_p = rng.normal(1.0, cfg.noise_sd, size=len(ci))
        draw_q = draw_p if cfg.joint_noise else rng.normal(1.0, cfg.noise_sd, size=len(ci))
        kappa_p = kappa_trend[t] + draw_p / np.sqrt(d_p[ci])
        kappa_q = kappa_trend[t] + draw_q / np.sqrt(d_p[ci])
        p_u[ci] = -kappa_p * d_p[ci] / base
        q_u[ci] = -kappa_q * d_q[ci] / base
        steps.append(
            ScenarioStep(t=t, tau=cfg.tau, p_u=p_u, q_u=q_u, cost=cost, box=box)
        )
    return Scenario(steps=tuple(steps), seed=seed, provenance=f"synthetic(seed={seed})")


# ---------------------------------------------------------------------------
# File round-trip: CSV of injections plus a YAML sidecar.

def save_scenario(scn: Scenario, csv_path, sidecar_path) -> None:
    first = scn.steps[0]
    n = len(first.p_u)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "node", "p_u", "q_u"])
        for stp in scn.steps:
            for i in range(n):
                writer.writerow([stp.t, i + 1, repr(float(stp.p_u[i])), repr(float(stp.q_u[i]))])
    sidecar = {
        "horizon": len(scn.steps),
        "tau": first.tau,
        "seed": scn.seed,
        "provenance": scn.provenance,
        "cost_weight": first.cost.weight,
        "p_lo": first.box.p_lo.tolist(),
        "p_hi": first.box.p_hi.tolist(),
        "q_lo": first.box.q_lo.tolist(),
        "q_hi": first.box.q_hi.tolist(),
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(sidecar, fh, sort_keys=True)


def load_scenario(csv_path, sidecar_path) -> Scenario:
    with open(sidecar_path, encoding="utf-8") as fh:
        side = yaml.safe_load(fh)
    box = BoxLimits(
        np.array(side["p_lo"], dtype=float),
        np.array(side["p_hi"], dtype=float),
        np.array(side["q_lo"], dtype=float),
        np.array(side["q_hi"], dtype=float),
    )
    n = len(box.p_lo)
    cost = CostModel(np.zeros(n), np.zeros(n), weight=float(side["cost_weight"]))
    horizon = int(side["horizon"])
    p_u = np.zeros((horizon, n))
    q_u = np.zeros((horizon, n))
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            t, node = int(row["t"]), int(row["node"])
            p_u[t, node - 1] = float(row["p_u"])
            q_u[t, node - 1] = float(row["q_u"])
    steps = tuple(
        ScenarioStep(t=t, tau=float(side["tau"]), p_u=p_u[t], q_u=q_u[t], cost=cost, box=box)
        for t in range(horizon)
    )
    return Scenario(steps=steps, seed=int(side["seed"]), provenance=str(side.get("provenance", "")))

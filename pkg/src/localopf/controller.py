"""Real-time projected-gradient controller with local feedback.

Implements the per-slot update, the frozen-scenario equilibrium solve, and
the stability/tracking diagnostics: the contraction factor rho(alpha), the
gain clamp, the step-size condition, and an empirical check of the
equilibrium-sensitivity bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederGraph, LinearVoltageModel
from .powerflow import InjectionState, solve_nonlinear
from .policy import PolicyParams, forward_all
from .scenario import ScenarioStep, cost_grad, project_box


class ControllerError(RuntimeError):
    """Plant or equilibrium failure; carries the time index when known."""


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float
    plant: str = "linear"  # or "nonlinear"
    eq_tol: float = 1e-9
    eq_max_iters: int = 2000

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.eq_tol <= 0:
            raise ValueError("eq_tol must be positive")
        if self.plant not in ("linear", "nonlinear"):
            raise ValueError(f"unknown plant '{self.plant}'")


@dataclass(frozen=True)
class ControllerState:
    x: np.ndarray  # stacked (p, q), length 2N
    v_hat: np.ndarray  # squared voltages after applying x
    t: int


@dataclass(frozen=True)
class Equilibrium:
    x_dag: np.ndarray
    v_dag: np.ndarray
    iterations: int
    converged: bool
    residual: float


def plant_voltage(
    x: np.ndarray,
    step_data: ScenarioStep,
    model: LinearVoltageModel,
    graph: FeederGraph,
    plant: str,
) -> np.ndarray:
    """Squared voltages produced by applying x under the current injections."""
    n = model.R.shape[0]
    if plant == "linear":
        return model.A @ x + model.v0 + model.R @ step_data.p_u + model.X @ step_data.q_u
    s = InjectionState(p=x[:n], q=x[n:], p_u=step_data.p_u, q_u=step_data.q_u)
    sol = solve_nonlinear(graph, s, model.v0)
    if not sol.converged:
        raise ControllerError(f"nonlinear plant did not converge at t={step_data.t}")
    return sol.v


def step(
    state: ControllerState,
    step_data: ScenarioStep,
    policy: PolicyParams,
    model: LinearVoltageModel,
    graph: FeederGraph,
    cfg: ControllerConfig,
) -> ControllerState:
    """One real-time update.

    Measures voltages with the previous setpoint under the new injections,
    moves every node along its local gradient-plus-policy direction, projects
    onto the box, applies the new setpoint, and returns the refreshed state.
    Each node's update reads only its own measurement, injection, cost, box,
    and channels (all operations below are elementwise in the node index).
    """
    v_hat = plant_voltage(state.x, step_data, model, graph, cfg.plant)
    u = forward_all(policy, v_hat, step_data.p_u, step_data.q_u)
    n = graph.n
    g = state.x - cfg.alpha * (
        cost_grad(step_data.cost, state.x[:n], state.x[n:]) + u
    )
    x_new = project_box(g, step_data.box)
    v_new = plant_voltage(x_new, step_data, model, graph, cfg.plant)
    return ControllerState(x=x_new, v_hat=v_new, t=step_data.t)


def solve_equilibrium(
    step_data: ScenarioStep,
    policy: PolicyParams,
    model: LinearVoltageModel,
    graph: FeederGraph,
    cfg: ControllerConfig,
    x0: np.ndarray | None = None,
    output_offset: np.ndarray | None = None,
    return_gaps: bool = False,
):
    """Picard iteration of the frozen-scenario dynamics to its fixed point.

    Starts at the box midpoint unless ``x0`` is given.  ``output_offset``
    adds a constant to the policy output (used by the sensitivity probe).
    """
    x = step_data.box.midpoint.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    n = graph.n
    gaps = []
    converged = False
    gap = np.inf
    iterations = 0
    for iterations in range(1, cfg.eq_max_iters + 1):
        v = plant_voltage(x, step_data, model, graph, cfg.plant)
        u = forward_all(policy, v, step_data.p_u, step_data.q_u)
        if output_offset is not None:
            u = u + output_offset
        g = x - cfg.alpha * (cost_grad(step_data.cost, x[:n], x[n:]) + u)
        x_new = project_box(g, step_data.box)
        gap = float(np.linalg.norm(x_new - x))
        if return_gaps:
            gaps.append(gap)
        x = x_new
        if gap < cfg.eq_tol:
            converged = True
            break
    v_dag = plant_voltage(x, step_data, model, graph, cfg.plant)
    eq = Equilibrium(x_dag=x, v_dag=v_dag, iterations=iterations, converged=converged, residual=gap)
    if return_gaps:
        return eq, gaps
    return eq


def solve_equilibria_batch(
    p_u: np.ndarray,
    q_u: np.ndarray,
    cost,
    box,
    policy: PolicyParams,
    model: LinearVoltageModel,
    alpha: float,
    eq_tol: float = 1e-9,
    max_iters: int = 2000,
    x0: np.ndarray | None = None,
):
    """Vectorized Picard solve on the linear plant for S scenario samples.

    ``p_u``, ``q_u`` have shape (S, N); returns (x (S,2N), v (S,N),
    converged (S,), iterations).  Rows share the cost and box.
    """
    S, n = p_u.shape
    v_env = model.v0 + p_u @ model.R.T + q_u @ model.X.T
    if x0 is None:
        x = np.tile(box.midpoint, (S, 1))
    else:
        x = np.array(x0, dtype=float, copy=True)
    lo, hi = box.lo, box.hi
    floor = cost.floor
    two_w = 2.0 * cost.weight
    gap = np.full(S, np.inf)
    iterations = 0
    for iterations in range(1, max_iters + 1):
        v = x @ model.A.T + v_env
        u = forward_all(policy, v, p_u, q_u)
        g = x - alpha * (two_w * (x - floor) + u)
        x_new = np.clip(g, lo, hi)
        gap = np.linalg.norm(x_new - x, axis=1)
        x = x_new
        if np.max(gap) < eq_tol:
            break
    v = x @ model.A.T + v_env
    return x, v, gap < eq_tol, iterations


def rho_alpha(m: float, xi: float, L_theta: float, a_norm: float, alpha: float) -> float:
    """Contraction factor of the closed-loop dynamics on the linear plant."""
    rad = 1.0 + alpha**2 * (xi**2 + L_theta**2 * a_norm**2 + 2.0 * xi * L_theta * a_norm) \
        - 2.0 * alpha * m
    if rad < 0.0:
        raise ValueError(f"invalid constants: negative radicand {rad}")
    return float(np.sqrt(rad))


def tracking_bound(rho: float, gamma: float, L_h: float, approx_eps: float) -> float:
    """Asymptotic tracking-error bound (rho*gamma + (1+rho)*L_h*eps)/(1-rho)."""
    if rho >= 1.0:
        raise ValueError(f"no contraction: rho = {rho} >= 1")
    return (rho * gamma + (1.0 + rho) * L_h * approx_eps) / (1.0 - rho)


@dataclass(frozen=True)
class StabilityReport:
    c1_ok: bool
    c2_ok: bool
    c3_ok: bool
    c3_bound: float
    c3_margin: float
    step_ok: bool
    step_bound: float
    rho: float
    L_theta: float
    k_max: float

    @property
    def all_ok(self) -> bool:
        return self.c1_ok and self.c2_ok and self.c3_ok and self.step_ok


def check_stability(
    m: float, xi: float, a_norm: float, policy: PolicyParams, alpha: float
) -> StabilityReport:
    """Evaluate the uniqueness conditions and step-size bound for ``policy``.

    C1 holds structurally (the voltage path is an additive linear term); C2
    holds whenever every gain is finite and nonnegative; C3 compares the
    policy Lipschitz constant in v against its threshold, strictly.
    """
    L_theta = policy.lipschitz_v()
    c1_ok = True
    c2_ok = bool(np.all(np.isfinite(policy.k)) and np.all(policy.k >= 0.0))
    step_bound = 2.0 * m / xi**2
    step_ok = alpha < step_bound
    rad = 1.0 - 2.0 * alpha * m + alpha**2 * xi**2
    if rad >= 0.0 and alpha > 0.0 and a_norm > 0.0:
        c3_bound = (1.0 - np.sqrt(rad)) / (alpha * a_norm)
    else:
        c3_bound = np.nan
    c3_ok = bool(np.isfinite(c3_bound) and L_theta < c3_bound)
    try:
        rho = rho_alpha(m, xi, L_theta, a_norm, alpha)
    except ValueError:
        rho = np.nan
    return StabilityReport(
        c1_ok=c1_ok,
        c2_ok=c2_ok,
        c3_ok=c3_ok,
        c3_bound=float(c3_bound),
        c3_margin=float(c3_bound - L_theta) if np.isfinite(c3_bound) else np.nan,
        step_ok=bool(step_ok),
        step_bound=float(step_bound),
        rho=float(rho),
        L_theta=float(L_theta),
        k_max=float(policy.k_max),
    )


def lemma1_check(
    step_data: ScenarioStep,
    policy: PolicyParams,
    model: LinearVoltageModel,
    graph: FeederGraph,
    cfg: ControllerConfig,
    probe_scale: float = 1e-5,
) -> float:
    """Measured equilibrium sensitivity to a constant policy-output probe.

    Perturbs every controllable channel output by ``probe_scale``, re-solves
    the equilibrium, and returns ||dx|| / ||probe||.
    """
    if probe_scale == 0.0:
        return 0.0
    eq0 = solve_equilibrium(step_data, policy, model, graph, cfg)
    if not eq0.converged:
        raise ControllerError("base equilibrium did not converge")
    n = graph.n
    idx = policy.node_index
    delta = np.zeros(2 * n)
    delta[idx] = probe_scale
    delta[n + idx] = probe_scale
    eq1 = solve_equilibrium(step_data, policy, model, graph, cfg, x0=eq0.x_dag,
                            output_offset=delta)
    if not eq1.converged:
        raise ControllerError("probed equilibrium did not converge")
    return float(np.linalg.norm(eq1.x_dag - eq0.x_dag) / np.linalg.norm(delta))

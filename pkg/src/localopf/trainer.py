"""Stochastic primal-dual training of the feedback policies.

The trainer minimizes the batch Lagrangian of the chance-constrained policy
optimization: equilibria are solved per sample (linear plant for the analytic
gradients, nonlinear plant with a finite-difference voltage Jacobian in
gradient-free mode), policy parameters descend via Adam, auxiliary offsets
optionally descend, and the voltage-limit multipliers ascend with projection
onto the nonnegative orthant.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .controller import (
    ControllerConfig,
    Equilibrium,
    check_stability,
    solve_equilibria_batch,
    solve_equilibrium,
)
from .feeder import FeederGraph, LinearVoltageModel
from .powerflow import InjectionState, solve_nonlinear
from .policy import (
    PolicyParams,
    backward_all,
    compute_k_max,
    enforce_conditions,
    forward_all,
    init_policy,
    set_input_scale,
)
from .scenario import Scenario, ScenarioStep, convexity_constants, cost_value

ACTIVITY_TOL = 1e-12  # projection considered inactive when |proj(g) - g| <= this


def hinge_surrogate(lam, g):
    """Convex surrogate max(lam + g, 0) majorizing lam * indicator(g >= 0)."""
    return np.maximum(lam + g, 0.0)


def indicator(x):
    """1 if x >= 0 else 0 (the boundary counts as a violation)."""
    return (np.asarray(x) >= 0.0).astype(float)


@dataclass(frozen=True)
class ChanceConfig:
    beta: float
    lambda_lo: np.ndarray
    lambda_hi: np.ndarray
    lambda_mode: str = "fixed"  # or "learned"

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.lambda_mode not in ("fixed", "learned"):
            raise ValueError(f"unknown lambda_mode '{self.lambda_mode}'")


@dataclass
class AdamState:
    """Per-array first/second moment accumulators for the policy update."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    m_k: np.ndarray
    v_k: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, policy: PolicyParams) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in policy.weights],
            v_w=[np.zeros_like(w) for w in policy.weights],
            m_b=[np.zeros_like(b) for b in policy.biases],
            v_b=[np.zeros_like(b) for b in policy.biases],
            m_k=np.zeros_like(policy.k),
            v_k=np.zeros_like(policy.k),
        )


@dataclass
class TrainerState:
    policy: PolicyParams
    mu_lo: np.ndarray
    mu_hi: np.ndarray
    chance: ChanceConfig
    sigma_phi: float
    sigma_lambda: float
    sigma_mu: float
    epoch: int = 0
    adam_state: AdamState | None = None


@dataclass(frozen=True)
class Batch:
    samples: tuple[ScenarioStep, ...]
    equilibria: tuple[Equilibrium, ...]

    @property
    def skipped(self) -> tuple[bool, ...]:
        return tuple(not e.converged for e in self.equilibria)

    def converged_arrays(self):
        """(steps, x (S,2N), v (S,N)) over the converged samples."""
        keep = [(s, e) for s, e in zip(self.samples, self.equilibria) if e.converged]
        if not keep:
            raise ValueError("batch has no converged equilibria")
        steps = [s for s, _ in keep]
        x = np.array([e.x_dag for _, e in keep])
        v = np.array([e.v_dag for _, e in keep])
        return steps, x, v


def lagrangian(batch: Batch, state: TrainerState, v_lo, v_hi) -> float:
    """Empirical Lagrangian: batch-mean cost plus dual-weighted surrogates."""
    steps, x, v = batch.converged_arrays()
    n = v.shape[1]
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    ch = state.chance
    mean_cost = float(
        np.mean([cost_value(s.cost, xi[:n], xi[n:]) for s, xi in zip(steps, x)])
    )
    hinge_lo = hinge_surrogate(ch.lambda_lo, v_lo - v).mean(axis=0)
    hinge_hi = hinge_surrogate(ch.lambda_hi, v - v_hi).mean(axis=0)
    val = mean_cost
    val += float(state.mu_lo @ (hinge_lo - ch.beta * ch.lambda_lo))
    val += float(state.mu_hi @ (hinge_hi - ch.beta * ch.lambda_hi))
    return val


def grad_policy(
    batch: Batch,
    state: TrainerState,
    model: LinearVoltageModel,
    v_lo,
    v_hi,
    alpha: float,
    voltage_jacobian: np.ndarray | None = None,
):
    """Batch policy gradient via the chain rule through the equilibrium map.

    The dual-weighted indicator terms couple every node's voltage to node i's
    injection through the sensitivity rows of R and X (or the supplied
    finite-difference Jacobian in gradient-free mode); the equilibrium
    derivative factor is -1/(2w) where the pre-projection point is interior
    and 0 where the box projection is active.
    """
    steps, x, v = batch.converged_arrays()
    S, n = v.shape
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    ch = state.chance
    ind_lo = indicator(ch.lambda_lo + v_lo - v)  # (S, N)
    ind_hi = indicator(ch.lambda_hi + v - v_hi)
    w_dual = -state.mu_lo * ind_lo + state.mu_hi * ind_hi
    if voltage_jacobian is None:
        bracket_pq = np.concatenate([w_dual @ model.R, w_dual @ model.X], axis=1)
    else:
        bracket_pq = w_dual @ voltage_jacobian  # (S, 2N)
    weight = np.array([s.cost.weight for s in steps])[:, None]
    floor = np.array([s.cost.floor for s in steps])
    grad_f = 2.0 * weight * (x - floor)
    bracket = bracket_pq + grad_f

    p_u = np.array([s.p_u for s in steps])
    q_u = np.array([s.q_u for s in steps])
    u, tape = forward_all(state.policy, v, p_u, q_u, with_tape=True)
    g = x - alpha * (grad_f + u)
    lo = np.array([s.box.lo for s in steps])
    hi = np.array([s.box.hi for s in steps])
    interior = np.abs(np.clip(g, lo, hi) - g) <= ACTIVITY_TOL

    upstream_full = bracket * interior * (-1.0 / (2.0 * weight)) / S  # (S, 2N)
    idx = state.policy.node_index
    upstream = np.concatenate(
        [upstream_full[:, idx], upstream_full[:, n + idx]], axis=1
    )  # (S, C)
    return backward_all(state.policy, tape, upstream)


def grad_lambda(batch: Batch, state: TrainerState, v_lo, v_hi):
    """Gradients of the Lagrangian in the auxiliary offsets (learned mode)."""
    if state.chance.lambda_mode != "learned":
        raise ValueError("grad_lambda requires lambda_mode='learned'")
    _, _, v = batch.converged_arrays()
    n = v.shape[1]
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    ch = state.chance
    g_lo = state.mu_lo * (indicator(ch.lambda_lo + v_lo - v).mean(axis=0) - ch.beta)
    g_hi = state.mu_hi * (indicator(ch.lambda_hi + v - v_hi).mean(axis=0) - ch.beta)
    return g_lo, g_hi


def dual_update(state: TrainerState, batch: Batch, v_lo, v_hi) -> TrainerState:
    """Projected dual ascent on the surrogate constraint violations."""
    _, _, v = batch.converged_arrays()
    n = v.shape[1]
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (n,))
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (n,))
    ch = state.chance
    asc_lo = hinge_surrogate(ch.lambda_lo, v_lo - v).mean(axis=0) - ch.beta * ch.lambda_lo
    asc_hi = hinge_surrogate(ch.lambda_hi, v - v_hi).mean(axis=0) - ch.beta * ch.lambda_hi
    return replace(
        state,
        mu_lo=np.maximum(state.mu_lo + state.sigma_mu * asc_lo, 0.0),
        mu_hi=np.maximum(state.mu_hi + state.sigma_mu * asc_hi, 0.0),
    )


def zo_voltage_jacobian(
    graph: FeederGraph,
    step_data: ScenarioStep,
    x_dag: np.ndarray,
    zo_step: float = 1e-3,
    v0: float = 1.0,
    plant=None,
) -> np.ndarray:
    """2n-point central-difference estimate of dv/dx around ``x_dag``.

    ``plant`` maps a length-2N setpoint to the length-N squared voltages;
    the default queries the nonlinear branch-flow solver.
    """
    if zo_step <= 0.0:
        raise ValueError("zo_step must be positive")
    n = graph.n

    if plant is None:
        def plant(x):
            s = InjectionState(p=x[:n], q=x[n:], p_u=step_data.p_u, q_u=step_data.q_u)
            sol = solve_nonlinear(graph, s, v0)
            if not sol.converged:
                raise RuntimeError("power flow failed inside the gradient estimator")
            return sol.v

    jac = np.zeros((n, 2 * n))
    for kcol in range(2 * n):
        e = np.zeros(2 * n)
        e[kcol] = zo_step
        try:
            v_plus = plant(x_dag + e)
            v_minus = plant(x_dag - e)
        except RuntimeError as exc:
            raise RuntimeError(f"perturbed power flow failed at column {kcol}") from exc
        jac[:, kcol] = (v_plus - v_minus) / (2.0 * zo_step)
    return jac


# ---------------------------------------------------------------------------
# Training loop.

@dataclass(frozen=True)
class TrainerConfig:
    mode: str = "gradient"  # or "gradient_free"
    alpha: float = 0.48
    beta: float = 0.1
    lambda_mode: str = "fixed"
    lambda_value: float = 5e-4
    sigma_phi: float = 1e-3
    sigma_lambda: float | None = None  # defaults to sigma_phi
    sigma_mu: float = 100.0
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    eq_tol: float = 1e-9
    eq_max_iters: int = 2000
    v_lo: float = 0.95**2
    v_hi: float = 1.05**2
    arch: tuple[int, int] = (3, 64)
    k_max_margin: float = 0.95
    zo_step: float = 1e-3
    # Positive dual warm start: with mu = 0 the first minibatches are pure
    # cost descent, which drives the policy outputs positive and permanently
    # deactivates channels (projection-active equilibria have zero gradient).
    mu_init: float = 1.0

    def __post_init__(self):
        if self.mode not in ("gradient", "gradient_free"):
            raise ValueError(f"unknown mode '{self.mode}'")


def adam_update(policy: PolicyParams, grads, adam: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place adaptive-moment descent step on every policy array."""
    adam.t += 1
    bc1 = 1.0 - beta1**adam.t
    bc2 = 1.0 - beta2**adam.t

    def upd(param, grad, m, v):
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)

    for l in range(len(policy.weights)):
        upd(policy.weights[l], grads["weights"][l], adam.m_w[l], adam.v_w[l])
        upd(policy.biases[l], grads["biases"][l], adam.m_b[l], adam.v_b[l])
    upd(policy.k, grads["k"], adam.m_k, adam.v_k)


def controllable_nodes(step_data: ScenarioStep) -> tuple[int, ...]:
    """Nodes with a non-degenerate capability box."""
    box = step_data.box
    free = (box.p_hi > box.p_lo) | (box.q_hi > box.q_lo)
    return tuple(int(i) + 1 for i in np.nonzero(free)[0])


def train(
    scenarios,
    cfg: TrainerConfig,
    graph: FeederGraph,
    model: LinearVoltageModel,
    policy: PolicyParams | None = None,
):
    """Primal-dual training over the pooled scenario steps.

    Returns (final TrainerState, per-epoch log list).  Deterministic for a
    fixed config and seed.
    """
    if isinstance(scenarios, Scenario):
        scenarios = [scenarios]
    pool = [s for scn in scenarios for s in scn.steps]
    if not pool:
        raise ValueError("empty training set")
    first = pool[0]
    n = graph.n
    m, xi = convexity_constants(first.cost)
    k_max = compute_k_max(cfg.alpha, m, xi, model.a_norm, cfg.k_max_margin)
    if policy is None:
        nodes = controllable_nodes(first)
        policy = init_policy(graph, nodes, cfg.arch, k_max, cfg.seed)
        set_input_scale(policy, Scenario(steps=tuple(pool), seed=cfg.seed))
    report = check_stability(m, xi, model.a_norm, policy, cfg.alpha)
    if not report.all_ok:
        raise ValueError(f"stability check failed before training: {report}")

    ch = ChanceConfig(
        beta=cfg.beta,
        lambda_lo=np.full(n, cfg.lambda_value),
        lambda_hi=np.full(n, cfg.lambda_value),
        lambda_mode=cfg.lambda_mode,
    )
    state = TrainerState(
        policy=policy,
        mu_lo=np.full(n, float(cfg.mu_init)),
        mu_hi=np.full(n, float(cfg.mu_init)),
        chance=ch,
        sigma_phi=cfg.sigma_phi,
        sigma_lambda=cfg.sigma_lambda if cfg.sigma_lambda is not None else cfg.sigma_phi,
        sigma_mu=cfg.sigma_mu,
        adam_state=AdamState.zeros_like(policy),
    )
    v_lo = np.full(n, cfg.v_lo)
    v_hi = np.full(n, cfg.v_hi)
    rng = np.random.default_rng(cfg.seed)
    ctrl_cfg = ControllerConfig(
        alpha=cfg.alpha,
        plant="nonlinear" if cfg.mode == "gradient_free" else "linear",
        eq_tol=cfg.eq_tol,
        eq_max_iters=cfg.eq_max_iters,
    )
    x_warm = first.box.midpoint
    log = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(pool))
        ep_lag = []
        ep_cost = []
        ep_viol_lo = []
        ep_viol_hi = []
        skipped = 0
        for start in range(0, len(pool), cfg.batch_size):
            chunk = perm[start:start + cfg.batch_size]
            samples = [pool[i] for i in chunk]
            batch, x_warm = _solve_batch(samples, state.policy, model, graph, ctrl_cfg,
                                         cfg.mode, x_warm)
            skipped += sum(batch.skipped)
            jac = None
            if cfg.mode == "gradient_free":
                i0 = next(i for i, e in enumerate(batch.equilibria) if e.converged)
                jac = zo_voltage_jacobian(graph, batch.samples[i0],
                                          batch.equilibria[i0].x_dag,
                                          cfg.zo_step, model.v0)
            ep_lag.append(lagrangian(batch, state, v_lo, v_hi))
            _, xb, vb = batch.converged_arrays()
            ep_cost.append(np.mean(
                [cost_value(s.cost, xx[:n], xx[n:]) for s, xx in
                 zip([s for s, e in zip(batch.samples, batch.equilibria) if e.converged], xb)]
            ))
            ep_viol_lo.append(np.mean(vb < v_lo))
            ep_viol_hi.append(np.mean(vb > v_hi))
            grads = grad_policy(batch, state, model, v_lo, v_hi, cfg.alpha, jac)
            adam_update(state.policy, grads, state.adam_state, cfg.sigma_phi)
            enforce_conditions(state.policy, k_max)
            if cfg.lambda_mode == "learned":
                g_lo, g_hi = grad_lambda(batch, state, v_lo, v_hi)
                state.chance = replace(
                    state.chance,
                    lambda_lo=state.chance.lambda_lo - state.sigma_lambda * g_lo,
                    lambda_hi=state.chance.lambda_hi - state.sigma_lambda * g_hi,
                )
            state = dual_update(state, batch, v_lo, v_hi)
        state.epoch = epoch + 1
        log.append({
            "epoch": epoch + 1,
            "lagrangian": float(np.mean(ep_lag)),
            "mean_cost": float(np.mean(ep_cost)),
            "viol_rate_lo": float(np.mean(ep_viol_lo)),
            "viol_rate_hi": float(np.mean(ep_viol_hi)),
            "mu_norm": float(np.linalg.norm(np.concatenate([state.mu_lo, state.mu_hi]))),
            "skipped": skipped,
        })
    return state, log


def _solve_batch(samples, policy, model, graph, ctrl_cfg, mode, x_warm):
    """Equilibria for one minibatch; linear plant is solved vectorized."""
    if mode == "gradient":
        p_u = np.array([s.p_u for s in samples])
        q_u = np.array([s.q_u for s in samples])
        x0 = np.tile(x_warm, (len(samples), 1))
        x, v, conv, iters = solve_equilibria_batch(
            p_u, q_u, samples[0].cost, samples[0].box, policy, model,
            ctrl_cfg.alpha, ctrl_cfg.eq_tol, ctrl_cfg.eq_max_iters, x0
        )
        eqs = tuple(
            Equilibrium(x_dag=x[i], v_dag=v[i], iterations=iters,
                        converged=bool(conv[i]), residual=0.0)
            for i in range(len(samples))
        )
        x_next = x[-1] if np.any(conv) else x_warm
        return Batch(samples=tuple(samples), equilibria=eqs), x_next
    eqs = []
    for s in samples:
        eq = solve_equilibrium(s, policy, model, graph, ctrl_cfg, x0=x_warm)
        if eq.converged:
            x_warm = eq.x_dag
        eqs.append(eq)
    return Batch(samples=tuple(samples), equilibria=tuple(eqs)), x_warm

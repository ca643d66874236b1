"""Branch-flow power flow on radial feeders.

``solve_nonlinear`` runs a backward/forward sweep on the exact branch flow
equations; ``solve_linear`` evaluates the LinDistFlow surrogate.  Both return
squared voltage magnitudes in per-unit^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .feeder import FeederGraph, LinearVoltageModel


class VoltageCollapseError(RuntimeError):
    """Raised when the sweep drives a squared voltage nonpositive."""


@dataclass(frozen=True)
class InjectionState:
    """Controllable (p, q) and uncontrollable (p_u, q_u) injections, per-unit.

    Loads enter as negative injections.
    """

    p: np.ndarray
    q: np.ndarray
    p_u: np.ndarray
    q_u: np.ndarray

    def __post_init__(self):
        n = len(self.p)
        for name in ("p", "q", "p_u", "q_u"):
            vec = np.asarray(getattr(self, name), dtype=float)
            if vec.shape != (n,):
                raise ValueError(f"{name} has shape {vec.shape}, expected ({n},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, vec)


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray  # squared voltage magnitudes, per bus 1..N
    P: np.ndarray  # sending-end active power, per line (indexed by child bus - 1)
    Q: np.ndarray
    ell: np.ndarray  # squared current magnitudes per line
    iterations: int
    converged: bool


def solve_nonlinear(
    graph: FeederGraph,
    s: InjectionState,
    v0: float,
    tol: float = 1e-10,
    max_iters: int = 500,
) -> PowerFlowSolution:
    """Backward/forward sweep fixed point of the branch flow equations.

    The backward pass accumulates line flows including the r*ell / x*ell loss
    terms (ell frozen from the previous pass); the forward pass propagates
    squared voltages from the slack bus; ell is then refreshed from the
    sending-end voltage.  Starts lossless (ell = 0).
    """
    if v0 <= 0:
        raise ValueError("v0 must be positive")
    n = graph.n
    p_net = s.p + s.p_u
    q_net = s.q + s.q_u
    r = np.array([ln.r for ln in graph.lines])
    x = np.array([ln.x for ln in graph.lines])
    z2 = r * r + x * x
    parent = np.array(graph.parent)
    order = list(graph.order)  # parents before children

    v = np.full(n, v0)
    ell = np.zeros(n)
    P = np.zeros(n)
    Q = np.zeros(n)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        # backward: leaves to root
        P[:] = 0.0
        Q[:] = 0.0
        for j in reversed(order):
            jj = j - 1
            P[jj] += -p_net[jj] + r[jj] * ell[jj]
            Q[jj] += -q_net[jj] + x[jj] * ell[jj]
            pj = parent[jj]
            if pj != 0:
                P[pj - 1] += P[jj]
                Q[pj - 1] += Q[jj]
        # forward: root to leaves
        v_new = np.empty(n)
        for j in order:
            jj = j - 1
            pj = parent[jj]
            v_up = v0 if pj == 0 else v_new[pj - 1]
            v_new[jj] = v_up - 2.0 * (r[jj] * P[jj] + x[jj] * Q[jj]) + z2[jj] * ell[jj]
            if v_new[jj] <= 0.0:
                raise VoltageCollapseError(
                    f"voltage collapse at bus {j} on iteration {iterations}"
                )
        # refresh squared currents from the sending-end voltage
        v_send = np.where(parent == 0, v0, v_new[np.maximum(parent - 1, 0)])
        ell = (P * P + Q * Q) / v_send
        delta = float(np.max(np.abs(v_new - v))) if n else 0.0
        v = v_new
        if delta < tol:
            converged = True
            break
    return PowerFlowSolution(
        v=v, P=P.copy(), Q=Q.copy(), ell=ell, iterations=iterations, converged=converged
    )


def residual(
    graph: FeederGraph, s: InjectionState, sol: PowerFlowSolution, v0: float
) -> float:
    """Max-abs violation of the four branch flow equation families.

    Evaluated from scratch on the supplied solution, independent of the
    sweep recursion.
    """
    n = graph.n
    p_net = s.p + s.p_u
    q_net = s.q + s.q_u
    res = 0.0
    for j in range(1, n + 1):
        jj = j - 1
        ln = graph.line_to(j)
        kids = graph.children[j]
        sum_P = sum(sol.P[k - 1] for k in kids)
        sum_Q = sum(sol.Q[k - 1] for k in kids)
        res = max(res, abs(sol.P[jj] - (-p_net[jj] + sum_P + ln.r * sol.ell[jj])))
        res = max(res, abs(sol.Q[jj] - (-q_net[jj] + sum_Q + ln.x * sol.ell[jj])))
        v_up = v0 if ln.from_bus == 0 else sol.v[ln.from_bus - 1]
        z2 = ln.r**2 + ln.x**2
        res = max(
            res,
            abs(
                sol.v[jj]
                - (v_up - 2.0 * (ln.r * sol.P[jj] + ln.x * sol.Q[jj]) + z2 * sol.ell[jj])
            ),
        )
        res = max(res, abs(sol.ell[jj] * v_up - (sol.P[jj] ** 2 + sol.Q[jj] ** 2)))
    return res


def env_voltage(model: LinearVoltageModel, p_u: np.ndarray, q_u: np.ndarray) -> np.ndarray:
    """Uncontrolled voltage component v_env = v0*1 + R p_u + X q_u."""
    return model.v0 + model.R @ p_u + model.X @ q_u


def solve_linear(model: LinearVoltageModel, s: InjectionState) -> np.ndarray:
    """LinDistFlow voltages v = R p + X q + v_env."""
    return model.R @ s.p + model.X @ s.q + env_voltage(model, s.p_u, s.q_u)

"""Trainer correctness: surrogates, gradients, dual updates, training loop."""

import dataclasses

import numpy as np
import pytest

from localopf import (
    Batch,
    ChanceConfig,
    ControllerConfig,
    CostModel,
    GeneratorConfig,
    TrainerConfig,
    TrainerState,
    dual_update,
    generate_profile,
    grad_lambda,
    grad_policy,
    hinge_surrogate,
    init_policy,
    lagrangian,
    solve_equilibrium,
    train,
    zo_voltage_jacobian,
)
from localopf.controller import Equilibrium
from localopf.powerflow import env_voltage
from localopf.trainer import AdamState, adam_update, controllable_nodes, indicator
from conftest import make_step

ALPHA = 0.48


# ---------------------------------------------------------------------------
# Surrogate properties


def test_hinge_majorizes_indicator():
    for lam in (0.0, 0.01, 0.2, 1.0):
        for g in np.linspace(-2.0, 2.0, 401):
            assert hinge_surrogate(lam, g) >= lam * indicator(g) - 1e-15


def test_hinge_values():
    assert hinge_surrogate(0.5, -0.2) == pytest.approx(0.3)
    assert hinge_surrogate(0.5, -0.8) == 0.0
    np.testing.assert_allclose(
        hinge_surrogate(np.array([0.1, 0.1]), np.array([-0.05, -0.2])), [0.05, 0.0]
    )


def test_indicator_boundary_counts_as_violation():
    np.testing.assert_array_equal(indicator(np.array([-1e-9, 0.0, 1e-9])), [0, 1, 1])


def test_chance_config_validation():
    with pytest.raises(ValueError):
        ChanceConfig(beta=0.0, lambda_lo=np.zeros(1), lambda_hi=np.zeros(1))
    with pytest.raises(ValueError):
        ChanceConfig(beta=0.1, lambda_lo=np.zeros(1), lambda_hi=np.zeros(1),
                     lambda_mode="other")


# ---------------------------------------------------------------------------
# Hand-computed Lagrangian and dual update on a fabricated 2-sample batch


def _tiny_state(n, policy, beta=0.5, lam=0.1, mu=0.7, sigma_mu=2.0,
                lambda_mode="fixed"):
    return TrainerState(
        policy=policy,
        mu_lo=np.full(n, mu),
        mu_hi=np.full(n, 0.3),
        chance=ChanceConfig(beta=beta, lambda_lo=np.full(n, lam),
                            lambda_hi=np.full(n, lam), lambda_mode=lambda_mode),
        sigma_phi=1e-3,
        sigma_lambda=1e-3,
        sigma_mu=sigma_mu,
    )


def _fabricated_batch(n, ctrl):
    steps = [
        make_step(n, -0.01 * np.ones(n), -0.005 * np.ones(n), ctrl),
        make_step(n, -0.02 * np.ones(n), -0.01 * np.ones(n), ctrl, t=1),
    ]
    x = [np.full(2 * n, 0.1), np.full(2 * n, 0.2)]
    v = [np.full(n, 0.96), np.full(n, 1.01)]
    eqs = [
        Equilibrium(x_dag=x[i], v_dag=v[i], iterations=1, converged=True, residual=0.0)
        for i in range(2)
    ]
    return Batch(samples=tuple(steps), equilibria=tuple(eqs))


def test_lagrangian_hand_computed(graph8):
    n = graph8.n
    pol = init_policy(graph8, [3], k_max=0.1, seed=0)
    state = _tiny_state(n, pol, beta=0.5, lam=0.1, mu=0.7)
    batch = _fabricated_batch(n, [3])
    v_lo, v_hi = 0.9604, 1.0 ** 2  # 0.98^2 and 1.0
    # cost: weight 1, floor 0 => mean over samples of ||x||^2
    cost = 0.5 * (2 * n * 0.1**2 + 2 * n * 0.2**2)
    # low hinge: max(0.1 + 0.9604 - v, 0): sample v=0.96 -> 0.1004; v=1.01 -> 0.0504
    h_lo = 0.5 * (0.1004 + 0.0504)
    # high hinge: max(0.1 + v - 1.0, 0): v=0.96 -> 0.06; v=1.01 -> 0.11
    h_hi = 0.5 * (0.06 + 0.11)
    expected = cost + n * 0.7 * (h_lo - 0.5 * 0.1) + n * 0.3 * (h_hi - 0.5 * 0.1)
    assert lagrangian(batch, state, v_lo, v_hi) == pytest.approx(expected, abs=1e-12)


def test_dual_update_hand_computed(graph8):
    n = graph8.n
    pol = init_policy(graph8, [3], k_max=0.1, seed=0)
    state = _tiny_state(n, pol, beta=0.5, lam=0.1, mu=0.7, sigma_mu=2.0)
    batch = _fabricated_batch(n, [3])
    new = dual_update(state, batch, 0.9604, 1.0)
    asc_lo = 0.5 * (0.1004 + 0.0504) - 0.5 * 0.1
    asc_hi = 0.5 * (0.06 + 0.11) - 0.5 * 0.1
    np.testing.assert_allclose(new.mu_lo, 0.7 + 2.0 * asc_lo, atol=1e-12)
    np.testing.assert_allclose(new.mu_hi, 0.3 + 2.0 * asc_hi, atol=1e-12)
    # projection onto the nonnegative orthant
    state2 = dataclasses.replace(state, sigma_mu=1000.0, mu_lo=np.zeros(n),
                                 mu_hi=np.zeros(n))
    ch = dataclasses.replace(state2.chance, lambda_lo=np.zeros(n), lambda_hi=np.zeros(n))
    state2 = dataclasses.replace(state2, chance=ch)
    new2 = dual_update(state2, batch, 0.5, 2.0)  # widely feasible limits
    assert np.all(new2.mu_lo == 0.0)
    assert np.all(new2.mu_hi == 0.0)


def test_grad_lambda_hand_computed(graph8):
    n = graph8.n
    pol = init_policy(graph8, [3], k_max=0.1, seed=0)
    state = _tiny_state(n, pol, beta=0.5, lam=0.1, mu=0.7, lambda_mode="learned")
    batch = _fabricated_batch(n, [3])
    g_lo, g_hi = grad_lambda(batch, state, 0.9604, 1.0)
    # both samples violate both offset constraints => indicator mean 1
    np.testing.assert_allclose(g_lo, 0.7 * (1.0 - 0.5), atol=1e-15)
    np.testing.assert_allclose(g_hi, 0.3 * (1.0 - 0.5), atol=1e-15)
    fixed = _tiny_state(n, pol)
    with pytest.raises(ValueError):
        grad_lambda(batch, fixed, 0.9604, 1.0)


# ---------------------------------------------------------------------------
# Policy gradient vs end-to-end finite differences through the equilibrium


def _interior_samples(graph, rng, count):
    """Slots whose cost floor sits mid-box so equilibria are interior."""
    n = graph.n
    out = []
    for t in range(count):
        stp = make_step(n, -rng.uniform(0.002, 0.02, n), -rng.uniform(0.001, 0.012, n),
                        [3, 5, 7], p_cap=0.4, q_cap=0.3, t=t)
        floor_p = 0.5 * stp.box.p_hi
        floor_q = 0.5 * stp.box.q_hi
        out.append(dataclasses.replace(stp, cost=CostModel(floor_p, floor_q, 1.0)))
    return out


def _solve_all(samples, pol, model, graph, cfg):
    eqs = tuple(solve_equilibrium(s, pol, model, graph, cfg) for s in samples)
    assert all(e.converged for e in eqs)
    return Batch(samples=tuple(samples), equilibria=eqs)


def test_grad_policy_matches_finite_difference(graph8, model8):
    """End-to-end check: analytic gradient vs numeric differentiation of the
    Lagrangian with equilibria re-solved after every parameter perturbation.
    The voltage-feedback gains are zeroed so the equilibrium response used by
    the analytic formula is exact."""
    rng = np.random.default_rng(17)
    pol = init_policy(graph8, [3, 5, 7], arch=(1, 5), k_max=0.1, seed=3)
    pol.k[:] = 0.0
    for b in pol.biases:
        b += rng.normal(scale=0.05, size=b.shape)
    n = graph8.n
    state = _tiny_state(n, pol, beta=0.3, lam=0.02, mu=0.7)
    v_lo, v_hi = 0.9604, 1.0
    samples = _interior_samples(graph8, rng, 3)
    cfg = ControllerConfig(alpha=ALPHA, eq_tol=1e-13, eq_max_iters=20_000)

    batch = _solve_all(samples, pol, model8, graph8, cfg)
    grads = grad_policy(batch, state, model8, v_lo, v_hi, ALPHA)

    def lag():
        return lagrangian(_solve_all(samples, pol, model8, graph8, cfg),
                          state, v_lo, v_hi)

    eps = 1e-6
    checked = 0
    rng2 = np.random.default_rng(5)
    for l, W in enumerate(pol.weights):
        flat = W.reshape(-1)
        for j in rng2.choice(flat.size, size=4, replace=False):
            orig = flat[j]
            flat[j] = orig + eps
            up = lag()
            flat[j] = orig - eps
            dn = lag()
            flat[j] = orig
            fd = (up - dn) / (2 * eps)
            assert grads["weights"][l].reshape(-1)[j] == pytest.approx(fd, abs=2e-6), (
                f"layer {l} weight {j}"
            )
            checked += 1
    for l, B in enumerate(pol.biases):
        flat = B.reshape(-1)
        j = int(rng2.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + eps
        up = lag()
        flat[j] = orig - eps
        dn = lag()
        flat[j] = orig
        fd = (up - dn) / (2 * eps)
        assert grads["biases"][l].reshape(-1)[j] == pytest.approx(fd, abs=2e-6)
        checked += 1
    assert checked >= 10


def test_grad_policy_with_explicit_jacobian_matches_linear(graph8, model8):
    """Passing [R X] as the voltage Jacobian reproduces the analytic path."""
    rng = np.random.default_rng(23)
    pol = init_policy(graph8, [3, 5, 7], arch=(1, 4), k_max=0.1, seed=1)
    n = graph8.n
    state = _tiny_state(n, pol, beta=0.3, lam=0.02, mu=0.7)
    samples = _interior_samples(graph8, rng, 4)
    cfg = ControllerConfig(alpha=ALPHA, eq_tol=1e-11)
    batch = _solve_all(samples, pol, model8, graph8, cfg)
    g0 = grad_policy(batch, state, model8, 0.9604, 1.0, ALPHA)
    jac = np.concatenate([model8.R, model8.X], axis=1)
    g1 = grad_policy(batch, state, model8, 0.9604, 1.0, ALPHA, voltage_jacobian=jac)
    for l in range(len(g0["weights"])):
        np.testing.assert_allclose(g1["weights"][l], g0["weights"][l], atol=1e-14)
        np.testing.assert_allclose(g1["biases"][l], g0["biases"][l], atol=1e-14)
    np.testing.assert_allclose(g1["k"], g0["k"], atol=1e-14)


def test_grad_policy_zero_where_projection_active(graph8, model8):
    """Channels whose equilibrium is pinned at the box get no gradient."""
    rng = np.random.default_rng(31)
    pol = init_policy(graph8, [3, 5, 7], arch=(1, 4), k_max=0.1, seed=2)
    n = graph8.n
    # floor-at-zero cost pins every channel at the lower box corner
    samples = [make_step(n, -rng.uniform(0.002, 0.02, n),
                         -rng.uniform(0.001, 0.012, n), [3, 5, 7], t=t)
               for t in range(3)]
    cfg = ControllerConfig(alpha=ALPHA, eq_tol=1e-11)
    batch = _solve_all(samples, pol, model8, graph8, cfg)
    _, x, _ = batch.converged_arrays()
    assert np.all(np.abs(x[:, pol.node_index]) < 1e-9)  # pinned at zero
    state = _tiny_state(n, pol, mu=0.7)
    grads = grad_policy(batch, state, model8, 0.9604, 1.0, ALPHA)
    for l in range(len(grads["weights"])):
        np.testing.assert_allclose(grads["weights"][l], 0.0, atol=1e-15)
    np.testing.assert_allclose(grads["k"], 0.0, atol=1e-15)


# ---------------------------------------------------------------------------
# Gradient-free voltage Jacobian


def test_zo_jacobian_exact_on_linear_plant(graph8, model8):
    n = graph8.n
    stp = make_step(n, -0.01 * np.ones(n), -0.005 * np.ones(n), [3, 5, 7])
    v_env = env_voltage(model8, stp.p_u, stp.q_u)

    def plant(x):
        return model8.A @ x + v_env

    jac = zo_voltage_jacobian(graph8, stp, stp.box.midpoint, zo_step=1e-3, plant=plant)
    np.testing.assert_allclose(jac, model8.A, atol=1e-10)


def test_zo_jacobian_second_order_on_nonlinear_plant(graph8):
    """Central-difference error decays quadratically in the probe size."""
    n = graph8.n
    stp = make_step(n, -0.01 * np.ones(n), -0.005 * np.ones(n), [3, 5, 7])
    x = stp.box.midpoint
    ref = zo_voltage_jacobian(graph8, stp, x, zo_step=1e-6)
    err = {}
    for h in (4e-2, 2e-2, 1e-2):
        jac = zo_voltage_jacobian(graph8, stp, x, zo_step=h)
        err[h] = np.max(np.abs(jac - ref))
    r1 = err[4e-2] / err[2e-2]
    r2 = err[2e-2] / err[1e-2]
    assert 2.5 < r1 < 6.0
    assert 2.5 < r2 < 6.0


def test_zo_jacobian_rejects_bad_step(graph8):
    stp = make_step(graph8.n, -0.01 * np.ones(graph8.n),
                    -0.005 * np.ones(graph8.n), [3])
    with pytest.raises(ValueError):
        zo_voltage_jacobian(graph8, stp, stp.box.midpoint, zo_step=0.0)


# ---------------------------------------------------------------------------
# Adam and the training loop


def test_adam_first_step_is_signed_lr(graph8):
    pol = init_policy(graph8, [3], arch=(1, 2), k_max=0.1, seed=0)
    before = [w.copy() for w in pol.weights]
    adam = AdamState.zeros_like(pol)
    grads = {
        "weights": [np.ones_like(w) for w in pol.weights],
        "biases": [np.full_like(b, -1.0) for b in pol.biases],
        "k": np.zeros_like(pol.k),
    }
    adam_update(pol, grads, adam, lr=0.01)
    # first Adam step moves every coordinate by ~lr against the gradient sign
    for w, w0 in zip(pol.weights, before):
        np.testing.assert_allclose(w, w0 - 0.01 * (1.0 / (1.0 + 1e-8)), atol=1e-9)
    for b in pol.biases:
        np.testing.assert_allclose(b, 0.01 * (1.0 / (1.0 + 1e-8)), atol=1e-9)
    np.testing.assert_array_equal(pol.k, np.full(2, 0.05))  # zero grad: unchanged
    assert adam.t == 1


def test_controllable_nodes(graph8):
    stp = make_step(graph8.n, -0.01 * np.ones(graph8.n),
                    -0.005 * np.ones(graph8.n), [3, 5, 7])
    assert controllable_nodes(stp) == (3, 5, 7)


def _train_scenario(graph, horizon=48, seed=1):
    cfg = GeneratorConfig(
        controllable=(3, 5, 7),
        d_def_p_kva=np.full(graph.n, 15.0),
        d_def_q_kva=np.full(graph.n, 9.0),
        horizon=horizon,
        trend=((0.0, 0.55), (0.05, 1.0)),
    )
    return generate_profile(graph, cfg, seed=seed)


def test_train_zero_epochs_returns_initial_state(graph8, model8):
    scn = _train_scenario(graph8, horizon=8)
    cfg = TrainerConfig(epochs=0, batch_size=8)
    state, log = train(scn, cfg, graph8, model8)
    assert log == []
    assert state.epoch == 0
    np.testing.assert_array_equal(state.mu_lo, np.ones(graph8.n))
    assert state.policy.nodes == (3, 5, 7)


def test_train_rejects_unstable_policy(graph8, model8):
    scn = _train_scenario(graph8, horizon=8)
    pol = init_policy(graph8, [3, 5, 7], k_max=10.0, seed=0)
    pol.k[:] = 10.0
    with pytest.raises(ValueError, match="stability"):
        train(scn, TrainerConfig(epochs=1), graph8, model8, policy=pol)


def test_train_deterministic(graph8, model8):
    scn = _train_scenario(graph8, horizon=24)
    cfg = TrainerConfig(epochs=3, batch_size=8, v_lo=0.9604, v_hi=1.0816)
    s1, log1 = train(scn, cfg, graph8, model8)
    s2, log2 = train(scn, cfg, graph8, model8)
    assert log1 == log2
    for a, b in zip(s1.policy.weights, s2.policy.weights):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(s1.mu_lo, s2.mu_lo)


def test_train_respects_gain_clamp_and_logs(graph8, model8):
    scn = _train_scenario(graph8, horizon=24)
    cfg = TrainerConfig(epochs=4, batch_size=8, v_lo=0.9604, v_hi=1.0816)
    state, log = train(scn, cfg, graph8, model8)
    assert len(log) == 4
    assert [e["epoch"] for e in log] == [1, 2, 3, 4]
    for e in log:
        assert np.isfinite(e["lagrangian"])
        assert 0.0 <= e["viol_rate_lo"] <= 1.0
        assert e["skipped"] == 0
    assert np.all(state.policy.k >= 0.0)
    assert np.all(state.policy.k <= state.policy.k_max + 1e-15)
    assert np.all(state.mu_lo >= 0.0)


def test_train_gradient_free_mode_runs(graph8, model8):
    scn = _train_scenario(graph8, horizon=8)
    cfg = TrainerConfig(mode="gradient_free", epochs=1, batch_size=8,
                        v_lo=0.9604, v_hi=1.0816)
    state, log = train(scn, cfg, graph8, model8)
    assert len(log) == 1
    assert log[0]["skipped"] == 0


def test_trainer_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(mode="zeroth")

"""Shared fixtures: shipped feeders and small synthetic scenarios."""

from pathlib import Path

import numpy as np
import pytest

from localopf import (
    BoxLimits,
    CostModel,
    ScenarioStep,
    build_sensitivities,
    load_feeder,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "localopf" / "data"


@pytest.fixture(scope="session")
def graph8():
    return load_feeder(DATA / "feeder_8bus.txt")


@pytest.fixture(scope="session")
def graph37():
    return load_feeder(DATA / "feeder_37bus.txt")


@pytest.fixture(scope="session")
def model8(graph8):
    return build_sensitivities(graph8)


@pytest.fixture(scope="session")
def model37(graph37):
    return build_sensitivities(graph37)


def make_step(n, p_u, q_u, ctrl, p_cap=0.5, q_cap=0.3, weight=1.0, t=0):
    """Scenario slot with floor-at-zero quadratic cost and [0, cap] boxes."""
    ci = np.asarray(ctrl, dtype=int) - 1
    p_hi = np.zeros(n)
    q_hi = np.zeros(n)
    p_hi[ci] = p_cap
    q_hi[ci] = q_cap
    return ScenarioStep(
        t=t,
        tau=6.0,
        p_u=np.asarray(p_u, dtype=float),
        q_u=np.asarray(q_u, dtype=float),
        cost=CostModel(np.zeros(n), np.zeros(n), weight=weight),
        box=BoxLimits(np.zeros(n), p_hi, np.zeros(n), q_hi),
    )

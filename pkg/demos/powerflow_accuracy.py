"""Compare the exact branch-flow solver against the linearized model.

Sweeps a uniform load ramp on the 8-bus feeder and reports the voltage error
introduced by dropping the line-loss terms — the error grows quadratically
with loading, which is why the linear model is safe for control but the
nonlinear plant is used for final evaluation.
"""

from pathlib import Path

import numpy as np

from localopf import (
    InjectionState,
    VoltageCollapseError,
    build_sensitivities,
    load_feeder,
    solve_linear,
    solve_nonlinear,
)

DATA = Path(__file__).resolve().parents[1] / "src" / "localopf" / "data"


def main():
    graph = load_feeder(DATA / "feeder_8bus.txt")
    model = build_sensitivities(graph)
    n = graph.n
    print(f"{'load (kVA/bus)':>15} {'min |V| (exact)':>16} {'max lin err':>12} "
          f"{'iters':>6}")
    for kva in (5.0, 10.0, 20.0, 40.0, 80.0):
        load = kva / graph.base_power
        s = InjectionState(p=np.zeros(n), q=np.zeros(n),
                           p_u=np.full(n, -load), q_u=np.full(n, -0.6 * load))
        try:
            sol = solve_nonlinear(graph, s, 1.0)
        except VoltageCollapseError as exc:
            print(f"{kva:>15.1f}  {exc} -- beyond the feeder's loadability limit")
            break
        v_lin = solve_linear(model, s)
        err = np.max(np.abs(sol.v - v_lin))
        print(f"{kva:>15.1f} {np.sqrt(sol.v.min()):>16.5f} {err:>12.2e} "
              f"{sol.iterations:>6d}")
    print("\nresiduals of the exact solver stay at solver tolerance (1e-10);")
    print("the linear-model error scales ~quadratically with loading.")


if __name__ == "__main__":
    main()

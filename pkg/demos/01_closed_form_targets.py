"""
Replicating a fixed and a random terminal target
================================================

A scalar account ``dx/dt = u`` starts at zero and must end at a target
``f`` at ``T = 1``. The deposit rate is penalised by
``Gamma(t) = (1 - t)**0.75``, cheap near the deadline.
"""

import numpy as np

from lqreplication import (
    Deterministic,
    LinearWiener,
    build_grid,
    make_system,
    make_weight,
    min_cost_closed_form,
    replicate,
    riccati_build,
    sample_ensemble,
)

system = make_system(A=0.0, b=1.0, a=0.0, T=1.0)
weight = make_weight("pure-power", alpha=0.75, T=1.0)

# The default grid is graded towards T with exponent 1/(1 - alpha) = 4.
grid = build_grid(4096, 1.0, weight=weight)
ric = riccati_build(system, weight, grid)
print("R(0) =", ric.R_nodes[0, 0, 0])

# %%
# A fixed target f = 1. Every path follows the same deposit profile
# u(t) = (1 - t)**-0.75 / 4 and lands on 1.
run = replicate(system, weight, Deterministic(1.0), grid, sample_ensemble(grid, 8, 1, seed=1))
print("mu_bar =", run.mu_bar[0], " cost =", run.mean_cost, " x(T) =", run.x_T[0, 0])
print("u at t = 0, 0.5, 0.9:", run.traj_u[0, np.searchsorted(grid.nodes, [0.0, 0.5, 0.9]), 0])

# %%
# A random target f = w(1). The dual process starts at zero and moves with
# the noise; the expected cost is 1/3.
payoff = LinearWiener(c0=[0.0], C=[[1.0]])
print("closed-form optimum:", min_cost_closed_form(ric, payoff))
for N in (64, 256, 1024):
    g = build_grid(N, 1.0, weight=weight)
    r = replicate(system, weight, payoff, g, sample_ensemble(g, 20_000, 1, seed=7))
    print(f"N={N:5d}  cost={r.mean_cost:.4f} +- {r.cost_se:.4f}  residual RMSE={r.residual_rmse:.2e}")

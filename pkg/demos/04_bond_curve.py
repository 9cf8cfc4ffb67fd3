"""
A short rate that reproduces random bond values
===============================================

For maturities 1 and 2 the integrated rate over each interval is
prescribed as ``exp(-3 + 0.2 dW)``. Each interval gets its own penalty
weight vanishing at its maturity, and the reconstructed discount factors
telescope back to the targets.
"""

import numpy as np

from lqreplication import bond_curve, bond_grid, make_bond_spec, sample_ensemble

spec = make_bond_spec([1.0, 2.0], [(-3.0, 0.2), (-3.0, 0.2)], steps=256)
res = bond_curve(spec, sample_ensemble(bond_grid(spec), 10_000, 1, seed=5))
for key, value in res.summary().items():
    print(f"{key:>24}: {value}")

# %%
# A flat curve: integrated rate 0.05 over one year gives exp(-0.05).
flat = make_bond_spec([1.0], [0.05], steps=128)
res = bond_curve(flat, sample_ensemble(bond_grid(flat), 10, 1, seed=0))
print("discount factor", res.xi_hat[0, 0], "vs", np.exp(-0.05))

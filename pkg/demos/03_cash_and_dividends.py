"""
Saving towards an equity-linked amount
======================================

Deposits earn interest at rate ``r``; the account must match a payoff
written on a driftless GBM share price. We cover half of an at-the-money
call, then plan a dividend flow worth 5% of the final share price.
"""

from lqreplication import (
    EuropeanCall,
    Market,
    build_grid,
    cash_plan,
    dividend_plan,
    make_weight,
    sample_ensemble,
)

market = Market(S0=1.0, sigma=0.2)
weight = make_weight("pure-power", 0.75, 1.0)
grid = build_grid(512, 1.0, weight=weight)
ens = sample_ensemble(grid, 20_000, 1, seed=11)

plan = cash_plan(market, EuropeanCall(0.5, 1.0, market, 1.0), weight, 0.05, grid, ens)
for key, value in plan.summary().items():
    print(f"{key:>22}: {value:.6g}")

# %%
# Dividends: no interest, target 0.05 S(T). The share price is a
# martingale, so the mean payout is 0.05.
div = dividend_plan(market, weight, grid, ens, c=0.05)
mean, se = div.mean_accumulated()
print(f"mean dividend total {mean:.5f} +- {se:.5f}, optimal cost {div.J_star:.3e}")

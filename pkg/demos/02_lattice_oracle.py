"""
Checking the continuous optimum against an exact lattice optimum
================================================================

On a binomial tree every adapted control is a finite vector, so the
constrained problem is a quadratic program solved exactly by one KKT
system. The target ``w(1)`` is replaced by the walk one step earlier so
that it can be met on every path.
"""

from lqreplication import LinearWiener, make_system, make_weight, oracle_vs_formula

system = make_system(0.0, 1.0, 0.0, 1.0)
weight = make_weight("pure-power", 0.75, 1.0)

for depth in (2, 4, 6, 8, 10):
    rep = oracle_vs_formula(system, weight, LinearWiener([0.0], [[1.0]]), depth)
    print(f"depth {depth:2d}: lattice optimum {rep['oracle_cost']:.5f}, "
          f"projected formula {rep['formula_cost']:.5f}, gap to 1/3 {rep['gap']:.4f}")

import numpy as np
import pytest

from lqreplication.kernels import Deterministic, GBMTerminal, LinearWiener
from lqreplication.replicator import (
    admissibility_report,
    control_at,
    controls,
    cost,
    dual_init,
    integrate_state,
    lagrangian,
    make_system,
    min_cost_closed_form,
    perturbation_optimality,
    replicate,
    riccati_build,
    saddle_check,
    simulate_dual,
)
from lqreplication.sde import Market, build_grid, sample_ensemble
from lqreplication.weights import make_weight


@pytest.fixture(scope="module")
def scalar():
    system = make_system(0.0, 1.0, 0.0, 1.0)
    weight = make_weight("pure-power", 0.75, 1.0)
    return system, weight


def test_riccati_closed_form(scalar):
    system, weight = scalar
    grid = build_grid(64, 1.0, weight=weight)
    ric = riccati_build(system, weight, grid)
    np.testing.assert_allclose(ric.R_nodes[:, 0, 0], 4 * grid.remaining ** 0.25, rtol=1e-13, atol=1e-15)
    assert ric.R_nodes[0, 0, 0] == pytest.approx(4.0, rel=1e-14)
    assert np.all(ric.R_nodes[-1] == 0.0)
    assert ric.R(0.5)[0, 0] == pytest.approx(4 * 0.5 ** 0.25, rel=1e-13)


def test_riccati_with_interest_against_trapezoid_reference():
    r = 0.1
    system = make_system(r, 1.0, 0.0, 1.0)
    weight = make_weight("pure-power", 0.75, 1.0)
    ric = riccati_build(system, weight, build_grid(16, 1.0, weight=weight))
    # substitute v = tau^{1/4}: int_0^1 e^{2r tau} tau^{-3/4} dtau = 4 int_0^1 e^{2r v^4} dv
    v = np.linspace(0.0, 1.0, 1_000_001)
    ref = 4 * np.trapezoid(np.exp(2 * r * v ** 4), v)
    assert ric.R_nodes[0, 0, 0] == pytest.approx(ref, abs=1e-8)


def test_riccati_rejects_mismatched_horizon(scalar):
    system, weight = scalar
    with pytest.raises(ValueError):
        riccati_build(system, weight, build_grid(8, 2.0))


def test_dual_init_examples(scalar):
    system, weight = scalar
    ric = riccati_build(system, weight, build_grid(8, 1.0, weight=weight))
    assert dual_init(ric, Deterministic(1.0)) == pytest.approx([0.25], rel=1e-14)
    assert dual_init(ric, Deterministic(0.0)) == pytest.approx([0.0])
    sys2 = make_system(np.zeros((2, 2)), np.eye(2), [0.0, 0.0], 1.0)
    w2 = make_weight("pure-power", 0.75, 1.0, G=np.eye(2))
    ric2 = riccati_build(sys2, w2, build_grid(8, 1.0, weight=w2))
    np.testing.assert_allclose(dual_init(ric2, Deterministic([1.0, 2.0])), [0.25, 0.5], rtol=1e-14)
    # already attained mean with nonzero dynamics
    sys3 = make_system(0.3, 1.0, 2.0, 1.0)
    ric3 = riccati_build(sys3, weight, build_grid(8, 1.0, weight=weight))
    assert dual_init(ric3, Deterministic(2.0 * np.exp(0.3))) == pytest.approx([0.0], abs=1e-15)


def test_dual_deterministic_and_reproducible(scalar):
    system, weight = scalar
    grid = build_grid(32, 1.0, weight=weight)
    ric = riccati_build(system, weight, grid)
    blk = sample_ensemble(grid, 10, 1, seed=3).block(0, 10)
    mu, _ = simulate_dual(ric, Deterministic(1.0), blk)
    assert np.all(mu == 0.25)
    a, _ = simulate_dual(ric, LinearWiener([0.0], [[1.0]]), blk)
    b, _ = simulate_dual(ric, LinearWiener([0.0], [[1.0]]), sample_ensemble(grid, 10, 1, seed=3).block(0, 10))
    np.testing.assert_array_equal(a, b)


def test_dual_variance_matches_isometry(scalar):
    system, weight = scalar
    grid = build_grid(64, 1.0, weight=weight)
    ric = riccati_build(system, weight, grid)
    M = 40_000
    blk = sample_ensemble(grid, M, 1, seed=12).block(0, M)
    mu, khat = simulate_dual(ric, LinearWiener([0.0], [[1.0]]), blk)
    var = mu[:, 1:, 0].var(axis=0, ddof=1)
    gain = ric.dual_gain("cell")[:, 0, 0]
    exact = np.cumsum(gain ** 2 * grid.dt)
    assert np.all(np.abs(var - exact) <= 4 * exact * np.sqrt(2 / M))
    # away from T the discrete variance tracks (1 - sqrt(1-t))/8
    t = grid.nodes[1:]
    mid = t <= 0.9
    np.testing.assert_allclose(exact[mid], (1 - np.sqrt(1 - t[mid])) / 8, rtol=0.05)
    np.testing.assert_allclose(khat[0, :, 0, 0], gain)


def test_control_at_examples(scalar):
    system, weight = scalar
    ric = riccati_build(system, weight, build_grid(8, 1.0, weight=weight))
    u, psi = control_at(ric, weight, system, np.array([0.25]), 0.0)
    assert u == pytest.approx([0.25]) and psi == pytest.approx([0.25])
    u, _ = control_at(ric, weight, system, np.array([0.25]), 0.5)
    assert u == pytest.approx([0.25 * 0.5 ** -0.75], rel=1e-14)
    u, _ = control_at(ric, weight, system, np.zeros(1), 0.3)
    assert u == pytest.approx([0.0])
    with pytest.raises(ValueError):
        control_at(ric, weight, system, np.array([0.25]), 1.0)


def test_pointwise_maximum_condition():
    A = np.array([[0.0, 1.0], [-0.5, 0.1]])
    b = np.array([[1.0, 0.2], [0.0, 1.0]])
    system = make_system(A, b, [0.0, 0.0], 1.0)
    G = np.array([[2.0, 0.3], [0.3, 1.0]])
    weight = make_weight("plateau-power", 0.7, 1.0, G=G, T1=0.6)
    ric = riccati_build(system, weight, build_grid(16, 1.0, weight=weight))
    rng = np.random.default_rng(0)
    for t in (0.0, 0.3, 0.7, 0.999):
        mu = rng.normal(size=(50, 2))
        u, psi = control_at(ric, weight, system, mu, t)
        gam = weight.gamma_remaining(np.array(1.0 - t))
        assert np.abs(psi @ b - u @ gam.T).max() <= 1e-10


def test_integrate_state_examples(scalar):
    system = make_system([[0.2]], [[1.0]], [1.5], 1.0)
    grid = build_grid(10, 1.0, 2.0)
    x = integrate_state(system, np.zeros((1, 10, 1)), grid)
    assert x[0, -1, 0] == pytest.approx(1.5 * np.exp(0.2), rel=1e-14)
    assert cost(np.zeros((2, 10, 1)), make_weight("pure-power", 0.75, 1.0), grid) == pytest.approx([0.0, 0.0])


def _fixed_target_left_sampled(weight, N):
    system = make_system(0.0, 1.0, 0.0, 1.0)
    grid = build_grid(N, 1.0, weight=weight)
    u = (0.25 * weight.gamma_inv_remaining(grid.remaining[:-1])[:, 0, 0])[None, :, None]
    return integrate_state(system, u, grid)[0, -1, 0], cost(u, weight, grid)[0]


def test_left_sampled_exact_control_converges(scalar):
    _, weight = scalar
    errs = [abs(_fixed_target_left_sampled(weight, N)[0] - 1.0) for N in (256, 1024, 4096)]
    assert errs[0] > errs[1] > errs[2]
    # cell k (counted from T) of the grid graded with exponent 4 delivers
    # (1 - 3/(2k) + 1/k^2 - 1/(4k^3)) / N, so the total shortfall sums to
    # sum_k (3/(2k) - 1/k^2 + 1/(4k^3)) / N
    N = 4096
    k = np.arange(1, N + 1)
    shortfall = np.sum(1.5 / k - 1.0 / k ** 2 + 0.25 / k ** 3) / N
    assert errs[2] == pytest.approx(shortfall, rel=1e-9)
    x_T, c = _fixed_target_left_sampled(weight, N)
    assert c == pytest.approx(0.25, abs=1e-3)


@pytest.mark.xfail(strict=True, reason="left-endpoint sampling of the exact control misses x(1)=1 "
                                       "by 2.9e-3 at N=4096; the default cell scheme is exact")
def test_left_sampled_exact_control_within_1e3(scalar):
    _, weight = scalar
    assert abs(_fixed_target_left_sampled(weight, 4096)[0] - 1.0) <= 1e-3


def test_min_cost_examples(scalar):
    system, weight = scalar
    ric = riccati_build(system, weight, build_grid(16, 1.0, weight=weight))
    assert min_cost_closed_form(ric, Deterministic(1.0)) == pytest.approx(0.25, rel=1e-14)
    assert min_cost_closed_form(ric, LinearWiener([0.0], [[1.0]])) == pytest.approx(1 / 3, rel=1e-12)
    assert min_cost_closed_form(ric, Deterministic(0.0)) == 0.0


def test_fixed_target_run_is_exact(scalar):
    system, weight = scalar
    grid = build_grid(4096, 1.0, weight=weight)
    run = replicate(system, weight, Deterministic(1.0), grid, sample_ensemble(grid, 4, 1, seed=1))
    np.testing.assert_allclose(run.x_T, 1.0, atol=1e-12)
    np.testing.assert_allclose(run.cost, 0.25, rtol=1e-12)
    L, _, c, _ = lagrangian(run)
    assert L == pytest.approx(0.125, abs=1e-12) and c == pytest.approx(0.0, abs=1e-12)
    assert lagrangian(run, np.zeros_like(run.f))[0] == pytest.approx(0.5 * run.mean_cost)
    rep = admissibility_report(run)
    assert rep["abs_integral_sq"] == pytest.approx(1.0, rel=1e-10)
    assert rep["finite"]


def test_wiener_target_statistics(scalar):
    system, weight = scalar
    payoff = LinearWiener([0.0], [[1.0]])
    grid = build_grid(256, 1.0, weight=weight)
    run = replicate(system, weight, payoff, grid, sample_ensemble(grid, 20_000, 1, seed=7))
    assert abs(run.mean_cost - 1 / 3) <= 3 * run.cost_se
    assert np.all(np.abs(run.mu_node_mean[:, 0]) <= 3 * run.mu_node_se[:, 0] + 1e-15)
    assert run.residual_rmse < 1e-4
    rep = admissibility_report(run)
    assert rep["g_energy_se"] < 0.05 * rep["g_energy"]
    assert rep["abs_integral_sq_se"] < 0.05 * rep["abs_integral_sq"]
    # retained trajectories are consistent with the per-path summaries
    assert run.traj_ids.tolist() == list(range(32))
    np.testing.assert_array_equal(run.traj_x[:, -1], run.x_T[:32])


def test_residual_decreases_under_refinement(scalar):
    system, weight = scalar
    payoff = LinearWiener([0.0], [[1.0]])
    rmse = []
    for N in (64, 256, 1024):
        grid = build_grid(N, 1.0, weight=weight)
        rmse.append(replicate(system, weight, payoff, grid, sample_ensemble(grid, 2000, 1, seed=7)).residual_rmse)
    assert rmse[0] > rmse[1] > rmse[2]


def test_zero_control_when_mean_attained():
    system = make_system(0.0, 1.0, 1.0, 1.0)
    weight = make_weight("pure-power", 0.75, 1.0)
    grid = build_grid(32, 1.0, weight=weight)
    run = replicate(system, weight, Deterministic(1.0), grid, sample_ensemble(grid, 5, 1, seed=0))
    np.testing.assert_array_equal(run.traj_u, 0.0)
    rep = admissibility_report(run)
    assert rep["g_energy"] == 0.0 and rep["abs_integral_sq"] == 0.0


def test_worker_count_does_not_change_results(scalar):
    system, weight = scalar
    market = Market(1.0, 0.2)
    grid = build_grid(64, 1.0, weight=weight)
    ens = sample_ensemble(grid, 3000, 1, seed=5)
    a = replicate(system, weight, GBMTerminal(1.0, market), grid, ens, block_size=256, workers=1)
    b = replicate(system, weight, GBMTerminal(1.0, market), grid, ens, block_size=256, workers=4)
    for name in ("f", "x_T", "cost", "mu_T", "mu_node_sum", "traj_u"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_loewner_decay(scalar):
    A = np.array([[0.1, 0.4], [-0.2, 0.0]])
    system = make_system(A, np.eye(2), [0.0, 0.0], 1.0)
    weight = make_weight("plateau-power", 0.8, 1.0, G=[[1.0, 0.4], [0.4, 2.0]], T1=0.3)
    ric = riccati_build(system, weight, build_grid(128, 1.0, weight=weight))
    diff = ric.R_nodes[:-1] - ric.R_nodes[1:]
    assert np.linalg.eigvalsh(diff).min() >= -1e-10


@pytest.mark.parametrize("payoff", [Deterministic(1.0), LinearWiener([0.0], [[1.0]])], ids=["fixed", "wiener"])
def test_perturbations_do_not_lower_cost(scalar, payoff):
    system, weight = scalar
    grid = build_grid(64, 1.0, weight=weight)
    ens = sample_ensemble(grid, 5000, 1, seed=2)
    recs = perturbation_optimality(system, weight, payoff, grid, ens, n_dirs=20)
    assert len(recs) == 80
    assert all(r["ok"] for r in recs)
    sad = saddle_check(system, weight, payoff, grid, ens, n_dirs=5)
    assert all(r["ok"] for r in sad["multiplier_side"] + sad["control_side"])


def test_left_scheme_is_available(scalar):
    system, weight = scalar
    grid = build_grid(4096, 1.0, weight=weight)
    run = replicate(system, weight, Deterministic(1.0), grid, sample_ensemble(grid, 2, 1, seed=1), scheme="left")
    assert run.scheme == "left"
    assert abs(run.x_T[0, 0] - 1.0) <= 1e-2
    with pytest.raises(ValueError):
        replicate(system, weight, Deterministic(1.0), grid, sample_ensemble(grid, 2, 1, seed=1), scheme="mid")

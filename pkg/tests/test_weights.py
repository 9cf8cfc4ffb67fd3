import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lqreplication.weights import make_weight


def test_pure_power_profile_and_constant():
    w = make_weight("pure-power", 0.75, 1.0, G=1.0)
    t = np.array([0.0, 0.3, 0.9])
    np.testing.assert_allclose(w.g(t), (1 - t) ** 0.75, rtol=1e-15)
    assert w.c == 1.0
    assert w.breakpoints == ()


def test_plateau_power_profile():
    w = make_weight("plateau-power", 0.75, 1.0, T1=0.5)
    np.testing.assert_array_equal(w.g(np.array([0.0, 0.25, 0.49])), 1.0)
    np.testing.assert_allclose(w.g(np.array([0.5, 0.8])), np.array([0.5, 0.2]) ** 0.75, rtol=1e-15)
    assert w.breakpoints == (0.5,)
    assert w.c == pytest.approx(0.5 ** -0.75)


@pytest.mark.parametrize("alpha", [0.4, 0.5, 1.0, 1.2])
def test_alpha_outside_range_rejected(alpha):
    with pytest.raises(ValueError, match="alpha"):
        make_weight("pure-power", alpha, 1.0)


def test_bad_inputs_rejected():
    with pytest.raises(ValueError):
        make_weight("plateau-power", 0.75, 1.0, T1=1.5)
    with pytest.raises(ValueError):
        make_weight("plateau-power", 0.75, 1.0, T1=0.0)
    with pytest.raises(ValueError):
        make_weight("pure-power", 0.75, 1.0, G=[[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError):
        make_weight("pure-power", 0.75, 1.0, G=[[1.0, 0.1], [0.0, 1.0]])
    with pytest.raises(ValueError):
        make_weight("exponential", 0.75, 1.0)


def test_gamma_inv_examples():
    w = make_weight("pure-power", 0.75, 1.0, G=1.0)
    np.testing.assert_allclose(w.gamma_inv(0.0), [[1.0]])
    np.testing.assert_allclose(w.gamma_inv(1 - 2.0**-4), [[8.0]], rtol=1e-14)
    with pytest.raises(ValueError):
        w.gamma_inv(1.0)


def test_cached_matrices_are_read_only():
    w = make_weight("pure-power", 0.75, 1.0, G=[[2.0, 0.5], [0.5, 1.0]])
    np.testing.assert_allclose(w.G @ w.G_inv, np.eye(2), atol=1e-15)
    with pytest.raises(ValueError):
        w.G[0, 0] = 5.0


def test_closed_form_integrals():
    w = make_weight("plateau-power", 0.75, 1.0, T1=0.5)
    assert w.g_inv_integral(0.0, 1.0) == pytest.approx(0.5 + 4 * 0.5**0.25, rel=1e-14)
    assert w.g_integral_remaining(0.0, 1.0) == pytest.approx(0.5 + 0.5**1.75 / 1.75, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(0.51, 0.99), T1=st.floats(0.05, 1.0), seed=st.integers(0, 10**6))
def test_weight_properties(alpha, T1, seed):
    T = 1.0
    w = make_weight("plateau-power", alpha, T, G=[[1.5, 0.2], [0.2, 0.7]], T1=T1)
    t = np.sort(np.random.default_rng(seed).uniform(0, T, 1000))
    t = t[t < T]
    g, gi = w.g(t), w.g_inv(t)
    np.testing.assert_allclose(g * gi, 1.0, rtol=1e-14)
    # certificate bounds
    assert np.all(g <= w.c * (T - t) ** alpha * (1 + 1e-12))
    assert np.all(gi <= w.c * (1 + (T - t) ** -alpha) * (1 + 1e-12))
    # monotone decay on the power segment
    seg = g[t >= T - T1]
    assert np.all(np.diff(seg) <= 1e-15)
    # gamma_inv symmetric positive definite
    eig = np.linalg.eigvalsh(w.gamma_inv(t[::50]))
    assert np.all(eig > 0)

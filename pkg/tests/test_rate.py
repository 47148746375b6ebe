import numpy as np
import pytest
from hypothesis import given, strategies as st

from mixsgd.noise import long_run_covariance, make_model
from mixsgd.objectives import Gain, ObjectiveSpec, cost, grad
from mixsgd.rate import (action, euler_action, gaussian_q, h_integral, held_path_action, legendre,
                         legendre_numerical, mean_flow_drift, mean_flow_path)


def spec1():
    return ObjectiveSpec([[2.0]], [0.0])


def test_h_integral_examples():
    assert h_integral([[3.0]], np.zeros(8), 1.0) == 0.0
    assert h_integral([[3.0]], np.full(8, 2.0), 1.0) == pytest.approx(12.0)
    with pytest.raises(ValueError, match="semidefinite"):
        h_integral([[-1.0]], np.ones(3), 1.0)


def test_h_integral_piecewise_exact():
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    a = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, -1.0]])
    want = sum(r @ Q @ r for r in a) * (1.5 / 3)
    assert h_integral(Q, a, 1.5) == pytest.approx(want)


def test_iid_specialisation_matches_r0():
    spec = ObjectiveSpec(np.eye(2) * 2, [0, 0], gain=Gain("matrix", matrix=[[1.0, 0.3], [0.0, 2.0]]))
    m = make_model("iid-gaussian", covariance=[[1.0, 0.2], [0.2, 0.5]])
    a = np.random.default_rng(0).standard_normal((16, 2))
    assert h_integral(gaussian_q(spec, m), a, 2.0) == h_integral(gaussian_q(spec, m, m.R0), a, 2.0)


def test_gaussian_q_uses_long_run_covariance():
    m = make_model("var1", A=[[0.5]], innovation_covariance=[[0.75]])
    spec = ObjectiveSpec([[2.0]], [0.0], gain=Gain(sigma=2.0))
    assert gaussian_q(spec, m)[0, 0] == pytest.approx(4 * 3.0)
    assert long_run_covariance(m)[0, 0] == pytest.approx(3.0)


def test_legendre_examples():
    assert legendre([[3.0]], [1.5], [1.5]) == 0.0
    assert legendre([[3.0]], [6.0], [0.0]) == pytest.approx(3.0)
    grid = np.linspace(-10, 10, 2_000_001)
    assert legendre_numerical([[3.0]], [6.0], [0.0], grid=grid) == pytest.approx(3.0, abs=1e-6)
    assert legendre([[3.0]], [6.0], [0.0], s=np.log(2)) == pytest.approx(1.5)


def test_legendre_singular_names_directions():
    with pytest.raises(ValueError, match="degenerate directions"):
        legendre([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0], [0.0, 0.0])


@given(st.integers(0, 10 ** 6))
def test_legendre_closed_form_matches_supremum(seed):
    rng = np.random.default_rng(seed)
    p = int(rng.integers(1, 4))
    M = rng.standard_normal((p, p))
    Q = M @ M.T + 0.1 * np.eye(p)
    beta, drift = rng.standard_normal(p), rng.standard_normal(p)
    s = float(rng.uniform(0, 2))
    assert legendre(Q, beta, drift, s) == pytest.approx(legendre_numerical(Q, beta, drift, s), abs=1e-6)


def test_drift_modes():
    spec = ObjectiveSpec([[2.0, 0.0], [0.0, 3.0]], [1.0, 0.0])
    psi = np.array([0.5, -1.0])
    assert np.allclose(mean_flow_drift(spec, psi), -grad(spec, spec.theta_star + psi))
    lit = mean_flow_drift(spec, psi, "literal")
    assert np.allclose(lit, cost(spec, spec.theta_star + psi))
    with pytest.raises(ValueError):
        mean_flow_drift(spec, psi, "other")


def test_action_mean_flow_is_zero():
    spec = spec1()
    zero = np.zeros(33)
    assert action(zero, 2.0, [[1.0]], spec) == 0.0
    path = mean_flow_path(spec, [0.4], 2.0, 200)
    assert euler_action(path, 2.0, [[1.0]], spec) <= 1e-28
    # quadrature of the Euler polygon converges to zero under refinement
    s1 = action(mean_flow_path(spec, [0.4], 2.0, 100), 2.0, [[1.0]], spec)
    s2 = action(mean_flow_path(spec, [0.4], 2.0, 200), 2.0, [[1.0]], spec)
    assert 0 < s2 < s1 / 3


def test_action_exact_flow_converges_to_zero():
    spec = spec1()
    T = 2.0
    vals = []
    for m in (100, 200, 400):
        u = np.linspace(0, T, m + 1)
        vals.append(action(0.4 * np.exp(-2 * u), T, [[1.0]], spec))
    assert vals[2] < vals[1] < vals[0] < 1e-5


@pytest.mark.parametrize("psi", [0.3, -0.7])
def test_held_path_closed_form(psi):
    T, q = 2.0, 1.5
    want = held_path_action(2.0, q, psi, T)
    for m in (16, 32, 64):
        got = action(np.full(m + 1, psi), T, [[q]], spec1())
        assert got == pytest.approx(want, rel=1e-12)
    assert want > 0


def test_action_refinement_stable():
    spec = spec1()
    T = 1.0
    u = np.linspace(0, T, 65)
    path = 0.2 * np.sin(3 * u)
    fine = np.linspace(0, T, 129)
    s1 = action(path, T, [[1.0]], spec)
    s2 = action(np.interp(fine, u, path), T, [[1.0]], spec)
    assert abs(s2 - s1) <= 1e-4 * s1


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=12))
def test_action_nonnegative(pts):
    assert action(np.array(pts), 1.0, [[0.7]], spec1()) >= 0

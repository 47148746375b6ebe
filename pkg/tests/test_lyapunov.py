import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixsgd.finite_sample import constants_for
from mixsgd.lyapunov import (LyapunovContext, Property1Monitor, TailSums, check_property1,
                             decomposition_terms, estimate_drift, lemma_bound, lemma_bound_shifted, v, v1,
                             v1_detail)
from mixsgd.noise import make_model
from mixsgd.objectives import Gain, ObjectiveSpec, noisy_grad
from mixsgd.optimizer import ProjectionSet, RunConfig, run, simulate_ensemble


def spec1(**kw):
    return ObjectiveSpec([[2.0]], [0.0], **kw)


def var1_1d(rho=0.5):
    return make_model("var1", A=[[rho]], innovation_covariance=[[1 - rho * rho]])


def cfg2d(R=200, n_max=2000, seed=1, gain=None):
    obj = ObjectiveSpec([[2.5, 0.5], [0.5, 2.5]], [0.5, -0.3], K_D=0.05, alpha=1.0,
                        gain=gain or Gain())
    return RunConfig(obj, make_model("var1", A=0.5 * np.eye(2), innovation_covariance=0.75 * np.eye(2)),
                     ProjectionSet("box", 2.0), n_max, [1.5, 1.0], seed=seed, replications=R)


def test_v_examples():
    assert v(np.zeros(2)) == 0.0
    assert v(np.array([1.0, 1.0])) == 1.0
    x = np.array([0.3, -2.0, 1.1])
    assert v(2 * x) == pytest.approx(4 * v(x))


def test_v1_iid_and_zero_state():
    iid = make_model("iid-gaussian", covariance=[[1.0]])
    assert v1(spec1(), iid, [1.0], [1.0], 10) == 0.0
    assert v1(spec1(), var1_1d(), [1.0], [0.0], 10) == 0.0


def test_v1_example_series_oracle():
    # -sum_{k>=10} (1/k) 0.5^(k-9) = -2^9 (ln 2 - sum_{k=1}^{9} 0.5^k / k)
    want = -(2 ** 9) * (math.log(2) - sum(0.5 ** k / k for k in range(1, 10)))
    got = v1_detail(spec1(), var1_1d(), [1.0], [1.0], 10)
    assert got.value == pytest.approx(want, rel=1e-11)
    assert got.truncation_bound < 1e-12


@given(st.integers(1, 300), st.floats(-0.9, 0.9), st.floats(-3, 3), st.floats(-3, 3))
def test_v1_matches_brute_force_sum(n, rho, e, x):
    m = make_model("var1", A=[[rho]], innovation_covariance=[[1.0]])
    brute = -sum((1.0 / k) * rho ** (k - n + 1) for k in range(n, n + 2000)) * e * x
    assert v1(spec1(), m, [e], [x], n) == pytest.approx(brute, rel=1e-9, abs=1e-13)


def test_v1_matrix_case_brute_force(rng):
    A = np.array([[0.4, 0.3], [-0.2, 0.5]])
    m = make_model("var1", A=A, innovation_covariance=np.eye(2))
    spec = ObjectiveSpec(np.eye(2) * 2, [0.1, 0.2], gain=Gain("matrix", matrix=[[1.0, 0.2], [0.0, 0.7]]))
    th, x = rng.standard_normal(2), rng.standard_normal(2)
    n = 7
    s = sum((1.0 / k) * np.linalg.matrix_power(A, k - n + 1) for k in range(n, n + 400))
    want = -(th - spec.theta_star) @ spec.gain.matrix @ (s @ x)
    assert v1(spec, m, th, x, n) == pytest.approx(want, rel=1e-10)


def test_tail_sums_validation():
    ma = make_model("ma-q", innovation_covariance=[[1.0]], ma_coefficients=[[[0.5]]])
    with pytest.raises(ValueError, match="ma-q"):
        TailSums(ma, lambda k: 1.0 / k)
    with pytest.raises(ValueError):
        TailSums(var1_1d(), lambda k: 1.0 / k, tail_tol=0)


def test_property1_iid_zero():
    c = RunConfig(spec1(), make_model("iid-gaussian", covariance=[[1.0]]), ProjectionSet("box", 10), 300, [1.0])
    r = check_property1(run(c), 1, LyapunovContext.from_config(c))
    assert r.violations == 0 and r.worst_ratio == 0.0 and r.checked == 300


def test_property1_var1_trajectory_and_regime_flag():
    c = cfg2d(R=1, n_max=3000)
    const = constants_for(c)
    ctx = LyapunovContext.from_config(c)
    r = check_property1(run(c), const.kappa2, ctx, n_min=1)
    assert r.ok and r.checked == 3000 - const.kappa2 + 1
    assert r.out_of_regime_checked == const.kappa2 - 1
    assert r.worst_ratio <= 1.0


def test_property1_monitor_matches_stored_check():
    c = cfg2d(R=3, n_max=1500)
    ctx = LyapunovContext.from_config(c)
    ens = simulate_ensemble(c, [], [Property1Monitor(3)])
    m = ens.monitors["property1"]
    for i in range(3):
        r = check_property1(run(c, i), 3, ctx)
        assert m["checked"][i] == r.checked
        assert m["worst_ratio"][i] == pytest.approx(r.worst_ratio, rel=1e-12)
        assert m["nominal_violations"][i] == r.nominal_violations
        assert m["violations"][i] == r.violations == 0


def _iid_ctx(sigma=1.0):
    c = RunConfig(spec1(gain=Gain(sigma=sigma)), make_model("iid-gaussian", covariance=[[1.0]]),
                  ProjectionSet("box", 50.0), 100, [3.0], replications=1)
    return c, LyapunovContext(c.objective, c.noise, c.c0)


def test_exact_drift_iid_closed_form():
    c, ctx = _iid_ctx(sigma=1.3)
    n = 40
    e = np.array([[5.0], [-2.0], [0.0]])
    t = ctx.terms(e, np.zeros_like(e), n)
    eps = 1.0 / (n + 1)
    want = 0.5 * ((1 - 2 * eps) ** 2 - 1) * e[:, 0] ** 2 + 0.5 * eps ** 2 * 1.3 ** 2
    assert np.allclose(t["drift"], want, rtol=1e-13, atol=1e-16)
    assert np.all(t["v1"] == 0)
    # far from theta*, the drift is strongly negative and close to -2 eps V
    assert t["drift"][0] < 0
    assert t["drift"][0] == pytest.approx(-2 * 2 * eps * t["v"][0], rel=0.05)


def test_quadrature_conditional_expectation_exact(rng):
    c = cfg2d()
    ctx = LyapunovContext(c.objective, c.noise, c.c0)
    th = rng.uniform(-1, 1, (4, 2))
    xp = rng.standard_normal((4, 2))
    n = 25
    t = ctx.terms(th, xp, n)
    eps = 1.0 / (n + 1)
    m = xp @ c.noise.A.T
    mean_next = th - eps * noisy_grad(c.objective, th, m)
    e = mean_next - c.objective.theta_star
    want = 0.5 * np.sum(e * e, axis=1) + 0.5 * eps ** 2 * np.trace(c.noise.innovation_covariance)
    assert np.allclose(t["cond_v"], want, rtol=1e-12)


def test_drift_zero_at_fixed_point():
    c = RunConfig(ObjectiveSpec([[2.5, 0.5], [0.5, 2.5]], [0.5, -0.3]),
                  make_model("iid-gaussian", covariance=np.zeros((2, 2))),
                  ProjectionSet("box", 2.0), 200, [0.5, -0.3], replications=3)
    ens = simulate_ensemble(c, [50, 100])
    for mode in ("sample", "exact"):
        d = estimate_drift(ens, 100, 1.5, mode=mode)
        assert d.drift == 0.0 and d.excess == 0.0 and d.kbar_hat == 0.0
    with pytest.raises(ValueError):
        estimate_drift(ens, 100, 1.5, mode="other")


def test_sample_drift_averages_to_exact_drift():
    c = cfg2d(R=4000, n_max=60)
    ens = simulate_ensemble(c, [20, 50])
    ctx = LyapunovContext.from_config(c)
    for n in (20, 50):
        th, nx, x, xp = ens.state_at(n)
        t = ctx.terms(th, xp, n, x, nx)
        diff = t["sample_drift"] - t["drift"]
        assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(diff.size)


def test_kbar_finite_across_scales():
    c = cfg2d(R=400, n_max=400, seed=3)
    ens = simulate_ensemble(c, [25, 50, 100, 200, 400])
    kb = [estimate_drift(ens, n, 1.5, mode="exact").excess * n * n for n in (25, 50, 100, 200, 400)]
    assert max(kb) < 10.0


def test_decomposition_iid_all_zero():
    c, ctx = _iid_ctx()
    ens = simulate_ensemble(RunConfig(c.objective, c.noise, c.projection, 100, [3.0], replications=5), [50])
    t = decomposition_terms(ens, 50, ctx)
    for k in ("t1a", "t1b", "t2", "cross"):
        assert np.all(t[k] == 0)


@pytest.mark.parametrize("gain", [Gain(), Gain("state", cap=1.0)])
def test_cancellation_and_scaling(gain, rng):
    c = cfg2d(gain=gain)
    ctx = LyapunovContext.from_config(c)
    th = rng.uniform(-1.5, 1.5, (50, 2))
    xp = rng.standard_normal((50, 2))
    small = {}
    for n in (200, 400, 800):
        t = decomposition_terms_state(ctx, th, xp, n)
        assert np.max(np.abs(t["t2"] + t["cross"])) <= 1e-12
        assert np.all(np.abs(t["t1a"]) <= t["t1a_bound"] * (1 + 1e-9))
        assert np.all(np.abs(t["t1b"]) <= t["t1b_bound"] * (1 + 1e-9) + 1e-300)
        small[n] = np.abs(t["t1a"]) + np.abs(t["t1b"])
    for a, b in ((200, 400), (400, 800)):
        ratio = small[a].sum() / small[b].sum()
        assert 3.0 < ratio < 5.0


def decomposition_terms_state(ctx, th, xp, n):
    return ctx.terms(th, xp, n)


def test_lemma_examples():
    r = lemma_bound(2, 1, 1, 1000)
    assert r.c == 1.0 and r.holds
    assert lemma_bound(1.5, 3, 0, 10 ** 6).c == pytest.approx(6.0)
    assert lemma_bound(1.5, 3, 0, 10 ** 6).holds
    r = lemma_bound(1.01, 1, 0, 10 ** 5)
    assert r.c == pytest.approx(100.0) and r.holds
    with pytest.raises(ValueError):
        lemma_bound(1.0, 1, 0, 10)


def test_lemma_counterexample_is_reported():
    # 1 - a/n < 0 for n < a breaks the induction: x_2 = b = 1 > c/2 = 1/2
    r = lemma_bound(2, 1, 0, 100)
    assert not r.holds and r.worst_n == 2 and r.worst_ratio == pytest.approx(2.0)


@settings(max_examples=40)
@given(st.floats(1.01, 5), st.floats(0.1, 10), st.floats(0, 10))
def test_shifted_lemma_never_violated(a, b, x1):
    assert lemma_bound_shifted(a, b, x1, 20_000).holds


@settings(max_examples=40)
@given(st.floats(1.01, 1.5), st.floats(0.1, 10), st.floats(0, 10))
def test_lemma_holds_for_small_a(a, b, x1):
    # with a <= 3/2 the single negative step at n = 1 stays below c/2
    assert lemma_bound(a, b, x1, 20_000).holds

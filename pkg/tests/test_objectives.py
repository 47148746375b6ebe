import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mixsgd.noise import make_model, sample_path
from mixsgd.objectives import Gain, ObjectiveSpec, cost, grad, lipschitz_bound, noisy_grad


def one_d(K_D=0.0, alpha=1.0, **kw):
    return ObjectiveSpec([[2.0]], [0.0], K_D=K_D, alpha=alpha, **kw)


def two_d():
    return ObjectiveSpec([[2.5, 0.5], [0.5, 2.5]], [0.5, -0.3], K_D=0.05, alpha=1.0)


def test_cost_examples():
    assert cost(two_d(), [0.5, -0.3]) == 0.0
    assert cost(one_d(), [3.0]) == pytest.approx(9.0)
    assert cost(one_d(K_D=1.0), [1.0]) == pytest.approx(1 + 1 / 3)


def test_grad_examples():
    assert np.all(grad(two_d(), [0.5, -0.3]) == 0)
    assert grad(one_d(K_D=1.0), [2.0])[0] == pytest.approx(8.0)


def test_perturbation_gradient_norm_is_exact():
    spec = ObjectiveSpec(np.eye(3), np.zeros(3), K_D=0.7, alpha=0.5)
    e = np.array([0.3, -1.2, 2.0])
    gD = grad(spec, e) - e
    assert np.linalg.norm(gD) == pytest.approx(0.7 * np.linalg.norm(e) ** 1.5)


@given(arrays(float, 2, elements=st.floats(-2, 2)))
def test_gradient_matches_finite_differences(theta):
    spec = two_d()
    h = 1e-5
    fd = np.array([(cost(spec, theta + h * u) - cost(spec, theta - h * u)) / (2 * h) for u in np.eye(2)])
    g = grad(spec, theta)
    assert np.linalg.norm(fd - g) <= 1e-5 * max(1.0, np.linalg.norm(g))


def test_noisy_grad_examples():
    spec = two_d()
    th = np.array([1.0, 0.2])
    assert np.array_equal(noisy_grad(spec, th, np.zeros(2)), grad(spec, th))
    assert noisy_grad(one_d(), [0.0], [2.0])[0] == 2.0


def test_noisy_grad_mean_is_grad():
    spec = two_d()
    m = make_model("var1", A=0.5 * np.eye(2), innovation_covariance=0.75 * np.eye(2))
    x = sample_path(m, 100_000, 1)
    th = np.array([1.0, 0.0])
    ng = noisy_grad(spec, np.broadcast_to(th, x.shape), x)
    # batch means absorb the serial correlation
    bm = ng.reshape(100, -1, 2).mean(axis=1)
    se = bm.std(axis=0, ddof=1) / 10
    assert np.all(np.abs(ng.mean(axis=0) - grad(spec, th)) <= 3 * se)


def test_validation_names_assumptions():
    with pytest.raises(ValueError, match="A4"):
        ObjectiveSpec([[1.0, 2.0], [0.0, 1.0]], [0, 0])
    with pytest.raises(ValueError, match="A4"):
        ObjectiveSpec([[1.0, 0.0], [0.0, -1.0]], [0, 0])
    with pytest.raises(ValueError, match="A5"):
        ObjectiveSpec([[2.0]], [0.0], gain=Gain(sigma=0.0))
    with pytest.raises(ValueError):
        ObjectiveSpec([[2.0]], [0.0, 1.0])


def test_gains():
    g = Gain("state", cap=2.0)
    assert g.scale(np.array([3.0, 4.0])) == pytest.approx(3.0)
    assert g.lipschitz == 1.0 and g.sup_norm == 3.0
    M = np.array([[1.0, 0.5], [0.0, 2.0]])
    spec = ObjectiveSpec(np.eye(2) * 3, [0, 0], gain=Gain("matrix", matrix=M))
    x = np.array([1.0, -1.0])
    assert np.allclose(noisy_grad(spec, np.zeros(2), x), M @ x)
    with pytest.raises(ValueError):
        Gain("random")


@given(arrays(float, 2, elements=st.floats(-1, 1)), arrays(float, 2, elements=st.floats(-1, 1)))
def test_convex_on_feasible_set(a, b):
    spec = two_d()
    assert spec.convex_on(2 * 2 * np.sqrt(2))
    mid = cost(spec, (a + b) / 2)
    assert mid <= (cost(spec, a) + cost(spec, b)) / 2 + 1e-12


def test_a3_positivity(rng):
    spec = two_d()
    th = rng.uniform(-2, 2, size=(10_000, 2))
    e = th - spec.theta_star
    assert np.all(np.sum(e * grad(spec, th), axis=1) > 0)


@given(arrays(float, 2, elements=st.floats(-2, 2)), arrays(float, 2, elements=st.floats(-3, 3)))
def test_lipschitz_structure(theta, x):
    for gain in (Gain(), Gain("state", cap=1.5)):
        spec = ObjectiveSpec([[2.5, 0.5], [0.5, 2.5]], [0.5, -0.3], K_D=0.05, alpha=1.0, gain=gain)
        lhs = np.linalg.norm(noisy_grad(spec, theta, x) - noisy_grad(spec, np.zeros(2), x))
        assert lhs <= lipschitz_bound(spec, theta, x) * np.linalg.norm(theta) + 1e-12

import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mixsgd.finite_sample import exact_mse_oracle, mse_curve
from mixsgd.noise import make_model
from mixsgd.objectives import ObjectiveSpec, grad
from mixsgd.optimizer import (ConfigError, Ensemble, ProjectionSet, RunConfig, default_projection,
                              project, run, run_ensemble, simulate_ensemble, step_size)


def cfg1d(sigma2=1.0, theta0=1.0, radius=10.0, n_max=50, R=1, seed=0, B=2.0, c0=1.0):
    return RunConfig(ObjectiveSpec([[B]], [0.0]), make_model("iid-gaussian", covariance=[[sigma2]]),
                     ProjectionSet("box", radius), n_max, [theta0], c0=c0, seed=seed, replications=R)


def cfg2d(n_max=300, R=20, seed=5):
    return RunConfig(ObjectiveSpec([[2.5, 0.5], [0.5, 2.5]], [0.5, -0.3], K_D=0.05, alpha=1.0),
                     make_model("var1", A=0.5 * np.eye(2), innovation_covariance=0.75 * np.eye(2)),
                     ProjectionSet("box", 2.0), n_max, [1.5, 1.0], seed=seed, replications=R)


@pytest.mark.parametrize("k,c0,want", [(0, 1, 1.0), (9, 1, 0.1), (1, 2, 1.0)])
def test_step_size(k, c0, want):
    assert step_size(k, c0) == pytest.approx(want)


def test_project_examples():
    assert np.allclose(project(ProjectionSet("box", 1), [2, 0.5]), [1, 0.5])
    assert np.allclose(project(ProjectionSet("ball", 1), [3, 4]), [0.6, 0.8])
    x = np.array([0.2, -0.3])
    for s in (ProjectionSet("box", 1), ProjectionSet("ball", 1)):
        assert np.array_equal(project(s, x), x)


@given(arrays(float, 3, elements=st.floats(-5, 5)), arrays(float, 3, elements=st.floats(-5, 5)),
       st.sampled_from(["box", "ball"]))
def test_projection_nonexpansive_and_idempotent(x, y, kind):
    s = ProjectionSet(kind, 1.3)
    px, py = s.project(x), s.project(y)
    assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-12
    assert np.allclose(s.project(px), px)
    assert s.contains(px)


def test_default_projection():
    s = default_projection(np.array([3.0, 4.0]))
    assert s.kind == "box" and s.radius == 60.0


def test_zero_noise_hand_iterates():
    t = run(cfg1d(sigma2=0.0, theta0=1.0, radius=1.0, n_max=3))
    assert t.iterates[1, 0] == -1.0
    assert t.iterates[2, 0] == 0.0
    assert np.all(t.iterates[2:] == 0.0)


def test_zero_noise_matches_gradient_descent():
    c = cfg2d(R=1)
    c = RunConfig(c.objective, make_model("iid-gaussian", covariance=np.zeros((2, 2))), c.projection,
                  200, c.theta0, seed=1)
    t = run(c)
    th = c.theta0.copy()
    for k in range(200):
        th = c.projection.project(th - grad(c.objective, th) / (k + 1.0))
        assert np.array_equal(t.iterates[k + 1], th)


def test_fixed_point_at_minimiser():
    t = run(cfg1d(sigma2=0.0, theta0=0.0, n_max=20))
    assert np.all(t.iterates == 0.0)


def test_config_validation():
    with pytest.raises(ConfigError, match="A4"):
        cfg1d(B=0.5)
    with pytest.raises(ConfigError, match="A4"):
        cfg1d(B=2.0, c0=0.4)
    spec = ObjectiveSpec([[2.0]], [1.0])
    noise = make_model("iid-gaussian", covariance=[[1.0]])
    with pytest.raises(ConfigError, match="G°"):
        RunConfig(spec, noise, ProjectionSet("box", 1.0), 10, [0.0])
    with pytest.raises(ConfigError, match="theta0"):
        RunConfig(ObjectiveSpec([[2.0]], [0.0]), noise, ProjectionSet("box", 1.0), 10, [3.0])
    with pytest.raises(ConfigError, match="A3"):
        RunConfig(ObjectiveSpec([[2.0]], [0.0], K_D=1.0), noise, ProjectionSet("box", 5.0), 10, [0.0])


def test_feasibility_and_projection_record():
    c = cfg1d(sigma2=25.0, radius=0.5, theta0=0.5, n_max=200)
    t = run(c)
    assert np.all(np.abs(t.iterates) <= 0.5)
    assert len(t.projection_steps) > 0
    assert t.projection_after(0)


def test_trajectory_shapes_and_csv(tmp_path):
    t = run(cfg2d(R=1, n_max=40))
    assert t.iterates.shape == (41, 2) and t.noise.shape == (40, 2)
    assert np.array_equal(t.noise_before(0), t.pre_state)
    assert np.array_equal(t.noise_before(5), t.noise[4])
    t.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,theta_1,theta_2,error_norm_sq" and len(lines) == 42


def _digest(trajs):
    h = hashlib.sha256()
    for t in trajs:
        h.update(t.iterates.tobytes())
    return h.hexdigest()


def test_ensemble_determinism_and_parallel_identity():
    c = cfg2d(R=100, n_max=100)
    a = run_ensemble(c)
    assert _digest(a) == _digest(run_ensemble(c))
    assert _digest(a) == _digest(run_ensemble(c, workers=3))
    assert np.array_equal(a[0].iterates, run(c, 0).iterates)
    assert np.array_equal(a[57].iterates, run(c, 57).iterates)


def test_single_replication_matches_run():
    c = cfg2d(R=1, n_max=60)
    assert np.array_equal(run_ensemble(c)[0].iterates, run(c).iterates)


def test_streamed_ensemble_matches_full_paths():
    c = cfg2d(R=7, n_max=1100)
    steps = [0, 3, 511, 512, 513, 1024, 1100]
    ens = simulate_ensemble(c, steps, workers=2)
    trajs = run_ensemble(c)
    ref = Ensemble.from_trajectories(c, [t for t in trajs], steps=steps[:-1])
    for n in steps[:-1]:
        for a, b in zip(ens.state_at(n), ref.state_at(n)):
            assert np.array_equal(a, b)
        assert np.allclose(ens.cumgap_at(n), ref.cumgap_at(n), rtol=1e-12)
    assert np.array_equal(ens.errors_at(1100), np.stack([t.errors[1100] for t in trajs]))
    with pytest.raises(KeyError):
        ens.state_at(4)


def test_monte_carlo_matches_oracle():
    c = cfg1d(n_max=100, R=4000, seed=11)
    ens = simulate_ensemble(c, [10, 100])
    curve = mse_curve(ens, [10, 100])
    for n, m, se in zip(curve.checkpoints, curve.values, curve.se):
        assert abs(m - exact_mse_oracle(2.0, 1.0, 1.0, 1.0, int(n))) <= 3 * se

"""Gaussian rate functional for the interpolated process near theta*.

H(alpha) = alpha' Q alpha with Q = f0(theta*) Rbar f0(theta*)', the time-dependent
version H1(alpha, s) = e^s H(alpha), its Legendre transform
L(beta, psi, s) = sup_alpha [alpha'(beta - drift(psi)) - H1(alpha, s)], and the
action S(T, psi) = int_0^T L(psi'(u), psi(u), u) du.

Paths are piecewise linear on a uniform grid, so they are absolutely
continuous by construction and the infinite branch of S never arises.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .noise import NoiseModel, long_run_covariance
from .objectives import ObjectiveSpec, cost, grad

DRIFT_MODES = ("gradient", "literal")


def gaussian_q(spec: ObjectiveSpec, model: NoiseModel, covariance=None) -> np.ndarray:
    """Q = f0(theta*) Rbar f0(theta*)'.  ``covariance`` overrides Rbar (e.g. R0)."""
    R = long_run_covariance(model) if covariance is None else np.atleast_2d(np.asarray(covariance, dtype=float))
    F = spec.gain.matrix_at(spec.theta_star)
    Q = F @ R @ F.T
    return 0.5 * (Q + Q.T)


def _check_psd(Q, tol=1e-12):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[0] != Q.shape[1]:
        raise ValueError("Q must be square")
    scale = max(1.0, float(np.abs(Q).max()))
    if not np.allclose(Q, Q.T, rtol=0, atol=tol * scale):
        raise ValueError("Q must be symmetric")
    if np.linalg.eigvalsh(Q).min() < -tol * scale:
        raise ValueError("Q must be positive semidefinite")
    return Q


def h_integral(Q, alpha_path, T: float) -> float:
    """Exact integral of alpha(s)' Q alpha(s) over [0, T] for alpha constant on a uniform grid.

    ``alpha_path`` has shape (m, p) (or (m,) when p = 1): the value on each of
    the m cells of width T/m.
    """
    Q = _check_psd(Q)
    a = np.asarray(alpha_path, dtype=float)
    if a.ndim == 1:
        a = a[:, None] if Q.shape[0] == 1 else a[None, :]
    if a.shape[1] != Q.shape[0]:
        raise ValueError("alpha path and Q dimensions disagree")
    vals = np.einsum("mi,ij,mj->m", a, Q, a)
    return float(vals.sum() * (T / a.shape[0]))


def mean_flow_drift(spec: ObjectiveSpec, psi, mode: str = "gradient"):
    """Velocity of the mean ODE at theta* + psi.

    ``gradient`` gives -grad C(theta* + psi).  ``literal`` gives C(theta* + psi)
    broadcast to every coordinate, the form written with the cost itself.
    """
    theta = spec.theta_star + np.asarray(psi, dtype=float)
    if mode == "gradient":
        return -grad(spec, theta)
    if mode == "literal":
        c = np.asarray(cost(spec, theta))
        return np.broadcast_to(c[..., None], theta.shape).copy()
    raise ValueError(f"unknown drift mode {mode!r}")


def legendre(Q, beta, drift, s: float = 0.0) -> float:
    """Closed form e^{-s} (beta - drift)' Q^{-1} (beta - drift) / 4."""
    Q = _check_psd(Q)
    w, U = np.linalg.eigh(Q)
    tol = 1e-12 * max(1.0, float(np.abs(w).max()))
    if w.min() <= tol:
        bad = U[:, w <= tol].T
        raise ValueError(f"Q is singular; degenerate directions: {np.round(bad, 12).tolist()}")
    d = np.atleast_1d(np.asarray(beta, dtype=float) - np.asarray(drift, dtype=float))
    z = U.T @ d
    return float(np.exp(-s) * np.sum(z * z / w) / 4.0)


def legendre_numerical(Q, beta, drift, s: float = 0.0, grid=None) -> float:
    """sup over alpha of alpha'(beta - drift) - e^s alpha'Q alpha, computed numerically.

    With ``grid`` (1-D array) and p = 1 the supremum is taken over the grid;
    otherwise a BFGS search from alpha = 0 is used.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    d = np.atleast_1d(np.asarray(beta, dtype=float) - np.asarray(drift, dtype=float))
    es = np.exp(s)
    if grid is not None:
        if Q.shape[0] != 1:
            raise ValueError("grid search is 1-D only")
        a = np.asarray(grid, dtype=float)
        return float(np.max(a * d[0] - es * Q[0, 0] * a * a))

    def f(a):
        return -(a @ d - es * a @ Q @ a), -(d - 2.0 * es * Q @ a)

    res = minimize(f, np.zeros_like(d), jac=True, method="BFGS", options={"gtol": 1e-12})
    return float(-res.fun)


def action(psi_path, T: float, Q, spec: ObjectiveSpec, drift_mode: str = "gradient",
           nodes: int = 5) -> float:
    """S(T, psi) for a piecewise-linear path given at m+1 uniform grid points on [0, T].

    Each segment uses its exact slope as psi'; the integrand is integrated with
    Gauss-Legendre quadrature on every segment.
    """
    psi = np.asarray(psi_path, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    m = psi.shape[0] - 1
    if m < 1:
        raise ValueError("path needs at least two grid points")
    h = T / m
    x, w = np.polynomial.legendre.leggauss(nodes)
    total = 0.0
    for i in range(m):
        slope = (psi[i + 1] - psi[i]) / h
        for xj, wj in zip(x, w):
            frac = 0.5 * (xj + 1.0)
            u = (i + frac) * h
            pt = psi[i] + frac * (psi[i + 1] - psi[i])
            total += 0.5 * h * wj * legendre(Q, slope, mean_flow_drift(spec, pt, drift_mode), u)
    return total


def mean_flow_path(spec: ObjectiveSpec, psi0, T: float, m: int, drift_mode: str = "gradient"):
    """Polygon whose segment slopes equal the drift at the segment start (explicit Euler)."""
    h = T / m
    out = [np.atleast_1d(np.asarray(psi0, dtype=float))]
    for _ in range(m):
        out.append(out[-1] + h * mean_flow_drift(spec, out[-1], drift_mode))
    return np.array(out)


def euler_action(psi_path, T: float, Q, spec: ObjectiveSpec, drift_mode: str = "gradient") -> float:
    """Left-point rule with the drift frozen at each segment start; zero exactly on mean_flow_path."""
    psi = np.asarray(psi_path, dtype=float)
    if psi.ndim == 1:
        psi = psi[:, None]
    m = psi.shape[0] - 1
    h = T / m
    total = 0.0
    for i in range(m):
        slope = (psi[i + 1] - psi[i]) / h
        # segment-integrated e^{-u} is exact
        ew = np.exp(-i * h) - np.exp(-(i + 1) * h)
        total += ew * legendre(Q, slope, mean_flow_drift(spec, psi[i], drift_mode), 0.0)
    return total


def held_path_action(b: float, q: float, psi: float, T: float) -> float:
    """Closed form of S for the 1-D quadratic cost held at psi: (b psi)^2 (1 - e^{-T}) / (4 q)."""
    return (b * psi) ** 2 * (1.0 - np.exp(-T)) / (4.0 * q)


@dataclass
class RateReport:
    Q: np.ndarray
    h_values: dict = field(default_factory=dict)
    l_values: dict = field(default_factory=dict)
    actions: dict = field(default_factory=dict)
    h0_hat: Optional[float] = None
    h1_hat: Optional[float] = None

    def as_dict(self):
        return {
            "Q": np.asarray(self.Q).tolist(),
            "h_integral": self.h_values,
            "legendre": self.l_values,
            "actions": self.actions,
            "h0_hat": self.h0_hat,
            "h1_hat": self.h1_hat,
        }

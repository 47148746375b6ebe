"""Stationary mixing noise: i.i.d. Gaussian, VAR(1) and vector MA(q) sequences.

All three families are zero-mean Gaussian (optionally clamped componentwise)
with closed-form autocovariances, so the long-run covariance and the
conditional means that feed the perturbed Lyapunov function are exact.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from ._linalg import matvec, psd_sqrt, spectral_radius

KINDS = ("iid-gaussian", "var1", "ma-q")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MixingRate:
    """Bound sequence psi_k = scale * rate**k, zero past ``support`` when that is set."""

    scale: float
    rate: float
    support: Optional[int] = None

    def __post_init__(self):
        if self.scale < 0 or self.rate < 0:
            raise ValueError("mixing rate parameters must be nonnegative")

    @property
    def summable(self) -> bool:
        return self.support is not None or self.rate < 1.0 or self.scale == 0.0

    def __call__(self, k):
        k = np.asarray(k)
        out = self.scale * np.power(self.rate, k, dtype=float)
        if self.support is not None:
            out = np.where(k > self.support, 0.0, out)
        return out if out.ndim else float(out)

    def tail(self, n: int) -> float:
        """Sum of psi_k over k >= n."""
        n = max(int(n), 0)
        if self.scale == 0.0:
            return 0.0
        if self.support is not None:
            if n > self.support:
                return 0.0
            return float(np.sum(self(np.arange(n, self.support + 1))))
        if self.rate >= 1.0:
            return float("inf")
        if self.rate == 0.0:
            return self.scale if n == 0 else 0.0
        return self.scale * self.rate ** n / (1.0 - self.rate)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    kind: str
    p: int
    innovation_covariance: np.ndarray
    A: Optional[np.ndarray] = None
    ma_coefficients: tuple = ()
    truncation: Optional[float] = None
    # derived, filled in by make_model
    R0: np.ndarray = field(default=None, repr=False)
    _innov_sqrt: np.ndarray = field(default=None, repr=False)
    _state_sqrt: np.ndarray = field(default=None, repr=False)

    @property
    def truncated(self) -> bool:
        return self.truncation is not None

    @property
    def rho(self) -> float:
        return spectral_radius(self.A) if self.kind == "var1" else 0.0


def make_model(kind: str, params: dict = None, **kw) -> NoiseModel:
    """Build and validate a noise model.

    ``params`` (or keyword arguments) may hold ``covariance`` /
    ``innovation_covariance``, ``A`` (var1), ``ma_coefficients`` (ma-q) and
    ``truncation``.  For ``iid-gaussian`` the covariance is that of X itself.
    """
    params = {**(params or {}), **kw}
    if kind not in KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {KINDS}")
    allowed = {"covariance", "innovation_covariance", "A", "ma_coefficients", "truncation"}
    unknown = set(params) - allowed
    if unknown:
        raise ValueError(f"unknown noise parameters: {sorted(unknown)}")
    cov = params.get("innovation_covariance", params.get("covariance"))
    if cov is None:
        raise ValueError("noise model needs an innovation covariance")
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    S_w = psd_sqrt(cov, "innovation covariance")
    p = cov.shape[0]
    trunc = params.get("truncation")
    if trunc is not None:
        trunc = float(trunc)
        if not trunc > 0:
            raise ValueError("truncation bound must be positive")

    A = None
    ma = ()
    if kind == "iid-gaussian":
        R0 = cov
    elif kind == "var1":
        if params.get("A") is None:
            raise ValueError("var1 noise needs a coefficient matrix A")
        A = np.atleast_2d(np.asarray(params["A"], dtype=float))
        if A.shape != (p, p):
            raise ValueError(f"A has shape {A.shape}, expected {(p, p)}")
        rho = spectral_radius(A)
        if rho >= 1.0:
            raise ValueError(f"var1 requires spectral radius of A < 1, got {rho:.6g}")
        R0 = scipy.linalg.solve_discrete_lyapunov(A, cov)
        R0 = 0.5 * (R0 + R0.T)
    else:
        coefs = params.get("ma_coefficients")
        if not coefs:
            raise ValueError("ma-q noise needs at least one MA coefficient matrix")
        ma = tuple(_frozen(np.atleast_2d(c)) for c in coefs)
        for c in ma:
            if c.shape != (p, p):
                raise ValueError(f"MA coefficient has shape {c.shape}, expected {(p, p)}")
        thetas = (np.eye(p),) + ma
        R0 = sum(t @ cov @ t.T for t in thetas)

    return NoiseModel(
        kind=kind,
        p=p,
        innovation_covariance=_frozen(cov),
        A=None if A is None else _frozen(A),
        ma_coefficients=ma,
        truncation=trunc,
        R0=_frozen(R0),
        _innov_sqrt=_frozen(S_w),
        _state_sqrt=_frozen(psd_sqrt(R0, "stationary covariance")),
    )


def _ma_thetas(model):
    return (np.eye(model.p),) + tuple(model.ma_coefficients)


def autocovariance(model: NoiseModel, j: int) -> np.ndarray:
    """Analytic R_j = E X_j X_0'."""
    if j < 0:
        raise ValueError("lag must be nonnegative")
    if j == 0:
        return np.array(model.R0)
    if model.kind == "iid-gaussian":
        return np.zeros((model.p, model.p))
    if model.kind == "var1":
        return np.linalg.matrix_power(model.A, j) @ model.R0
    th = _ma_thetas(model)
    S = model.innovation_covariance
    out = np.zeros((model.p, model.p))
    for i in range(len(th) - j):
        out += th[i + j] @ S @ th[i].T
    return out


def long_run_covariance(model: NoiseModel) -> np.ndarray:
    """R0 + sum_{j>=1} (R_j + R_j'), in closed form."""
    R0 = model.R0
    if model.kind == "iid-gaussian":
        return np.array(R0)
    if model.kind == "var1":
        A = model.A
        I = np.eye(model.p)
        F = A @ np.linalg.solve(I - A, R0)
        return R0 + F + F.T
    out = np.array(R0)
    for j in range(1, len(model.ma_coefficients) + 1):
        Rj = autocovariance(model, j)
        out += Rj + Rj.T
    return out


def long_run_partial_sum(model: NoiseModel, J: int) -> np.ndarray:
    """Truncated R0 + sum_{j=1}^{J} (R_j + R_j')."""
    out = np.array(model.R0)
    for j in range(1, J + 1):
        Rj = autocovariance(model, j)
        out += Rj + Rj.T
    return out


def _transient_constant(A, rho, horizon=4000):
    # sup_m ||A^m|| / rho^m; equals 1 for normal A
    K = 1.0
    P = np.eye(A.shape[0])
    for m in range(1, horizon + 1):
        P = P @ A
        K = max(K, np.linalg.norm(P, 2) / rho ** m)
        if rho ** m < 1e-16:
            break
    return K


def mixing_rate(model: NoiseModel) -> MixingRate:
    """Geometric (or finite-support) bound on conditional-mean norms.

    The scale is 2*sqrt(trace R0), raised to at least 1 so that unit-norm
    states are covered, and multiplied by the transient growth constant of A
    for non-normal coefficient matrices.
    """
    c = max(2.0 * float(np.sqrt(np.trace(model.R0))), 1.0)
    if model.kind == "iid-gaussian":
        return MixingRate(c, 0.0, support=0)
    if model.kind == "ma-q":
        return MixingRate(c, 1.0, support=len(model.ma_coefficients))
    rho = model.rho
    if rho == 0.0:
        if not np.any(model.A):
            return MixingRate(c, 0.0, support=0)
        # nilpotent: A^p = 0
        K = max(np.linalg.norm(np.linalg.matrix_power(model.A, m), 2) for m in range(1, model.p + 1))
        return MixingRate(c * max(K, 1.0), 1.0, support=model.p)
    return MixingRate(c * _transient_constant(model.A, rho), rho)


def mixing_bound(model: NoiseModel, k: int) -> float:
    if k < 0:
        raise ValueError("k must be nonnegative")
    return float(mixing_rate(model)(k))


def conditional_mean(model: NoiseModel, x_last, m: int, innovations=None) -> np.ndarray:
    """E[X_{n-1+m} | past up to X_{n-1} = x_last].

    For ma-q the past innovations (most recent last, at least q of them) are
    required through ``innovations`` since X_{n-1} alone is not a sufficient
    statistic.
    """
    if m < 1:
        raise ValueError("lag m must be >= 1")
    x_last = np.asarray(x_last, dtype=float)
    if model.kind == "iid-gaussian":
        return np.zeros_like(x_last)
    if model.kind == "var1":
        return matvec(np.linalg.matrix_power(model.A, m), x_last)
    if innovations is None:
        raise ValueError("ma-q conditional mean needs the recent innovation history")
    w = np.asarray(innovations, dtype=float)
    th = _ma_thetas(model)
    out = np.zeros(model.p)
    # X_{n-1+m} = sum_i th[i] w_{n-1+m-i}; known terms have n-1+m-i <= n-1, i.e. i >= m
    for i in range(m, len(th)):
        out += th[i] @ w[-1 - (i - m)]
    return out


class NoiseBatch:
    """Independent noise paths for several replications, generated in chunks.

    Each replication owns its own generator, so a path depends only on its
    seed and on nothing else in the batch.  Drawing in chunks consumes the
    generator in the same order as a single draw, which makes prefixes agree
    across horizons.
    """

    def __init__(self, model: NoiseModel, seeds: Sequence):
        self.model = model
        self.rngs = [np.random.default_rng(s) for s in seeds]
        p = model.p
        R = len(self.rngs)
        if model.kind == "var1":
            z = np.stack([g.standard_normal(p) for g in self.rngs])
            self._state = matvec(model._state_sqrt, z)
        elif model.kind == "ma-q":
            q = len(model.ma_coefficients)
            z = np.stack([g.standard_normal((q + 1, p)) for g in self.rngs])
            w = matvec(model._innov_sqrt, z)
            self._state = self._ma_output(w)[:, -1]
            self._hist = w[:, 1:]
        else:
            self._state = np.zeros((R, p))

    def __len__(self):
        return len(self.rngs)

    def _ma_output(self, w):
        # w holds q leading innovations followed by L new ones; returns the L outputs
        th = _ma_thetas(self.model)
        q = len(th) - 1
        L = w.shape[1] - q
        out = matvec(th[0], w[:, q:])
        for i in range(1, q + 1):
            out = out + matvec(th[i], w[:, q - i:q - i + L])
        return out

    def _clip(self, x):
        M = self.model.truncation
        return x if M is None else np.clip(x, -M, M)

    @property
    def pre_state(self) -> np.ndarray:
        """X_{-1}: the value conditioned on before the first emitted sample."""
        return self._clip(self._state.copy())

    def take(self, n: int) -> np.ndarray:
        """Next ``n`` samples for every replication, shape (R, n, p)."""
        model = self.model
        p = model.p
        z = np.stack([g.standard_normal((n, p)) for g in self.rngs])
        w = matvec(model._innov_sqrt, z)
        if model.kind == "iid-gaussian":
            x = w
        elif model.kind == "var1":
            x = np.empty_like(w)
            s = self._state
            for t in range(n):
                s = matvec(model.A, s) + w[:, t]
                x[:, t] = s
            self._state = s
        else:
            q = len(model.ma_coefficients)
            full = np.concatenate([self._hist, w], axis=1)
            x = self._ma_output(full)
            self._hist = full[:, full.shape[1] - q:]
            self._state = x[:, -1]
        return self._clip(x)


def sample_path(model: NoiseModel, n: int, seed) -> np.ndarray:
    """Deterministic stationary path of length ``n`` (shape (n, p))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return NoiseBatch(model, [seed]).take(n)[0]

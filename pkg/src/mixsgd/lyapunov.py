"""Perturbed Lyapunov function W = V + V1 evaluated along simulated paths.

V(e) = |e|^2 / 2 and

    V1(e, n) = sum_{k >= n} w_k E_n{ e'[grad C(theta) - grad c(theta, X_k)] }
             = -e' f0(theta) sum_{k >= n} w_k A^{k-n+1} X_{n-1}

for VAR(1) noise (zero for i.i.d. noise).  Conditional expectations over the
next noise value X_n ~ N(A X_{n-1}, Sigma_w) are taken with tensor
Gauss-Hermite quadrature, which is exact for the polynomial integrands that
arise without projection and with constant gain.
"""

import itertools
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ._linalg import dot, matvec, norm
from .noise import NoiseModel
from .objectives import ObjectiveSpec, noisy_grad
from .optimizer import Ensemble, Monitor, ProjectionSet, Trajectory, step_size


def v(theta_err):
    e = np.asarray(theta_err, dtype=float)
    return 0.5 * dot(e, e)


def _paper_weights(k):
    return 1.0 / np.asarray(k, dtype=float)


class TailSums:
    """Truncated sums sum_{k=start}^{k_end} w_k A^{k-start+lag} x for a VAR(1) model.

    The truncation length K is the smallest with
    K_A rho^(K+1) / (1 - rho) <= tail_tol, where ||A^m|| <= K_A rho^m.
    """

    def __init__(self, model: NoiseModel, weights: Callable, tail_tol: float = 1e-12):
        if model.kind == "ma-q":
            raise ValueError("V1 has no closed-form tail for ma-q noise")
        if not tail_tol > 0:
            raise ValueError("tail_tol must be positive")
        self.model = model
        self.weights = weights
        self.tail_tol = tail_tol
        p = model.p
        if model.kind == "iid-gaussian" or not np.any(model.A):
            self.K = 0
            self.powers = np.zeros((1, p, p))
            self.rate_const, self.rho = 0.0, 0.0
        else:
            A = np.asarray(model.A)
            rho = model.rho
            pw = [np.eye(p)]
            norms = [1.0]
            K = 0
            while True:
                K += 1
                pw.append(pw[-1] @ A)
                norms.append(np.linalg.norm(pw[-1], 2))
                kA = max(n / rho ** m for m, n in enumerate(norms)) if rho > 0 else 1.0
                rem = kA * rho ** (K + 1) / (1 - rho) if rho > 0 else 0.0
                if rem <= tail_tol or (rho == 0 and not np.any(pw[-1])):
                    break
            self.K = K
            self.powers = np.stack(pw)          # A^0 .. A^K
            self.rate_const, self.rho = kA, rho
        self.power_norms = np.linalg.norm(self.powers, ord=2, axis=(1, 2))

    def k_end(self, n: int) -> int:
        """Last summed index for V1(., n); V1(., n+1) uses the same end."""
        return n + self.K - 1

    def coef(self, start: int, k_end: int, lag: int):
        """sum_{k=start}^{k_end} w_k A^{k-start+lag} as a p x p matrix, and the matching norm sum."""
        p = self.model.p
        if self.K == 0 or k_end < start:
            return np.zeros((p, p)), 0.0
        ks = np.arange(start, k_end + 1)
        m = ks - start + lag
        w = self.weights(ks)
        C = np.tensordot(w, self.powers[m], axes=1)
        return C, float(np.dot(w, self.power_norms[m]))

    def truncation_bound(self, n: int) -> float:
        """Bound on the omitted tail per unit ||x|| and unit gain, relative to the n-th weight."""
        if self.K == 0:
            return 0.0
        return float(self.weights(n)) * self.rate_const * self.rho ** (self.K + 1) / (1 - self.rho)


def _gain_quad(spec: ObjectiveSpec, theta, e, y):
    # e' f0(theta) y, batched
    return dot(e, spec.gain.apply(theta, y))


class V1Detail(NamedTuple):
    value: float
    truncation_bound: float
    terms: int


def v1_detail(spec: ObjectiveSpec, model: NoiseModel, theta, x_last, n: int,
              tail_tol: float = 1e-12, weights: Optional[Callable] = None) -> V1Detail:
    if n < 1 and weights is None:
        raise ValueError("n must be >= 1 with the default 1/k weights")
    tails = TailSums(model, weights or _paper_weights, tail_tol)
    theta = np.asarray(theta, dtype=float)
    x_last = np.asarray(x_last, dtype=float)
    C, _ = tails.coef(n, tails.k_end(n), 1)
    e = theta - spec.theta_star
    val = -_gain_quad(spec, theta, e, matvec(C, x_last))
    bound = (tails.truncation_bound(n) * float(np.linalg.norm(e))
             * float(np.linalg.norm(spec.gain.matrix_at(theta), 2)) * float(np.linalg.norm(x_last)))
    return V1Detail(float(val), bound, tails.K)


def v1(spec: ObjectiveSpec, model: NoiseModel, theta, x_last, n: int,
       tail_tol: float = 1e-12, weights: Optional[Callable] = None) -> float:
    """Closed-form V1(theta - theta*, n) given X_{n-1} = x_last (weights default to 1/k)."""
    return v1_detail(spec, model, theta, x_last, n, tail_tol, weights).value


def _gain_norm(spec, theta):
    if spec.gain.kind == "matrix":
        return np.full(np.shape(theta)[:-1], np.linalg.norm(spec.gain.matrix, 2))
    return np.abs(spec.gain.scale(theta))


@dataclass
class Property1Report:
    checked: int
    violations: int
    worst_ratio: float
    nominal_violations: int
    nominal_worst_ratio: float
    out_of_regime_checked: int = 0
    out_of_regime_violations: int = 0

    @property
    def ok(self) -> bool:
        return self.violations == 0


class LyapunovContext:
    """Model, objective and step weights shared by all perturbation computations.

    The weights default to the recursion's step sizes c0/(k+1) so that the
    cancellation between V1 and the correlated cross term is exact.
    """

    def __init__(self, spec: ObjectiveSpec, model: NoiseModel, c0: float = 1.0,
                 projection: Optional[ProjectionSet] = None, tail_tol: float = 1e-12,
                 weights: Optional[Callable] = None, gh_points: Optional[int] = None):
        self.spec, self.model, self.c0 = spec, model, c0
        self.projection = projection
        self.weights = weights or (lambda k: step_size(np.asarray(k, dtype=float), c0))
        self.tails = TailSums(model, self.weights, tail_tol)
        p = model.p
        if gh_points is None:
            gh_points = max(3, min(12, int(4096 ** (1.0 / p))))
        z, w = hermegauss(gh_points)
        w = w / math.sqrt(2 * math.pi)
        self.nodes = np.array(list(itertools.product(z, repeat=p)))
        self.node_weights = np.array([np.prod(c) for c in itertools.product(w, repeat=p)])

    @classmethod
    def from_config(cls, config, **kw):
        return cls(config.objective, config.noise, config.c0, config.projection, **kw)

    def step(self, n):
        return float(self.weights(n))

    def cond_mean(self, x_prev):
        if self.model.kind == "iid-gaussian":
            return np.zeros_like(x_prev)
        return matvec(self.model.A, x_prev)

    def next_theta(self, theta, x, n):
        cand = theta - self.step(n) * noisy_grad(self.spec, theta, x)
        return cand if self.projection is None else self.projection.project(cand)

    def v1_at(self, theta, x_last, n):
        """V1(theta - theta*, n) for batched theta and X_{n-1}, summing through k_end(n)."""
        C, _ = self.tails.coef(n, self.tails.k_end(n), 1)
        e = theta - self.spec.theta_star
        return -_gain_quad(self.spec, theta, e, matvec(C, x_last))

    def certified_v1_bound(self, theta, x_last, n):
        """(V + 1) times the pathwise tail constant |f0| sum_k w_k ||A^{k-n+1}|| ||X_{n-1}||."""
        _, s = self.tails.coef(n, self.tails.k_end(n), 1)
        e = theta - self.spec.theta_star
        return (v(e) + 1.0) * _gain_norm(self.spec, theta) * s * norm(x_last)

    def terms(self, theta, x_prev, n, x=None, theta_next=None) -> dict:
        """Drift and decomposition terms at step n for every replication.

        Keys: v, v1, w, cond_v (E_n V(e_{n+1})), cond_v1 (E_n V1(e_{n+1}, n+1)),
        drift (E_n W_{n+1} - W_n), t1a, t1b, t2, cross, t1a_bound, t1b_bound,
        and, when the realised (x, theta_next) are given, sample_drift.
        """
        spec = self.spec
        ts = spec.theta_star
        theta = np.asarray(theta, dtype=float)
        x_prev = np.asarray(x_prev, dtype=float)
        e = theta - ts
        kend = self.tails.k_end(n)
        C0, _ = self.tails.coef(n, kend, 1)
        C1, s1 = self.tails.coef(n + 1, kend, 1)
        mean = self.cond_mean(x_prev)
        V = v(e)
        V1 = -_gain_quad(spec, theta, e, matvec(C0, x_prev))
        # quadrature over X_n ~ N(mean, Sigma_w); iid noise has Sigma_w = covariance of X
        Xq = mean[:, None, :] + matvec(self.model._innov_sqrt, self.nodes)[None]
        thq = theta[:, None, :]
        grad_q = noisy_grad(spec, np.broadcast_to(thq, Xq.shape), Xq)
        nxt = thq - self.step(n) * grad_q
        if self.projection is not None:
            nxt = self.projection.project(nxt)
        en = nxt - ts
        Sq = matvec(C1, Xq)
        V1_next = -_gain_quad(spec, nxt, en, Sq)
        e_b = np.broadcast_to(e[:, None], Xq.shape)
        wq = self.node_weights
        E = lambda a: np.tensordot(a, wq, axes=([1], [0]))
        cond_v = E(v(en))
        cond_v1 = E(V1_next)
        t1a = E(-_gain_quad(spec, nxt, en - e[:, None], Sq))
        if spec.gain.lipschitz:
            t1b = E(_gain_quad(spec, np.broadcast_to(thq, Xq.shape), e_b, Sq) - _gain_quad(spec, nxt, e_b, Sq))
        else:
            t1b = np.zeros_like(t1a)
        t2 = -_gain_quad(spec, theta, e, matvec(C1, mean)) - V1
        cross = -self.step(n) * _gain_quad(spec, theta, e, mean)
        gnorm_next = _gain_norm(spec, nxt)
        disp = self.step(n) * norm(grad_q)
        xnorm = norm(Xq)
        t1a_bound = E(disp * gnorm_next * s1 * xnorm)
        t1b_bound = norm(e) * E(spec.gain.lipschitz * disp * s1 * xnorm)
        out = dict(v=V, v1=V1, w=V + V1, cond_v=cond_v, cond_v1=cond_v1,
                   drift=cond_v + cond_v1 - (V + V1), t1a=t1a, t1b=t1b, t2=t2, cross=cross,
                   t1a_bound=t1a_bound, t1b_bound=t1b_bound)
        if x is not None and theta_next is not None:
            en1 = np.asarray(theta_next) - ts
            w_next = v(en1) - _gain_quad(spec, theta_next, en1, matvec(C1, x))
            out["sample_drift"] = w_next - (V + V1)
        return out


def _ctx_for(source, ctx):
    if ctx is not None:
        return ctx
    if isinstance(source, Ensemble):
        return LyapunovContext.from_config(source.config)
    raise ValueError("a LyapunovContext is required for trajectory input")


def _state(source, n):
    if isinstance(source, Ensemble):
        return source.state_at(n)
    if isinstance(source, Trajectory):
        source = [source]
    if n >= source[0].n_max:
        raise ValueError("step n needs theta_{n+1}; n must be < n_max")
    th = np.stack([t.iterates[n] for t in source])
    nx = np.stack([t.iterates[n + 1] for t in source])
    x = np.stack([t.noise[n] for t in source])
    xp = np.stack([t.noise_before(n) for t in source])
    return th, nx, x, xp


def _property1_arrays(ctx: LyapunovContext, k, theta, xp):
    """V1, certified bound and nominal ratio for steps k (b,) and batched (R, b, p) states."""
    t = ctx.tails
    e = theta - ctx.spec.theta_star
    V = v(e)
    if t.K == 0:
        zero = np.zeros(theta.shape[:-1])
        return zero, zero, zero
    m = np.arange(1, t.K + 1)
    W = ctx.weights(k[:, None] + m[None, :] - 1)          # (b, K)
    C = np.tensordot(W, t.powers[1:], axes=([1], [0]))     # (b, p, p)
    snorm = W @ t.power_norms[1:]
    y = xp[..., 0:1] * C[None, :, :, 0]
    for j in range(1, C.shape[-1]):
        y = y + xp[..., j:j + 1] * C[None, :, :, j]
    val = -_gain_quad(ctx.spec, theta, e, y)
    bnd = (V + 1.0) * _gain_norm(ctx.spec, theta) * snorm[None] * norm(xp)
    nominal = np.abs(val) / ((V + 1.0) * ctx.weights(k)[None])
    return val, bnd, nominal


def _ratio(val, bnd):
    r = np.abs(val) / np.where(bnd > 0, bnd, np.inf)
    return np.where((bnd == 0) & (val != 0), np.inf, r)


def check_property1(trajectory: Trajectory, kappa2: int, ctx: LyapunovContext,
                    n_min: Optional[int] = None) -> Property1Report:
    """|V1(e_n, n)| <= certified bound for every n >= kappa2 along a stored trajectory.

    The certified bound is (V + 1) times |f0(theta_n)| sum_k w_k ||A^{k-n+1}|| ||X_{n-1}||.
    Steps with n_min <= n < kappa2 are evaluated too but counted separately as
    out of regime.  The nominal ratio |V1| / ((V + 1) w_n), i.e. the tail
    constant taken as 1, is reported without being enforced.
    """
    n_min = kappa2 if n_min is None else n_min
    ns = np.arange(max(n_min, 1), trajectory.n_max + 1)
    theta = trajectory.iterates[ns][None]
    xp = np.concatenate([trajectory.pre_state[None], trajectory.noise])[ns][None]
    val, bnd, nominal = _property1_arrays(ctx, ns, theta, xp)
    ratio, nominal = _ratio(val, bnd)[0], nominal[0]
    reg = ns >= kappa2
    return Property1Report(
        checked=int(reg.sum()),
        violations=int(np.sum(ratio[reg] > 1.0)),
        worst_ratio=float(ratio[reg].max()) if reg.any() else 0.0,
        nominal_violations=int(np.sum(nominal[reg] > 1.0)),
        nominal_worst_ratio=float(nominal[reg].max()) if reg.any() else 0.0,
        out_of_regime_checked=int((~reg).sum()),
        out_of_regime_violations=int(np.sum(ratio[~reg] > 1.0)),
    )


class Property1Monitor(Monitor):
    """Streaming version of check_property1 over an ensemble."""

    name = "property1"

    def __init__(self, kappa2: int, tail_tol: float = 1e-12):
        self.kappa2, self.tail_tol = kappa2, tail_tol

    def start(self, config, R):
        self.ctx = LyapunovContext.from_config(config, tail_tol=self.tail_tol)
        self.checked = np.zeros(R, dtype=np.int64)
        self.violations = np.zeros(R, dtype=np.int64)
        self.worst = np.zeros(R)
        self.nominal_violations = np.zeros(R, dtype=np.int64)
        self.nominal_worst = np.zeros(R)

    def update(self, block):
        k = block.steps
        sel = k >= max(self.kappa2, 1)
        if not sel.any():
            return
        val, bnd, nominal = _property1_arrays(self.ctx, k[sel], block.theta[:, sel], block.x_prev[:, sel])
        ratio = _ratio(val, bnd)
        self.checked += int(sel.sum())
        self.violations += np.sum(ratio > 1.0, axis=1)
        self.worst = np.maximum(self.worst, ratio.max(axis=1))
        self.nominal_violations += np.sum(nominal > 1.0, axis=1)
        self.nominal_worst = np.maximum(self.nominal_worst, nominal.max(axis=1))

    def result(self):
        return {"checked": self.checked, "violations": self.violations, "worst_ratio": self.worst,
                "nominal_violations": self.nominal_violations, "nominal_worst_ratio": self.nominal_worst}


@dataclass
class DriftResult:
    n: int
    drift: float
    drift_se: float
    excess: float           # mean of drift + (lambda1 * w_n) W_n
    excess_se: float
    kbar_hat: float         # n^2 * excess when positive, else 0
    mode: str

    @property
    def ok(self) -> bool:
        """excess <= 0 up to two standard errors."""
        return self.excess <= 2.0 * self.excess_se


def _mse(a):
    a = np.asarray(a, dtype=float)
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else float("nan")


def estimate_drift(ensemble, n: int, lambda1: float, ctx: Optional[LyapunovContext] = None,
                   mode: str = "sample") -> DriftResult:
    """Cross-replication estimate of E_n W_{n+1} - W_n + lambda1 w_n W_n.

    ``mode='sample'`` averages the realised differences W_{n+1} - W_n over
    replications.  ``mode='exact'`` replaces each realised W_{n+1} by its
    quadrature conditional expectation given the state at n, which removes
    the sampling noise of X_n and exposes the O(1/n^2) remainder.
    """
    if mode not in ("sample", "exact"):
        raise ValueError(f"unknown drift mode {mode!r}")
    ctx = _ctx_for(ensemble, ctx)
    th, nx, x, xp = _state(ensemble, n)
    t = ctx.terms(th, xp, n, x, nx)
    d = t["drift"] if mode == "exact" else t["sample_drift"]
    ex = d + lambda1 * ctx.step(n) * t["w"]
    dm, dse = _mse(d)
    em, ese = _mse(ex)
    return DriftResult(n, dm, dse, em, ese, n * n * em if em > 0 else 0.0, mode)


def decomposition_terms(trajectory, n: int, ctx: Optional[LyapunovContext] = None) -> dict:
    """T1a, T1b, T2 and the correlated cross term at step n (per replication arrays).

    Also returns the certified bounds for |T1a|, |T1b| and the residual
    T2 + cross, which vanishes up to rounding.
    """
    ctx = _ctx_for(trajectory, ctx)
    if ctx.model.kind != "var1" and ctx.model.kind != "iid-gaussian":
        raise ValueError("decomposition needs var1 or iid noise")
    th, nx, x, xp = _state(trajectory, n)
    t = ctx.terms(th, xp, n, x, nx)
    return dict(t1a=t["t1a"], t1b=t["t1b"], t2=t["t2"], cross=t["cross"],
                residual=t["t2"] + t["cross"], t1a_bound=t["t1a_bound"], t1b_bound=t["t1b_bound"])


class LemmaResult(NamedTuple):
    c: float
    holds: bool
    worst_n: int
    worst_ratio: float


def lemma_bound(a: float, b: float, x1: float, N: int) -> LemmaResult:
    """Iterate x_{n+1} = (1 - a/n) x_n + b/n^2 with equality and test x_n <= c/n,
    c = max(x1, b/(a-1)).  worst_n is the first violating n, or the n with the
    largest n x_n / c when there is none.
    """
    if not a > 1:
        raise ValueError("lemma requires a > 1")
    if not b > 0 or x1 < 0:
        raise ValueError("lemma requires b > 0 and x1 >= 0")
    c = max(x1, b / (a - 1.0))
    x = float(x1)
    worst_n, worst = 1, x / c
    for n in range(1, N):
        x = (1.0 - a / n) * x + b / (n * n)
        r = (n + 1) * x / c
        if r > 1.0:
            return LemmaResult(c, False, n + 1, r)
        if r > worst:
            worst_n, worst = n + 1, r
    return LemmaResult(c, True, worst_n, worst)


def lemma_bound_shifted(a: float, b: float, x1: float, N: int) -> LemmaResult:
    """Same recursion, with the induction started at n0 = max(1, ceil(a)).

    For n >= a the coefficient 1 - a/n is nonnegative, so x_n <= c/n for all
    n >= n0 with c = max(n0 x_{n0}, b/(a-1)).  worst_n is as in lemma_bound.
    """
    if not a > 1:
        raise ValueError("lemma requires a > 1")
    if not b > 0 or x1 < 0:
        raise ValueError("lemma requires b > 0 and x1 >= 0")
    n0 = max(1, math.ceil(a))
    x = float(x1)
    for n in range(1, n0):
        x = (1.0 - a / n) * x + b / (n * n)
    c = max(n0 * x, b / (a - 1.0))
    worst_n, worst = n0, n0 * x / c
    for n in range(n0, N):
        x = (1.0 - a / n) * x + b / (n * n)
        r = (n + 1) * x / c
        if r > 1.0:
            return LemmaResult(c, False, n + 1, r)
        if r > worst:
            worst_n, worst = n + 1, r
    return LemmaResult(c, True, worst_n, worst)

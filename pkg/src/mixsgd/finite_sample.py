"""Finite-sample constants, MSE and regret curves, and the exact 1-D MSE oracle."""

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from ._linalg import norm
from .noise import MixingRate, mixing_rate
from .objectives import ObjectiveSpec, cost
from .optimizer import Ensemble, Monitor, RunConfig, Trajectory


@dataclass(frozen=True)
class ConstantsReport:
    K0: float
    gamma: float
    K_D: float
    alpha: float
    lam: float
    lambda0: float
    K2: float
    kappa1: int
    kappa2: int
    kappa_plus: int

    @property
    def lambda1(self) -> float:
        return self.lam - self.lambda0

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["lambda1"] = self.lambda1
        return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def _kappa2(psi: MixingRate, psi_bar: MixingRate) -> int:
    for rate in (psi, psi_bar):
        if not rate.summable:
            raise ValueError("mixing bounds must be summable")

    def ok(n):
        return psi.tail(n) <= 1.0 and psi_bar.tail(n) <= 1.0

    n = 1
    for rate in (psi, psi_bar):
        if rate.support is None and 0.0 < rate.rate < 1.0 and rate.tail(1) > 1.0:
            # closed form: scale*rate^n/(1-rate) <= 1
            est = math.log((1.0 - rate.rate) / rate.scale) / math.log(rate.rate)
            n = max(n, int(math.ceil(est)))
    n = max(n - 1, 1)
    while not ok(n):
        n += 1
    while n > 1 and ok(n - 1):
        n -= 1
    return n


def kappa_plus(K0: float, gamma: float, K_D: float, alpha: float, lambda0: float,
               psi_bounds: Union[MixingRate, tuple], lam: Optional[float] = None) -> ConstantsReport:
    """kappa_1 = ceil((2 K0 / K2)^(1/gamma)) with K2 = (lambda0/K_D)^(1/alpha),
    kappa_2 = first n >= 1 with both mixing tails from n at most 1,
    kappa_+ = max of the two.

    ``psi_bounds`` is a MixingRate for psi or a pair (psi, psi_bar); psi_bar
    defaults to zero.
    """
    if isinstance(psi_bounds, MixingRate):
        psi, psi_bar = psi_bounds, MixingRate(0.0, 0.0)
    else:
        psi, psi_bar = psi_bounds
    if not 0.0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    if lam is not None and lam <= 1.0 + lambda0:
        raise ValueError(f"need lambda > 1 + lambda0, got lambda={lam}, lambda0={lambda0}")
    if not lambda0 > 0:
        raise ValueError("lambda0 must be positive")
    K2 = math.inf if K_D == 0 else (lambda0 / K_D) ** (1.0 / alpha)
    kappa1 = max(1, math.ceil((2.0 * K0 / K2) ** (1.0 / gamma))) if K2 < math.inf else 1
    kappa2 = _kappa2(psi, psi_bar)
    return ConstantsReport(K0, gamma, K_D, alpha, math.nan if lam is None else lam, lambda0,
                           K2, kappa1, kappa2, max(kappa1, kappa2))


def constants_for(config: RunConfig, gamma: float = 0.25, lambda0: Optional[float] = None) -> ConstantsReport:
    """Constants of a run configuration.

    With c0 != 1 the recursion is the c0 = 1 recursion for the objective
    scaled by c0, so lambda and K_D enter multiplied by c0.  The Hessian
    mixing bound psi_bar is psi scaled by the gain's Lipschitz constant.
    """
    obj = config.objective
    lam = config.c0 * obj.lam
    K_D = config.c0 * obj.K_D
    if lambda0 is None:
        lambda0 = (lam - 1.0) / 2.0
    psi = mixing_rate(config.noise)
    psi = MixingRate(psi.scale * obj.gain.sup_norm, psi.rate, psi.support)
    psi_bar = MixingRate(psi.scale * obj.gain.lipschitz, psi.rate, psi.support)
    return kappa_plus(config.projection.K0(obj.p), gamma, K_D, obj.alpha, lambda0,
                      (psi, psi_bar), lam=lam)


def checkpoint_grid(kappa_plus: int, n_max: int, start: int = 100, per_octave: int = 2) -> np.ndarray:
    """Geometric grid ceil(n0 * 2^(j/per_octave)) on [max(kappa_plus, start), n_max], n_max included."""
    n0 = max(int(kappa_plus), int(start))
    if n0 > n_max:
        raise ValueError(f"grid start {n0} exceeds n_max {n_max}")
    pts = []
    j = 0
    while True:
        n = math.ceil(n0 * 2.0 ** (j / per_octave) - 1e-9)
        if n > n_max:
            break
        pts.append(n)
        j += 1
    pts.append(n_max)
    return np.unique(np.array(pts, dtype=int))


class PowerLawFit(NamedTuple):
    slope: float
    intercept: float
    r2: float
    envelope: float


class LogLawFit(NamedTuple):
    a: float
    b: float
    r2: float


@dataclass
class CurveReport:
    checkpoints: np.ndarray
    values: np.ndarray
    se: np.ndarray
    fit: Optional[tuple] = None
    note: str = ""
    extra: dict = field(default_factory=dict)


def _r2(y, yhat):
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def _xy(curve):
    if isinstance(curve, CurveReport):
        return np.asarray(curve.checkpoints, dtype=float), np.asarray(curve.values, dtype=float)
    n, v = curve
    return np.asarray(n, dtype=float), np.asarray(v, dtype=float)


def fit_power_law(curve) -> PowerLawFit:
    """Least-squares fit of log(value) on log(n); envelope = max n*value."""
    n, v = _xy(curve)
    if n.size < 3:
        raise ValueError("power-law fit needs at least 3 checkpoints")
    if np.any(v <= 0):
        raise ValueError("power-law fit needs positive values at every checkpoint")
    x, y = np.log(n), np.log(v)
    slope, intercept = np.polyfit(x, y, 1)
    return PowerLawFit(float(slope), float(intercept), _r2(y, slope * x + intercept),
                       float(np.max(n * v)))


def fit_log_law(curve) -> LogLawFit:
    """Least-squares fit value = a + b log n."""
    n, v = _xy(curve)
    if n.size < 3:
        raise ValueError("log-law fit needs at least 3 checkpoints")
    x = np.log(n)
    b, a = np.polyfit(x, v, 1)
    return LogLawFit(float(a), float(b), _r2(v, a + b * x))


def _mean_se(samples):
    samples = np.asarray(samples, dtype=float)
    R = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(R) if R > 1 else np.full_like(mean, np.nan)
    return mean, se


def _errors(source, n, theta_star=None):
    if isinstance(source, Ensemble):
        return source.errors_at(n)
    return np.stack([t.errors[n] for t in source])


def mse_curve(ensemble: Union[Ensemble, Sequence[Trajectory]], checkpoints) -> CurveReport:
    """Monte-Carlo mean and standard error of ||theta_n - theta*||^2 per checkpoint."""
    cps = np.asarray(checkpoints, dtype=int)
    samples = np.stack([np.sum(_errors(ensemble, int(n)) ** 2, axis=1) for n in cps], axis=1)
    if samples.shape[0] < 2:
        raise ValueError("mse_curve needs at least 2 replications")
    mean, se = _mean_se(samples)
    rep = CurveReport(cps, mean, se)
    if cps.size < 3:
        rep.note = "fit undefined: fewer than 3 checkpoints"
    elif np.any(mean <= 0):
        rep.note = "fit undefined: non-positive MSE at some checkpoint"
    else:
        rep.fit = fit_power_law(rep)
    return rep


def envelope_stability(curve: CurveReport, decade: float = 10.0) -> float:
    """max/min of n*value over checkpoints in the top decade [n_max/decade, n_max]."""
    n = np.asarray(curve.checkpoints, dtype=float)
    top = n >= n.max() / decade
    nv = n[top] * np.asarray(curve.values)[top]
    return float(nv.max() / nv.min())


def _cumgap(source, spec, n):
    if isinstance(source, Ensemble):
        if n < 0:
            return np.zeros(source.replications)
        return source.cumgap_at(n)
    c_star = cost(spec, spec.theta_star)
    return np.array([np.sum(cost(spec, t.iterates[:n + 1]) - c_star) for t in source])


def regret_curve(ensemble, spec: ObjectiveSpec, kappa_plus: int, checkpoints=None) -> CurveReport:
    """regret_n = sum_{k=kappa_+}^{n} [C(theta_k) - C(theta*)], averaged over replications.

    ``extra['full']`` holds the same sum started at k = 1 (context only).
    """
    if checkpoints is None:
        if not isinstance(ensemble, Ensemble):
            raise ValueError("checkpoints are required for trajectory lists")
        checkpoints = ensemble.steps[ensemble.steps >= kappa_plus]
    cps = np.asarray(checkpoints, dtype=int)
    if np.any(cps < kappa_plus):
        raise ValueError("regret checkpoints must be >= kappa_plus")
    base = _cumgap(ensemble, spec, kappa_plus - 1)
    base_full = _cumgap(ensemble, spec, 0)
    per_rep = np.stack([_cumgap(ensemble, spec, int(n)) - base for n in cps], axis=1)
    full = np.stack([_cumgap(ensemble, spec, int(n)) - base_full for n in cps], axis=1)
    mean, se = _mean_se(per_rep)
    rep = CurveReport(cps, mean, se)
    rep.extra["full"], rep.extra["full_se"] = _mean_se(full)
    rep.extra["pathwise_monotone"] = bool(np.all(np.diff(per_rep, axis=1) >= 0))
    if cps.size >= 3:
        rep.fit = fit_log_law(rep)
    else:
        rep.note = "fit undefined: fewer than 3 checkpoints"
    return rep


def exact_mse_oracle(b: float, sigma: float, theta0_err: float, c0: float, n: int) -> float:
    """E e_n^2 for the unprojected 1-D recursion e_{k+1} = (1 - eps_k b) e_k - eps_k sigma x_k, x_k iid N(0,1)."""
    m = theta0_err ** 2
    for k in range(n):
        eps = c0 / (k + 1.0)
        m = (1.0 - eps * b) ** 2 * m + eps ** 2 * sigma ** 2
    return m


def as_rate_statistic(trajectory: Trajectory, gamma: float, window) -> tuple:
    """n^gamma ||theta_n - theta*|| at the window steps, and its running maximum."""
    if not 0.0 <= gamma < 0.5:
        raise ValueError("gamma must lie in [0, 1/2)")
    n = np.asarray(window, dtype=int)
    stat = n.astype(float) ** gamma * np.linalg.norm(trajectory.errors[n], axis=1)
    return stat, np.maximum.accumulate(stat)


class RateMonitor(Monitor):
    """Per-replication maxima of n^gamma ||e_n|| over [lo, mid) and [mid, hi]."""

    name = "rate"

    def __init__(self, gamma: float, lo: int, mid: int, hi: int):
        self.gamma, self.lo, self.mid, self.hi = gamma, lo, mid, hi

    def start(self, config, R):
        self.theta_star = config.objective.theta_star
        self.early = np.zeros(R)
        self.late = np.zeros(R)

    def update(self, block):
        k = block.steps
        stat = k.astype(float) ** self.gamma * norm(block.theta - self.theta_star)
        early = (k >= self.lo) & (k < self.mid)
        late = (k >= self.mid) & (k <= self.hi)
        if early.any():
            self.early = np.maximum(self.early, stat[:, early].max(axis=1))
        if late.any():
            self.late = np.maximum(self.late, stat[:, late].max(axis=1))

    def result(self):
        return {"early_max": self.early, "late_max": self.late}


class KappaMonitor(Monitor):
    """Counts steps n >= kappa_1 where K_D ||e_n||^alpha > lambda0."""

    name = "kappa"

    def __init__(self, constants: ConstantsReport):
        self.c = constants

    def start(self, config, R):
        self.theta_star = config.objective.theta_star
        self.K_D = config.c0 * config.objective.K_D
        self.violations = np.zeros(R, dtype=np.int64)

    def update(self, block):
        k = block.steps
        sel = k >= self.c.kappa1
        if not sel.any() or self.K_D == 0:
            return
        e = norm(block.theta[:, sel] - self.theta_star)
        self.violations += np.sum(self.K_D * e ** self.c.alpha > self.c.lambda0, axis=1)

    def result(self):
        return {"violations": self.violations}

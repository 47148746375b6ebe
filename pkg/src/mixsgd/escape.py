"""Escape of the iterates from a neighbourhood of the minimiser.

The recursion is restarted at step index n (step sizes 1/k, k >= n) from a
point near theta*, and followed on the interpolated time scale
t_k - t_n with t_1 = 0, t_{k+1} = t_k + 1/k until it leaves the exit region
G (a closed ball around theta*) or T units of interpolated time elapse.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.stats import binomtest

from ._linalg import norm
from .noise import NoiseBatch, NoiseModel
from .objectives import ObjectiveSpec, noisy_grad
from .optimizer import BLOCK, ConfigError, ProjectionSet, replication_seed


def interpolation_time(n):
    """t_n = sum_{k=1}^{n-1} 1/k, so t_1 = 0 and t_{n+1} = t_n + 1/n."""
    n_arr = np.asarray(n)
    if np.any(n_arr < 1):
        raise ValueError("interpolation time is defined for n >= 1")
    if n_arr.ndim == 0:
        return math.fsum(1.0 / k for k in range(1, int(n)))
    top = int(n_arr.max())
    t = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, top))])
    return t[n_arr - 1]


class InterpolatedProcess:
    """theta^n(t) = theta_{m(t + t_n)}, piecewise constant on [t_k - t_n, t_{k+1} - t_n).

    ``iterates[i]`` is theta_{n+i}.
    """

    def __init__(self, iterates, n: int):
        if n < 1:
            raise ValueError("start index must be >= 1")
        self.iterates = np.asarray(iterates, dtype=float)
        self.n = n
        ks = n + np.arange(len(self.iterates))
        self.times = interpolation_time(ks) - interpolation_time(n)

    def index(self, t):
        """Offset i of the iterate in force at interpolated time t >= 0 (m(t + t_n) - n)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise ValueError("time must be nonnegative")
        i = np.searchsorted(self.times, t, side="right") - 1
        if np.any(i >= len(self.times) - 1) and np.any(t >= self.times[-1] + 1.0 / (self.n + len(self.times) - 1)):
            raise ValueError("time beyond the stored horizon")
        return i

    def __call__(self, t):
        return self.iterates[self.index(t)]


@dataclass(frozen=True, eq=False)
class EscapeConfig:
    objective: ObjectiveSpec
    noise: NoiseModel
    G_radius: float
    mu: float
    nu: float
    T: float
    n_list: tuple
    replications: int = 1000
    seed: int = 0
    start: str = "uniform"          # uniform in the nu-ball around theta*, or "center"
    projection: Optional[ProjectionSet] = None

    def __post_init__(self):
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        if not self.T > 0:
            raise ConfigError("escape horizon T must be positive")
        if not 0 < self.mu < self.G_radius:
            raise ConfigError("closure of N_mu(theta*) must lie inside G (need 0 < mu < G radius)")
        if not 0 < self.nu <= self.mu:
            raise ConfigError("need 0 < nu <= mu")
        if not self.n_list or min(self.n_list) < 1:
            raise ConfigError("scales n must be >= 1")
        if self.start not in ("uniform", "center"):
            raise ConfigError("start must be 'uniform' or 'center'")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.noise.p != self.objective.p:
            raise ConfigError("objective and noise dimensions disagree")


@dataclass
class ExitSamples:
    n: int
    T: float
    tau: np.ndarray            # first exit time, inf when censored at T
    end_outside: np.ndarray    # theta^n(T) outside N_nu(theta*)
    steps: int

    @property
    def replications(self) -> int:
        return self.tau.size

    @property
    def exited(self) -> np.ndarray:
        return np.isfinite(self.tau)

    def events(self, kind="combined") -> np.ndarray:
        return self.exited | self.end_outside if kind == "combined" else self.exited


def _start_points(cfg, R, seeds):
    p = cfg.objective.p
    ts = cfg.objective.theta_star
    if cfg.start == "center":
        return np.broadcast_to(ts, (R, p)).copy()
    out = np.empty((R, p))
    for r, s in enumerate(seeds):
        g = np.random.default_rng(s)
        d = g.standard_normal(p)
        d /= np.linalg.norm(d)
        out[r] = ts + cfg.nu * g.random() ** (1.0 / p) * d
    return out


def simulate_scale(cfg: EscapeConfig, n: int, scale_index: int = 0) -> ExitSamples:
    R = cfg.replications
    ts = cfg.objective.theta_star
    seqs = [replication_seed(cfg.seed, i, kind="escape", scale=scale_index) for i in range(R)]
    children = [s.spawn(2) for s in seqs]
    batch = NoiseBatch(cfg.noise, [c[0] for c in children])
    theta = _start_points(cfg, R, [c[1] for c in children])
    tau = np.full(R, np.inf)
    s = 0.0
    k = n
    out0 = norm(theta - ts) > cfg.G_radius
    tau[out0] = 0.0
    X = batch.take(BLOCK)
    j = 0
    steps = 0
    while True:
        s_next = s + 1.0 / k
        if s_next > cfg.T:
            break
        if j == BLOCK:
            X, j = batch.take(BLOCK), 0
        cand = theta - (1.0 / k) * noisy_grad(cfg.objective, theta, X[:, j])
        theta = cand if cfg.projection is None else cfg.projection.project(cand)
        j += 1
        k += 1
        steps += 1
        s = s_next
        out = (norm(theta - ts) > cfg.G_radius) & ~np.isfinite(tau)
        tau[out] = s
    end_out = norm(theta - ts) >= cfg.nu
    return ExitSamples(n, cfg.T, tau, end_out, steps)


def simulate_exit(cfg: EscapeConfig) -> dict:
    """Exit-time samples for every scale in cfg.n_list, keyed by n."""
    return {n: simulate_scale(cfg, n, i) for i, n in enumerate(cfg.n_list)}


class ExitProbability(NamedTuple):
    p_hat: float
    ci_lo: float
    ci_hi: float
    count: int
    replications: int


def exit_probability(samples, T: Optional[float] = None, kind: str = "combined",
                     confidence: float = 0.95) -> ExitProbability:
    """Fraction of replications with the exit event by time T, with a Wilson interval.

    ``samples`` is an ExitSamples or a boolean event array.  A zero count gets
    the one-sided rule-of-three upper bound 3/R.
    """
    if isinstance(samples, ExitSamples):
        ev = samples.events(kind)
        if T is not None and T != samples.T:
            ev = (samples.tau <= T) | (samples.end_outside if kind == "combined" else False)
    else:
        ev = np.asarray(samples, dtype=bool)
    R = ev.size
    if R < 1:
        raise ValueError("need at least one sample")
    k = int(ev.sum())
    if k == 0:
        return ExitProbability(0.0, 0.0, min(1.0, 3.0 / R), 0, R)
    ci = binomtest(k, R).proportion_ci(confidence, method="wilson")
    return ExitProbability(k / R, float(ci.low), float(ci.high), k, R)


@dataclass
class ExponentFit:
    h: Optional[float]
    intercept: Optional[float]
    r2: Optional[float]
    used: list
    starved: list
    note: str = ""

    @property
    def exponential(self) -> bool:
        return self.h is not None and self.h > 0


def fit_exponent(ns: Sequence[int], p_hats: Sequence[float]) -> ExponentFit:
    """Fit log p = intercept - h n on the scales with p > 0; needs at least 3 of them."""
    ns = np.asarray(ns, dtype=float)
    p = np.asarray(p_hats, dtype=float)
    pos = p > 0
    used = [int(n) for n in ns[pos]]
    starved = [int(n) for n in ns[~pos]]
    if pos.sum() < 3:
        return ExponentFit(None, None, None, used, starved,
                           f"not fitted: only {int(pos.sum())} scale(s) with positive counts; starved: {starved}")
    x, y = ns[pos], np.log(p[pos])
    slope, icpt = np.polyfit(x, y, 1)
    yhat = slope * x + icpt
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    h = float(-slope)
    if abs(h) < 1e-12:
        h = 0.0
    note = "" if h > 0 else "non-exponential: fitted exponent is not positive"
    return ExponentFit(h, float(icpt), r2, used, starved, note)


@dataclass
class GrowthReport:
    ns: list
    lower_bounds: list
    informative: list
    nondecreasing: bool
    fit: Optional[ExponentFit] = None
    note: str = ""


def mean_exit_growth(samples_per_n: dict, T: float) -> GrowthReport:
    """Censoring-aware lower bound on E tau per scale: censored samples count as T."""
    ns = sorted(samples_per_n)
    lbs, info = [], []
    for n in ns:
        s = samples_per_n[n]
        tau = s.tau if isinstance(s, ExitSamples) else np.asarray(s, dtype=float)
        lbs.append(float(np.mean(np.where(np.isfinite(tau), tau, T))))
        info.append(bool(np.any(np.isfinite(tau))))
    nondec = all(b >= a for a, b in zip(lbs, lbs[1:]))
    rep = GrowthReport(ns, lbs, info, nondec)
    if not any(info):
        rep.note = "inconclusive: every sample censored at T at every scale"
    if sum(info) >= 3:
        x = np.array([n for n, i in zip(ns, info) if i], dtype=float)
        y = np.log([b for b, i in zip(lbs, info) if i])
        slope, icpt = np.polyfit(x, y, 1)
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        resid = float(np.sum((y - (slope * x + icpt)) ** 2))
        r2 = 1.0 - resid / ss_tot if ss_tot > 0 else 1.0
        rep.fit = ExponentFit(float(slope), float(icpt), r2, [int(v) for v in x], [])
    return rep

"""Projected stochastic gradient recursion with decreasing step size.

    theta_{k+1} = Proj_G(theta_k - eps_k * (grad C(theta_k) + f0(theta_k) X_k)),
    eps_k = c0 / (k + 1).

The noise X_0, X_1, ... of every replication is one pre-committed stationary
path drawn from its own derived seed.  Replications are simulated as a
batch, but all arithmetic is elementwise over the replication axis so a
replication produces the same bits alone or inside any batch.
"""

import copy
import csv
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._linalg import norm
from .noise import NoiseBatch, NoiseModel
from .objectives import ObjectiveSpec, cost, noisy_grad

log = logging.getLogger(__name__)

BLOCK = 512


def step_size(k, c0=1.0):
    """eps_k = c0 / (k + 1)."""
    if np.any(np.asarray(k) < 0):
        raise ValueError("step index must be nonnegative")
    return c0 / (np.asarray(k) + 1.0) if np.ndim(k) else c0 / (k + 1.0)


@dataclass(frozen=True)
class ProjectionSet:
    """Box [-r, r]^p or Euclidean ball of radius r, centred at the origin."""

    kind: str = "box"
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("box", "ball"):
            raise ValueError(f"unknown projection set {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("projection radius must be positive")

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "box":
            return np.clip(x, -self.radius, self.radius)
        n = norm(x)
        scale = np.where(n > self.radius, self.radius / np.where(n > 0, n, 1.0), 1.0)
        return x * scale[..., None] if np.ndim(scale) else x * float(scale)

    def contains(self, x, strict=False):
        x = np.asarray(x, dtype=float)
        if self.kind == "box":
            m = np.max(np.abs(x), axis=-1)
        else:
            m = norm(x)
        return m < self.radius if strict else m <= self.radius * (1 + 1e-12)

    def K0(self, p: int) -> float:
        """sup over G of ||theta||."""
        return self.radius * (np.sqrt(p) if self.kind == "box" else 1.0)

    def diameter(self, p: int) -> float:
        return 2.0 * self.K0(p)


def project(pset: ProjectionSet, x):
    return pset.project(x)


def default_projection(theta_star) -> ProjectionSet:
    return ProjectionSet("box", 10.0 * float(np.linalg.norm(theta_star)) + 10.0)


class ConfigError(ValueError):
    """A configuration violates one of the model assumptions."""


@dataclass(frozen=True, eq=False)
class RunConfig:
    objective: ObjectiveSpec
    noise: NoiseModel
    projection: ProjectionSet
    n_max: int
    theta0: np.ndarray
    c0: float = 1.0
    seed: int = 0
    replications: int = 1

    def __post_init__(self):
        obj = self.objective
        th0 = np.atleast_1d(np.asarray(self.theta0, dtype=float))
        object.__setattr__(self, "theta0", th0)
        if th0.size != obj.p or self.noise.p != obj.p:
            raise ConfigError("objective, noise and theta0 dimensions disagree")
        if self.c0 * obj.lam <= 1:
            raise ConfigError(
                f"A4 requires c0*lambda_min(B) > 1, got {self.c0}*{obj.lam:.6g}")
        if not self.projection.contains(obj.theta_star, strict=True):
            raise ConfigError("theta* must lie in G° (interior of the projection set)")
        if not self.projection.contains(th0):
            raise ConfigError("theta0 must lie in the projection set G")
        if not obj.convex_on(self.projection.diameter(obj.p)):
            raise ConfigError("A3 requires K_D * diam(G)^alpha < lambda_min(B)")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    @property
    def p(self) -> int:
        return self.objective.p


def replication_seed(base: int, replication: int, *, kind: Optional[str] = None, scale: int = 0):
    """Seed for one replication: a pure function of (base, kind, scale, replication)."""
    entropy = base if kind is None else [base, zlib.crc32(kind.encode())]
    return np.random.SeedSequence(entropy, spawn_key=(scale, replication))


@dataclass(eq=False)
class Trajectory:
    iterates: np.ndarray        # (n_max + 1, p)
    noise: np.ndarray           # (n_max, p): X_k used at step k
    pre_state: np.ndarray       # X_{-1}
    theta_star: np.ndarray
    seed: object = None
    projection_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_max(self) -> int:
        return self.iterates.shape[0] - 1

    @property
    def errors(self) -> np.ndarray:
        return self.iterates - self.theta_star

    @property
    def error_norm_sq(self) -> np.ndarray:
        e = self.errors
        return np.sum(e * e, axis=1)

    def noise_before(self, k: int) -> np.ndarray:
        """X_{k-1}, the last noise value known before step k."""
        return self.pre_state if k == 0 else self.noise[k - 1]

    def projection_after(self, k: int) -> bool:
        return bool(np.any(self.projection_steps >= k))

    def to_csv(self, path):
        p = self.iterates.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k"] + [f"theta_{i + 1}" for i in range(p)] + ["error_norm_sq"])
            for k, (row, e2) in enumerate(zip(self.iterates, self.error_norm_sq)):
                w.writerow([k] + [repr(float(v)) for v in row] + [repr(float(e2))])


@dataclass
class Block:
    """Consecutive steps k0 .. k0+b-1 of a batch; arrays have leading shape (R, b)."""

    k0: int
    theta: np.ndarray
    theta_next: np.ndarray
    x: np.ndarray
    x_prev: np.ndarray
    gap: np.ndarray             # C(theta_k) - C(theta*)

    @property
    def steps(self) -> np.ndarray:
        return self.k0 + np.arange(self.theta.shape[1])


class Monitor:
    """Streaming per-replication statistic; results are arrays with leading axis R."""

    name = "monitor"

    def start(self, config: RunConfig, R: int):
        pass

    def update(self, block: Block):
        raise NotImplementedError

    def result(self) -> dict:
        raise NotImplementedError


def _simulate(config: RunConfig, reps: Sequence[int], n_steps: int, on_block, record_hits=False):
    obj, pset, c0 = config.objective, config.projection, config.c0
    R = len(reps)
    batch = NoiseBatch(config.noise, [replication_seed(config.seed, i) for i in reps])
    theta = np.broadcast_to(config.theta0, (R, obj.p)).copy()
    x_last = batch.pre_state
    pre_state = x_last.copy()
    hits = np.zeros(R, dtype=np.int64)
    last_hit = np.full(R, -1, dtype=np.int64)
    hit_steps = [[] for _ in range(R)] if record_hits else None
    c_star = cost(obj, obj.theta_star)
    for k0 in range(0, n_steps, BLOCK):
        b = min(BLOCK, n_steps - k0)
        X = batch.take(b)
        thetas = np.empty((R, b + 1, obj.p))
        thetas[:, 0] = theta
        for j in range(b):
            k = k0 + j
            cand = theta - (c0 / (k + 1.0)) * noisy_grad(obj, theta, X[:, j])
            theta = pset.project(cand)
            act = np.any(theta != cand, axis=1)
            if act.any():
                hits += act
                last_hit[act] = k
                if hit_steps is not None:
                    for r in np.flatnonzero(act):
                        hit_steps[r].append(k)
            thetas[:, j + 1] = theta
        prev = np.concatenate([x_last[:, None], X[:, :-1]], axis=1)
        x_last = X[:, -1]
        gap = cost(obj, thetas[:, :-1]) - c_star
        on_block(Block(k0, thetas[:, :-1], thetas[:, 1:], X, prev, gap))
    return pre_state, hits, last_hit, hit_steps


def run(config: RunConfig, replication: int = 0) -> Trajectory:
    """Run one replication, keeping every iterate and noise value."""
    parts_theta, parts_x = [], []

    def keep(block):
        parts_theta.append(block.theta[0])
        parts_x.append(block.x[0])
        last[0] = block.theta_next[0, -1]

    last = [None]
    pre, _, _, hit_steps = _simulate(config, [replication], config.n_max, keep, record_hits=True)
    iterates = np.vstack(parts_theta + [last[0][None]])
    traj = Trajectory(
        iterates=iterates,
        noise=np.vstack(parts_x),
        pre_state=pre[0],
        theta_star=config.objective.theta_star,
        seed=replication_seed(config.seed, replication),
        projection_steps=np.asarray(hit_steps[0], dtype=int),
    )
    _warn_projection(config, traj.projection_steps)
    return traj


def _warn_projection(config, steps):
    if len(steps) == 0:
        return
    from .finite_sample import constants_for

    kp = constants_for(config).kappa_plus
    late = np.asarray(steps)[np.asarray(steps) >= kp]
    if late.size:
        log.warning("projection active at %d step(s) after kappa_plus=%d (last at k=%d); "
                    "G may be too small", late.size, kp, int(late.max()))


def _split(R, workers):
    workers = max(1, min(int(workers), R))
    edges = np.linspace(0, R, workers + 1).round().astype(int)
    return [list(range(a, b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _run_group(config, reps):
    return [run(config, i) for i in reps]


def run_ensemble(config: RunConfig, workers: int = 1) -> list:
    """All replications as full trajectories (use for modest n_max * R)."""
    groups = _split(config.replications, workers)
    if len(groups) == 1:
        return _run_group(config, groups[0])
    with ProcessPoolExecutor(len(groups)) as ex:
        parts = list(ex.map(_run_group, [config] * len(groups), groups))
    return [t for part in parts for t in part]


@dataclass(eq=False)
class Ensemble:
    """Recorded statistics of a streamed ensemble.

    For every recorded step k (sorted ``steps``) it holds theta_k,
    theta_{k+1}, X_k, X_{k-1} and the cumulative cost gap
    sum_{j<=k} [C(theta_j) - C(theta*)] of every replication.
    """

    config: RunConfig
    steps: np.ndarray
    theta: np.ndarray           # (R, S, p)
    theta_next: np.ndarray
    x: np.ndarray
    x_prev: np.ndarray
    cumgap: np.ndarray          # (R, S)
    projection_count: np.ndarray
    last_projection: np.ndarray
    monitors: dict = field(default_factory=dict)

    @property
    def replications(self) -> int:
        return self.theta.shape[0]

    def index(self, n: int) -> int:
        i = int(np.searchsorted(self.steps, n))
        if i >= len(self.steps) or self.steps[i] != n:
            raise KeyError(f"step {n} was not recorded")
        return i

    def errors_at(self, n: int) -> np.ndarray:
        return self.theta[:, self.index(n)] - self.config.objective.theta_star

    def state_at(self, n: int):
        """(theta_n, theta_{n+1}, X_n, X_{n-1}) for every replication."""
        i = self.index(n)
        return self.theta[:, i], self.theta_next[:, i], self.x[:, i], self.x_prev[:, i]

    def cumgap_at(self, n: int) -> np.ndarray:
        return self.cumgap[:, self.index(n)]

    @classmethod
    def from_trajectories(cls, config: RunConfig, trajectories: Sequence[Trajectory], steps=None):
        n_max = trajectories[0].n_max
        steps = np.arange(n_max) if steps is None else np.unique(np.asarray(steps, dtype=int))
        if steps.max() >= n_max:
            raise ValueError("recorded steps must be < n_max (theta_{k+1} and X_k are needed)")
        obj = config.objective
        c_star = cost(obj, obj.theta_star)
        th = np.stack([t.iterates for t in trajectories])
        xs = np.stack([t.noise for t in trajectories])
        pre = np.stack([t.pre_state for t in trajectories])
        xprev = np.concatenate([pre[:, None], xs[:, :-1]], axis=1)
        gaps = cost(obj, th[:, :n_max]) - c_star
        cum = np.cumsum(gaps, axis=1)
        counts = np.array([len(t.projection_steps) for t in trajectories])
        lasts = np.array([t.projection_steps.max() if len(t.projection_steps) else -1
                          for t in trajectories])
        return cls(config, steps, th[:, steps], th[:, steps + 1], xs[:, steps], xprev[:, steps],
                   cum[:, steps], counts, lasts)


class _Recorder:
    def __init__(self, steps, R, p):
        self.steps = steps
        S = len(steps)
        self.theta = np.empty((R, S, p))
        self.theta_next = np.empty((R, S, p))
        self.x = np.empty((R, S, p))
        self.x_prev = np.empty((R, S, p))
        self.cumgap = np.empty((R, S))
        self.carry = np.zeros(R)

    def __call__(self, block: Block):
        cum = self.carry[:, None] + np.cumsum(block.gap, axis=1)
        self.carry = cum[:, -1]
        lo, hi = block.k0, block.k0 + block.theta.shape[1]
        sel = np.flatnonzero((self.steps >= lo) & (self.steps < hi))
        if sel.size:
            j = self.steps[sel] - lo
            self.theta[:, sel] = block.theta[:, j]
            self.theta_next[:, sel] = block.theta_next[:, j]
            self.x[:, sel] = block.x[:, j]
            self.x_prev[:, sel] = block.x_prev[:, j]
            self.cumgap[:, sel] = cum[:, j]


def _stream_group(config, reps, steps, monitors):
    monitors = [copy.deepcopy(m) for m in monitors]
    for m in monitors:
        m.start(config, len(reps))
    rec = _Recorder(steps, len(reps), config.p)

    def on_block(block):
        rec(block)
        for m in monitors:
            m.update(block)

    _, hits, last_hit, _ = _simulate(config, reps, config.n_max + 1, on_block)
    return rec, hits, last_hit, {m.name: m.result() for m in monitors}


def simulate_ensemble(config: RunConfig, steps=(), monitors: Sequence[Monitor] = (),
                      workers: int = 1, dense_prefix: int = 0) -> Ensemble:
    """Stream all replications without storing full paths.

    Steps k = 0 .. n_max are observed (one extra recursion step is taken so
    that theta_{n_max+1} exists for drift estimates at k = n_max).  The
    recorded grid is ``steps`` together with 0 .. dense_prefix-1.
    """
    steps = np.unique(np.concatenate([np.asarray(steps, dtype=int).ravel(),
                                      np.arange(dense_prefix, dtype=int)]))
    if steps.size and (steps.min() < 0 or steps.max() > config.n_max):
        raise ValueError("recorded steps must lie in [0, n_max]")
    groups = _split(config.replications, workers)
    if len(groups) == 1:
        parts = [_stream_group(config, groups[0], steps, monitors)]
    else:
        with ProcessPoolExecutor(len(groups)) as ex:
            parts = list(ex.map(_stream_group, [config] * len(groups), groups,
                                [steps] * len(groups), [list(monitors)] * len(groups)))
    cat = lambda attr: np.concatenate([getattr(p[0], attr) for p in parts])
    mon = {}
    for name in parts[0][3]:
        mon[name] = {key: np.concatenate([p[3][name][key] for p in parts])
                     for key in parts[0][3][name]}
    ens = Ensemble(config, steps, cat("theta"), cat("theta_next"), cat("x"), cat("x_prev"),
                   cat("cumgap"), np.concatenate([p[1] for p in parts]),
                   np.concatenate([p[2] for p in parts]), mon)
    return ens

"""Locally quadratic objectives and the linear noisy-gradient oracle.

C(theta) = 1/2 e'Be + D(theta) with e = theta - theta_star and the power
perturbation D(theta) = K_D/(2+alpha) ||e||^(2+alpha), whose gradient
K_D ||e||^alpha e attains ||grad D|| = K_D ||e||^(1+alpha) exactly.

The noisy gradient is grad C(theta) + f0(theta) x.  Every function accepts a
single point of shape (p,) or a batch of shape (..., p).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._linalg import dot, matvec, norm

GAIN_KINDS = ("constant", "state", "matrix")


@dataclass(frozen=True, eq=False)
class Gain:
    """Noise gain f0.

    ``constant``: sigma * I.  ``state``: (1 + min(||theta||, cap)) * I.
    ``matrix``: a fixed p x p matrix.
    """

    kind: str = "constant"
    sigma: float = 1.0
    cap: float = 1.0
    matrix: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in GAIN_KINDS:
            raise ValueError(f"unknown gain kind {self.kind!r}")
        if self.kind == "matrix":
            if self.matrix is None:
                raise ValueError("matrix gain needs a matrix")
            m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)
        if self.kind == "state" and not self.cap > 0:
            raise ValueError("state gain cap must be positive")

    @property
    def scalar(self) -> bool:
        return self.kind != "matrix"

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of theta -> f0(theta) in operator norm."""
        return 1.0 if self.kind == "state" else 0.0

    @property
    def sup_norm(self) -> float:
        if self.kind == "constant":
            return abs(self.sigma)
        if self.kind == "state":
            return 1.0 + self.cap
        return float(np.linalg.norm(self.matrix, 2))

    def scale(self, theta):
        """Scalar gain g(theta) (scalar kinds only), shape theta.shape[:-1]."""
        theta = np.asarray(theta, dtype=float)
        if self.kind == "constant":
            return np.full(theta.shape[:-1], float(self.sigma))
        if self.kind == "state":
            return 1.0 + np.minimum(norm(theta), self.cap)
        raise TypeError("matrix gain has no scalar form")

    def matrix_at(self, theta) -> np.ndarray:
        if self.kind == "matrix":
            return np.array(self.matrix)
        p = np.shape(theta)[-1]
        return float(self.scale(theta)) * np.eye(p)

    def apply(self, theta, x):
        """f0(theta) x, batched."""
        if self.kind == "matrix":
            return matvec(self.matrix, x)
        if self.kind == "constant":
            return self.sigma * np.asarray(x, dtype=float)
        return self.scale(theta)[..., None] * x


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    B: np.ndarray
    theta_star: np.ndarray
    K_D: float = 0.0
    alpha: float = 1.0
    gain: Gain = field(default_factory=Gain)

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        ts = np.atleast_1d(np.asarray(self.theta_star, dtype=float))
        if B.shape != (ts.size, ts.size):
            raise ValueError(f"B has shape {B.shape} but theta_star has dimension {ts.size}")
        if not np.allclose(B, B.T, rtol=0, atol=1e-12 * max(1.0, np.abs(B).max())):
            raise ValueError("A4 requires B symmetric")
        if np.linalg.eigvalsh(B).min() <= 0:
            raise ValueError("A4 requires B positive definite")
        if self.K_D < 0:
            raise ValueError("perturbation constant K_D must be nonnegative")
        if self.K_D > 0 and not self.alpha > 0:
            raise ValueError("perturbation exponent alpha must be positive")
        if self.gain.kind == "matrix" and self.gain.matrix.shape != B.shape:
            raise ValueError("matrix gain must be p x p")
        B.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "theta_star", ts)
        if np.linalg.norm(self.gain.matrix_at(ts)) == 0:
            raise ValueError("A5 requires f0(theta_star) != 0")

    @property
    def p(self) -> int:
        return self.theta_star.size

    @property
    def lam(self) -> float:
        """Smallest eigenvalue of B."""
        return float(np.linalg.eigvalsh(self.B).min())

    @property
    def B_norm(self) -> float:
        return float(np.linalg.eigvalsh(self.B).max())

    def convex_on(self, diameter: float) -> bool:
        """Sufficient condition for A3 and convexity on a set of given diameter."""
        return self.K_D == 0 or self.K_D * diameter ** self.alpha < self.lam


def cost(spec: ObjectiveSpec, theta):
    e = np.asarray(theta, dtype=float) - spec.theta_star
    out = 0.5 * dot(e, matvec(spec.B, e))
    if spec.K_D:
        out = out + spec.K_D / (2.0 + spec.alpha) * norm(e) ** (2.0 + spec.alpha)
    return out


def grad(spec: ObjectiveSpec, theta):
    e = np.asarray(theta, dtype=float) - spec.theta_star
    out = matvec(spec.B, e)
    if spec.K_D:
        out = out + (spec.K_D * norm(e) ** spec.alpha)[..., None] * e
    return out


def noisy_grad(spec: ObjectiveSpec, theta, x):
    """grad C(theta) + f0(theta) x."""
    return grad(spec, theta) + spec.gain.apply(theta, x)


def lipschitz_bound(spec: ObjectiveSpec, theta, x):
    """L(x) with ||noisy_grad(theta,x) - noisy_grad(0,x)|| <= L(x) ||theta||.

    On the segment from 0 to theta the Jacobian of grad D has norm at most
    K_D (1+alpha) (||theta|| + ||theta_star||)^alpha; the gain contributes
    its Lipschitz constant times ||x||.
    """
    r = norm(np.asarray(theta, dtype=float)) + float(np.linalg.norm(spec.theta_star))
    out = spec.B_norm + spec.K_D * (1.0 + spec.alpha) * r ** spec.alpha
    return out + spec.gain.lipschitz * norm(np.asarray(x, dtype=float))

"""Small batch-shape-independent linear algebra helpers.

Reductions in numpy (``@``, ``sum``) may pick different kernels depending on
the leading batch shape, which breaks bitwise agreement between a single
replication and the same replication run inside a batch.  Everything in the
simulation hot path goes through these helpers instead; they only use
elementwise operations with a fixed accumulation order over the (small)
state dimension.
"""

import numpy as np


def matvec(M, x):
    """Return ``M @ x`` over the last axis of ``x`` with fixed summation order."""
    M = np.asarray(M, dtype=float)
    x = np.asarray(x, dtype=float)
    out = x[..., 0:1] * M[:, 0]
    for j in range(1, M.shape[1]):
        out = out + x[..., j:j + 1] * M[:, j]
    return out


def dot(u, v):
    """Inner product over the last axis with fixed summation order."""
    out = u[..., 0] * v[..., 0]
    for j in range(1, u.shape[-1]):
        out = out + u[..., j] * v[..., j]
    return out


def norm(v):
    return np.sqrt(dot(v, v))


def psd_sqrt(S, name="matrix", tol=1e-12):
    """Symmetric square root of a PSD matrix; raises on asymmetry or a negative eigenvalue."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S))))
    if not np.allclose(S, S.T, atol=tol * scale, rtol=0.0):
        raise ValueError(f"{name} must be symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w.min() < -tol * scale:
        raise ValueError(f"{name} must be positive semidefinite (min eigenvalue {w.min():.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A))))

"""Jittered Cholesky factorisation and low-rank-plus-noise identities.

All solves go through a Cholesky factor and triangular solves.  The
low-rank-plus-noise matrix ``Q = K_mn^T K_mm^{-1} K_mn + gamma2 I`` is never
formed; its inverse and determinant are reduced to m x m factors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solve_triangular

JITTER_STEPS = 9
JITTER_FACTOR = 4.0
RELATIVE_JITTER = 1e-10


class SingularMatrixError(LinAlgError):
    """Raised when a matrix cannot be factorised at any jitter level."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class CholFactor:
    lower: np.ndarray
    jitter_used: float = 0.0

    @property
    def size(self):
        return self.lower.shape[0]

    def solve(self, b):
        """Solve ``(A + jitter I) x = b``."""
        if self.size == 0:
            return np.zeros_like(np.asarray(b, dtype=float))
        z = solve_triangular(self.lower, b, lower=True, check_finite=False)
        return solve_triangular(self.lower, z, lower=True, trans="T", check_finite=False)

    def half_solve(self, b):
        """Solve ``L x = b``."""
        if self.size == 0:
            return np.zeros((0,) + np.shape(b)[1:])
        return solve_triangular(self.lower, b, lower=True, check_finite=False)


def cholesky_psd(A, base_jitter=None) -> CholFactor:
    """Cholesky factor of a symmetric PSD matrix with an escalating jitter.

    Tries jitter 0 first, then ``base_jitter * 4**k`` for k = 0..8.  The
    default base is ``1e-10 * trace(A) / n``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    if n == 0:
        return CholFactor(np.zeros((0, 0)), 0.0)
    if not np.all(np.isfinite(A)):
        raise SingularMatrixError("matrix has non-finite entries", jitter=0.0)
    A = 0.5 * (A + A.T)
    if base_jitter is None:
        base_jitter = RELATIVE_JITTER * max(np.trace(A) / n, np.finfo(float).tiny)
    ladder = [0.0] + [base_jitter * JITTER_FACTOR**k for k in range(JITTER_STEPS)]
    diag = np.diag_indices(n)
    for jitter in ladder:
        if jitter:
            B = A.copy()
            B[diag] += jitter
        else:
            B = A
        try:
            lower = np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(lower) > 0):
            return CholFactor(lower, jitter)
    raise SingularMatrixError(
        f"Cholesky failed for all jitter levels up to {ladder[-1]:.3e}", jitter=ladder[-1]
    )


def logdet_from_chol(f: CholFactor) -> float:
    return float(2.0 * np.sum(np.log(np.diag(f.lower))))


class LowRankPlusNoise:
    """Factored form of ``Q = P^T A^{-1} P + gamma2 I`` with A m x m, P m x n.

    With ``A = L L^T`` and ``V = L^{-1} P`` one has ``Q = V^T V + gamma2 I``, so
    ``Q^{-1} = gamma2^{-1} I - gamma2^{-2} V^T B^{-1} V`` with
    ``B = I + gamma2^{-1} V V^T`` and ``log det Q = n log gamma2 + log det B``.
    """

    def __init__(self, K_mm, K_mn, gamma2: float, chol_A: CholFactor | None = None):
        if not gamma2 > 0:
            raise ValueError(f"gamma2 must be positive, got {gamma2}")
        K_mn = np.asarray(K_mn, dtype=float)
        self.gamma2 = float(gamma2)
        self.m, self.n = K_mn.shape
        self.chol_A = cholesky_psd(K_mm) if chol_A is None else chol_A
        if self.m:
            self.V = self.chol_A.half_solve(K_mn)
            B = np.eye(self.m) + (self.V @ self.V.T) / self.gamma2
            self.chol_B = cholesky_psd(B, base_jitter=1e-12)
        else:
            self.V = np.zeros((0, self.n))
            self.chol_B = CholFactor(np.zeros((0, 0)))

    def logdet(self) -> float:
        return self.n * np.log(self.gamma2) + (logdet_from_chol(self.chol_B) if self.m else 0.0)

    def solve(self, b):
        """``Q^{-1} b`` for a vector or a matrix of columns."""
        b = np.asarray(b, dtype=float)
        out = b / self.gamma2
        if self.m:
            out = out - (self.V.T @ self.chol_B.solve(self.V @ b)) / self.gamma2**2
        return out

    def quadform(self, y) -> float:
        y = np.asarray(y, dtype=float)
        val = float(y @ y) / self.gamma2
        if self.m:
            z = self.chol_B.half_solve(self.V @ y)
            val -= float(z @ z) / self.gamma2**2
        return val

    def nystrom_diag(self) -> np.ndarray:
        """Diagonal of ``P^T A^{-1} P``."""
        return np.einsum("ij,ij->j", self.V, self.V)


def woodbury_solve_logdet(K_mm, K_mn, gamma2, y):
    """Return ``(y^T Q^{-1} y, log det Q)`` using only m x m factorisations."""
    K_mn = np.asarray(K_mn, dtype=float)
    y = np.asarray(y, dtype=float)
    if K_mn.shape[1] != y.shape[0]:
        raise ValueError(f"K_mn has {K_mn.shape[1]} columns but y has length {y.shape[0]}")
    q = LowRankPlusNoise(np.asarray(K_mm, dtype=float).reshape(K_mn.shape[0], K_mn.shape[0]), K_mn, gamma2)
    return q.quadform(y), q.logdet()

"""Sparse GP regression with inducing points chosen among the observations.

:class:`BoundState` holds the factorisation of the variational bound for one
inducing set and one kernel and scores single-point additions and removals
with rank-one updates, O(n m) per candidate instead of O(n m^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .kernels import IndexKernel, LayerInputs, as_index_kernel, as_points
from .numerics import LowRankPlusNoise, cholesky_psd

LOG_2PI = math.log(2.0 * math.pi)
# candidates are scored in chunks so that no |J| x n block grows unbounded
CANDIDATE_CHUNK = 256


@dataclass(frozen=True)
class InducingSet:
    """Ordered subset of observation indices."""

    indices: tuple
    n_total: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(set(idx)) != len(idx):
            raise ValueError("inducing indices must be distinct")
        if any(i < 0 or i >= self.n_total for i in idx):
            raise ValueError(f"inducing indices must lie in [0, {self.n_total})")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    @property
    def m(self):
        return len(self.indices)

    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int)

    def add(self, z: int) -> "InducingSet":
        return InducingSet(self.indices + (int(z),), self.n_total)

    def remove(self, z: int) -> "InducingSet":
        return InducingSet(tuple(i for i in self.indices if i != z), self.n_total)

    def complement(self) -> np.ndarray:
        mask = np.ones(self.n_total, dtype=bool)
        mask[list(self.indices)] = False
        return np.flatnonzero(mask)

    @classmethod
    def full(cls, n):
        return cls(tuple(range(n)), n)

    @classmethod
    def empty(cls, n):
        return cls((), n)


def _as_inducing(M, n) -> InducingSet:
    if isinstance(M, InducingSet):
        if M.n_total != n:
            raise ValueError(f"inducing set is over {M.n_total} points, data has {n}")
        return M
    return InducingSet(tuple(M), n)


class BoundState:
    """Variational bound for one (kernel, inducing set) pair.

    ``value`` is the bound itself; ``add_values`` and ``remove_values`` give
    the bound after adding each candidate or removing each member.
    """

    def __init__(self, kernel: IndexKernel, y, gamma2: float, M: InducingSet):
        self.kernel = kernel
        self.y = np.asarray(y, dtype=float)
        self.gamma2 = float(gamma2)
        self.M = M
        n = kernel.n
        self.n = n
        # factor in sorted order so the value depends on the set, not its order
        self._order = np.argsort(M.array(), kind="stable")
        idx = self.idx = M.array()[self._order]
        self.kdiag = kernel.diag()
        if M.m:
            self.P = kernel.block(idx)
            self.chol_A = cholesky_psd(self.P[:, idx])
        else:
            self.P = np.zeros((0, n))
            self.chol_A = cholesky_psd(np.zeros((0, 0)))
        self.q = LowRankPlusNoise(None, self.P, self.gamma2, chol_A=self.chol_A)
        self.quad = self.q.quadform(self.y)
        self.logdet = self.q.logdet()
        self.resid = self.kdiag - self.q.nystrom_diag()
        self.outside = np.ones(n, dtype=bool)
        self.outside[idx] = False
        self.trace = float(self.resid[self.outside].sum())
        self.Qinv_y = self.q.solve(self.y)

    def _assemble(self, quad, logdet, trace):
        return -0.5 * quad - 0.5 * logdet - 0.5 * trace / self.gamma2 - 0.5 * self.n * LOG_2PI

    @property
    def value(self) -> float:
        return float(self._assemble(self.quad, self.logdet, self.trace))

    def _qinv_rows(self, W):
        # rows of W^T Q^{-1} via the factored inverse
        return self.q.solve(W.T).T

    def add_values(self, candidates) -> np.ndarray:
        """Bound after adding each candidate (which must lie outside M)."""
        cand = np.asarray(candidates, dtype=int)
        out = np.empty(len(cand))
        for start in range(0, len(cand), CANDIDATE_CHUNK):
            chunk = cand[start:start + CANDIDATE_CHUNK]
            out[start:start + len(chunk)] = self._add_chunk(chunk)
        return out

    def _add_chunk(self, J):
        PJ = self.kernel.block(J)
        kzz = self.kdiag[J] + self.chol_A.jitter_used
        if self.M.m:
            l = self.chol_A.half_solve(PJ[:, self.idx].T)
            delta2 = kzz - np.einsum("ij,ij->j", l, l)
            W = PJ - l.T @ self.q.V
        else:
            delta2 = kzz
            W = PJ
        ok = delta2 > 1e-12 * np.maximum(kzz, 1e-300)
        delta = np.sqrt(np.where(ok, delta2, 1.0))
        W = W / delta[:, None]
        QW = self._qinv_rows(W)
        s = np.einsum("ij,ij->i", W, QW)
        t = QW @ self.y
        quad = self.quad - t * t / (1.0 + s)
        logdet = self.logdet + np.log1p(s)
        W2 = W * W
        outside_sq = W2[:, self.outside].sum(axis=1)
        rows = np.arange(len(J))
        trace = self.trace - self.resid[J] - (outside_sq - W2[rows, J])
        vals = self._assemble(quad, logdet, trace)
        vals[~ok | ~np.isfinite(vals)] = -np.inf
        return vals

    def remove_values(self) -> np.ndarray:
        """Bound after removing each member of M, in the order of ``M.indices``."""
        m = self.M.m
        if m == 0:
            return np.zeros(0)
        idx = self.idx
        Linv = solve_triangular(self.chol_A.lower, np.eye(m), lower=True, check_finite=False)
        g = np.einsum("ij,ij->j", Linv, Linv)
        W = (self.q.V.T @ Linv).T / np.sqrt(g)[:, None]
        QW = self._qinv_rows(W)
        s = np.einsum("ij,ij->i", W, QW)
        one_minus = np.maximum(1.0 - s, 1e-300)
        t = QW @ self.y
        quad = self.quad + t * t / one_minus
        logdet = self.logdet + np.log(one_minus)
        W2 = W * W
        rows = np.arange(m)
        trace = (
            self.trace
            + W2[:, self.outside].sum(axis=1)
            + self.resid[idx]
            + W2[rows, idx]
        )
        vals = self._assemble(quad, logdet, trace)
        vals[~np.isfinite(vals)] = -np.inf
        out = np.empty(m)
        out[self._order] = vals
        return out


def variational_bound(M, X, y, kernel, gamma2: float) -> float:
    """Titsias bound including the -(n/2) log 2 pi constant.

    ``kernel`` is a :class:`KernelSpec` (evaluated at ``X``) or an
    :class:`IndexKernel`, in which case ``X`` may be None.
    """
    if not gamma2 > 0:
        raise ValueError(f"gamma2 must be positive, got {gamma2}")
    y = np.asarray(y, dtype=float).reshape(-1)
    K = as_index_kernel(kernel, X)
    return BoundState(K, y, gamma2, _as_inducing(M, len(y))).value


@dataclass
class SparsePosterior:
    kernel: IndexKernel
    M: InducingSet
    gamma2: float
    q: LowRankPlusNoise
    weights: np.ndarray  # B^{-1} V y / gamma2, in whitened m-space

    def predict_from_cross(self, K_mstar, k_star_diag=None, K_starstar=None):
        """Mean and covariance from the m x p cross-covariance to new points.

        Pass ``K_starstar`` for the full covariance or ``k_star_diag`` for the
        pointwise variance only.
        """
        A_half = self.q.chol_A.half_solve(K_mstar)  # L_A^{-1} K_m(x)
        mean = A_half.T @ self.weights
        Bh = self.q.chol_B.half_solve(A_half)
        if K_starstar is not None:
            cov = K_starstar - A_half.T @ A_half + Bh.T @ Bh
            return mean, 0.5 * (cov + cov.T)
        var = k_star_diag - np.einsum("ij,ij->j", A_half, A_half) + np.einsum("ij,ij->j", Bh, Bh)
        return mean, var


def fit_sparse_posterior(kernel: IndexKernel, M: InducingSet, y, gamma2: float) -> SparsePosterior:
    if M.m < 1:
        raise ValueError("the sparse posterior needs at least one inducing point")
    y = np.asarray(y, dtype=float)
    idx = M.array()
    P = kernel.block(idx)
    chol_A = cholesky_psd(P[:, idx])
    q = LowRankPlusNoise(None, P, gamma2, chol_A=chol_A)
    weights = q.chol_B.solve(q.V @ y) / gamma2
    return SparsePosterior(kernel, M, float(gamma2), q, weights)


def sparse_posterior(M, X, y, kernel, gamma2: float, Xstar, full_cov: bool = True):
    """Sparse predictive mean and covariance of the latent function at ``Xstar``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    K = as_index_kernel(kernel, X)
    M = _as_inducing(M, len(y))
    post = fit_sparse_posterior(K, M, y, gamma2)
    star = LayerInputs(as_points(Xstar)) if not isinstance(Xstar, LayerInputs) else Xstar
    K_ms = K.cross(M.array(), star)
    if full_cov:
        from .kernels import layer_covariance

        return post.predict_from_cross(K_ms, K_starstar=layer_covariance(K.spec, star, star))
    return post.predict_from_cross(K_ms, k_star_diag=np.full(len(star), K.spec.sigma2))


def _argmax_smallest(values, labels):
    """Index of the maximum; ties go to the smallest label."""
    values = np.where(np.isnan(values), -np.inf, values)
    best = values.max()
    tied = np.flatnonzero(values == best)
    return int(tied[np.argmin(np.asarray(labels)[tied])])


def mean_bound_states(kernels: Sequence[IndexKernel], y, gamma2, M) -> list:
    return [BoundState(k, y, gamma2, M) for k in kernels]


def greedy_select_multi(
    kernels: Sequence[IndexKernel], y, gamma2: float, m: int, J_size: int, rng,
    start: Iterable[int] = (),
) -> InducingSet:
    """Greedy forward selection maximising the bound averaged over ``kernels``.

    Each step draws a fresh candidate set uniformly without replacement from
    the unselected indices and adds the best candidate.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    if m > n:
        raise ValueError(f"cannot select {m} inducing points from {n} observations")
    if J_size < 1:
        raise ValueError("candidate set size must be at least 1")
    M = InducingSet(tuple(start), n)
    while M.m < m:
        states = mean_bound_states(kernels, y, gamma2, M)
        remaining = M.complement()
        size = min(J_size, len(remaining))
        J = np.sort(rng.choice(remaining, size=size, replace=False)) if size < len(remaining) else remaining
        scores = np.mean([s.add_values(J) for s in states], axis=0)
        M = M.add(int(J[_argmax_smallest(scores, J)]))
    return M


def greedy_select(X, y, kernel, gamma2: float, m: int, J_size: int, rng,
                  start: Iterable[int] = ()) -> InducingSet:
    y = np.asarray(y, dtype=float).reshape(-1)
    return greedy_select_multi([as_index_kernel(kernel, X)], y, gamma2, m, J_size, rng, start)

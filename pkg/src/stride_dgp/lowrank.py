"""Hidden-layer bases: full Cholesky, adaptive cross approximation, fully sparse.

A basis fixes how whitened coordinates ``xi`` map to hidden-layer values.
Layers are realised bottom-up because each layer's covariance depends on the
layer below.  For a pivot set ``I`` with ``K_II + j I = C C^T`` the map is

    values = K_nI C^{-T} xi,   values[I] = C xi,

so the full basis is the special case ``I = [n]`` and the fully sparse basis
samples at the inducing rows only and interpolates the top hidden layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from .deep_gp import Arch, DeepGPConfig, HiddenState
from .kernels import IndexKernel, KernelSpec, as_points, kernel_matrix, layer_covariance
from .numerics import cholesky_psd
from .sparse import InducingSet


@dataclass(frozen=True)
class FullBasis:
    n: int

    @property
    def rank(self):
        return self.n

    def rows(self) -> np.ndarray:
        return np.arange(self.n)


@dataclass(frozen=True)
class AcaBasis:
    """Pivot rows shared by every hidden layer (Nystrom approximation)."""

    indices: tuple
    n: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(set(idx)) != len(idx) or any(i < 0 or i >= self.n for i in idx):
            raise ValueError("ACA indices must be distinct rows in [0, n)")

    @property
    def rank(self):
        return len(self.indices)

    def rows(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int)


@dataclass(frozen=True)
class SparseBasis:
    """Hidden layers live on the inducing rows; the top hidden layer is
    interpolated to all rows by stationary GP regression."""

    inducing: InducingSet
    interp_kernel: KernelSpec
    interp_gamma2: float

    @property
    def rank(self):
        return self.inducing.m

    def rows(self) -> np.ndarray:
        return self.inducing.array()


def aca_indices(column: Callable[[int], np.ndarray], diag, max_rank: int, tol: float = 0.0):
    """Greedy diagonal-pivoted partial Cholesky.

    Returns ``(indices, residual_diagonal)``.  Stops after ``max_rank`` pivots
    or once the largest residual is at most ``tol`` times the largest
    initial diagonal entry.
    """
    d = np.array(diag, dtype=float)
    n = len(d)
    max_rank = min(int(max_rank), n)
    F = np.zeros((n, max_rank))
    d0 = d.max() if n else 0.0
    indices = []
    for k in range(max_rank):
        i = int(np.argmax(d))
        if d[i] <= max(tol * d0, 0.0) or d[i] <= 0:
            break
        col = np.asarray(column(i), dtype=float) - F[:, :k] @ F[i, :k]
        F[:, k] = col / np.sqrt(d[i])
        d -= F[:, k] ** 2
        d[i] = 0.0
        d[indices] = 0.0
        np.maximum(d, 0.0, out=d)
        indices.append(i)
    return indices, d


def aca_basis_for(kernel: IndexKernel, rank: int, tol: float = 0.0) -> AcaBasis:
    idx, _ = aca_indices(lambda j: kernel.block([j])[0], kernel.diag(), rank, tol)
    return AcaBasis(tuple(idx), kernel.n)


def _interp_mean(basis: SparseBasis, X, v_M, Xq):
    """Stationary GP regression mean of ``v_M`` (values at the inducing rows)."""
    XM = as_points(X)[basis.inducing.array()]
    K = kernel_matrix(basis.interp_kernel, XM, XM)
    K[np.diag_indices_from(K)] += basis.interp_gamma2
    alpha = cholesky_psd(K).solve(v_M)
    return kernel_matrix(basis.interp_kernel, as_points(Xq), XM) @ alpha


def _pivot_map(config, level, inputs, rows, full):
    """Factor and cross-covariance for one level on the pivot rows."""
    spec = config.level_spec(level)
    piv = inputs.take(rows)
    if full:
        K_nI = None
        K_II = layer_covariance(spec, inputs, inputs)
    else:
        K_nI = layer_covariance(spec, inputs, piv)
        K_II = K_nI[rows]
    return cholesky_psd(K_II), K_nI


def _realize_layer(chol, K_nI, rows, xi):
    if K_nI is None:
        return chol.lower @ xi
    W = solve_triangular(chol.lower, xi, lower=True, trans="T", check_finite=False)
    v = K_nI @ W
    v[rows] = chol.lower @ xi
    return v


def _run(basis, config: DeepGPConfig, X, xi=None, targets=None, cache=None) -> HiddenState:
    """Realise (``xi`` given) or whiten (``targets`` given at all rows).

    The bottom level depends only on ``X`` and the basis, so its factor can
    be kept in ``cache`` (a dict owned by the caller, fixed X and config).
    """
    X = as_points(X)
    L = config.num_layers
    sparse = isinstance(basis, SparseBasis)
    full = isinstance(basis, FullBasis)
    rows = basis.rows()
    X_eval = X[rows] if sparse else X
    local_rows = np.arange(len(rows)) if sparse else rows
    out_xi, out_vals = [], []
    lower = None
    for level in range(L):
        hit = cache.get(id(basis)) if (cache is not None and level == 0) else None
        if hit is not None and hit[0] is basis:
            chol, K_nI = hit[1]
        else:
            inputs = config.level_inputs(level, X_eval, lower)
            chol, K_nI = _pivot_map(config, level, inputs, local_rows, full or sparse)
            if cache is not None and level == 0:
                cache[id(basis)] = (basis, (chol, K_nI))
        if xi is None:
            target = np.asarray(targets[level], dtype=float).reshape(len(X), -1)[rows]
            layer_xi = chol.half_solve(target)
        else:
            layer_xi = np.asarray(xi[level], dtype=float)
            layer_xi = layer_xi.reshape(len(rows), -1)
        v = _realize_layer(chol, K_nI, local_rows, layer_xi)
        out_xi.append(layer_xi)
        out_vals.append(v)
        lower = v
    top = _interp_mean(basis, X, out_vals[-1], X) if sparse else out_vals[-1]
    return HiddenState(tuple(out_xi), tuple(out_vals), top, basis)


def realize(xi, basis, config: DeepGPConfig, X, cache=None) -> HiddenState:
    """Hidden-layer values for whitened coordinates ``xi`` under ``basis``."""
    if len(xi) != config.num_layers:
        raise ValueError(f"expected {config.num_layers} layers of coordinates, got {len(xi)}")
    return _run(basis, config, X, xi=xi, cache=cache)


def whiten(targets, basis, config: DeepGPConfig, X) -> HiddenState:
    """Coordinates whose realisation matches ``targets`` on the basis rows.

    ``targets[l]`` gives layer l at every data row; each layer is solved
    against the covariance induced by the already re-realised layer below.
    """
    return _run(basis, config, X, targets=targets)


def aca_realize(xi, basis: AcaBasis, config: DeepGPConfig, X) -> HiddenState:
    return realize(xi, basis, config, X)


def fully_sparse_realize(xi, M: InducingSet, config: DeepGPConfig, X,
                         interp_kernel: KernelSpec, interp_gamma2: float) -> HiddenState:
    return realize(xi, SparseBasis(M, interp_kernel, interp_gamma2), config, X)


def values_at_all_rows(state: HiddenState, X) -> list:
    """Every hidden layer at every data row (interpolated for sparse bases)."""
    basis = state.basis
    if not isinstance(basis, SparseBasis):
        return [np.asarray(v) for v in state.values]
    rows = basis.rows()
    out = []
    for v in state.values:
        full = _interp_mean(basis, X, v, X)
        full[rows] = v
        out.append(full)
    return out


def rewhiten(state: HiddenState, new_basis, config: DeepGPConfig, X) -> HiddenState:
    """Re-express ``state`` in ``new_basis``, keeping values on its rows.

    Values away from the new basis rows are re-derived; the relative change of
    each layer is recorded as ``diagnostics['projection_residual']``.
    """
    if new_basis == state.basis:
        return state
    targets = values_at_all_rows(state, X)
    new = whiten(targets, new_basis, config, X)
    realized = values_at_all_rows(new, X)
    residual = []
    for old, cur in zip(targets, realized):
        scale = np.linalg.norm(old) or 1.0
        residual.append(float(np.linalg.norm(cur - old) / scale))
    new.diagnostics["projection_residual"] = residual
    new.warnings = state.warnings
    return new


def _shared_rows(X, Xstar):
    """Positions ``(p, i)`` with ``Xstar[p] == X[i]`` exactly."""
    index = {row.tobytes(): i for i, row in enumerate(np.ascontiguousarray(X))}
    pairs = [(p, index[row.tobytes()]) for p, row in enumerate(np.ascontiguousarray(Xstar))
             if row.tobytes() in index]
    if not pairs:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    p, i = np.array(pairs).T
    return p, i


def extend_top(state: HiddenState, config: DeepGPConfig, X, Xstar):
    """Top hidden layer at new points, or None when the architecture only
    needs it on the data grid (injective warp).

    Each layer is extended by its conditional mean given the realised values;
    at query points that coincide with data locations the realised values are
    used as they are.
    """
    X, Xstar = as_points(X), as_points(Xstar)
    basis = state.basis
    if config.arch is Arch.INJECTIVE1D:
        return None
    if isinstance(basis, SparseBasis):
        return _interp_mean(basis, X, state.values[-1], Xstar)
    at, src = _shared_rows(X, Xstar)
    rows = basis.rows()
    lower_grid, lower_star = None, None
    for level in range(config.num_layers):
        inputs = config.level_inputs(level, X, lower_grid)
        star = config.level_inputs_at(level, Xstar, lower_star, X, lower_grid)
        spec = config.level_spec(level)
        piv = inputs.take(rows)
        chol = cholesky_psd(layer_covariance(spec, piv, piv))
        W = solve_triangular(chol.lower, state.xi[level], lower=True, trans="T", check_finite=False)
        lower_star = layer_covariance(spec, star, piv) @ W
        lower_star[at] = state.values[level][src]
        lower_grid = state.values[level]
    return lower_star


def top_inputs_at(state: HiddenState, config: DeepGPConfig, X, Xstar):
    L = config.num_layers
    top_star = extend_top(state, config, X, Xstar)
    return config.level_inputs_at(L, Xstar, top_star, X, state.top_values)

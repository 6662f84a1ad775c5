"""Exact Gaussian-process regression and hyperparameter search."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import KernelKind, KernelSpec, as_points, distances, kernel_matrix
from .numerics import CholFactor, cholesky_psd, logdet_from_chol

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class GPPosterior:
    train_X: np.ndarray
    alpha: np.ndarray
    chol: CholFactor
    kernel: KernelSpec
    gamma2: float


def _check_xy(X, y):
    X = as_points(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(X) == 0:
        raise ValueError("at least one training point is required")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)} entries")
    return X, y


def gpr_fit(X, y, kernel: KernelSpec, gamma2: float) -> GPPosterior:
    X, y = _check_xy(X, y)
    if not gamma2 > 0:
        raise ValueError(f"gamma2 must be positive, got {gamma2}")
    K = kernel_matrix(kernel, X, X)
    K[np.diag_indices_from(K)] += gamma2
    chol = cholesky_psd(K)
    return GPPosterior(X, chol.solve(y), chol, kernel, float(gamma2))


def gpr_predict(p: GPPosterior, Xstar, full_cov: bool = True):
    """Posterior mean and covariance (or pointwise variance) at ``Xstar``."""
    Xstar = as_points(Xstar)
    if len(Xstar) and Xstar.shape[1] != p.train_X.shape[1]:
        raise ValueError(
            f"expected points of dimension {p.train_X.shape[1]}, got {Xstar.shape[1]}"
        )
    K_sx = kernel_matrix(p.kernel, Xstar, p.train_X)
    mean = K_sx @ p.alpha
    W = p.chol.half_solve(K_sx.T)
    if full_cov:
        cov = kernel_matrix(p.kernel, Xstar, Xstar) - W.T @ W
        return mean, 0.5 * (cov + cov.T)
    return mean, p.kernel.sigma2 - np.einsum("ij,ij->j", W, W)


def log_marginal_likelihood(X, y, kernel: KernelSpec, gamma2: float) -> float:
    X, y = _check_xy(X, y)
    K = kernel_matrix(kernel, X, X)
    K[np.diag_indices_from(K)] += gamma2
    chol = cholesky_psd(K)
    z = chol.half_solve(y)
    return float(-0.5 * z @ z - 0.5 * logdet_from_chol(chol) - 0.5 * len(y) * LOG_2PI)


class ObjectiveKind(str, enum.Enum):
    EXACT_LML = "exact_lml"
    SPARSE_BOUND = "sparse_bound"


@dataclass(frozen=True)
class Objective:
    """Marginal-likelihood objective: exact, or the sparse bound at ``inducing``."""

    kind: ObjectiveKind = ObjectiveKind.EXACT_LML
    inducing: Optional[Sequence[int]] = None

    @classmethod
    def exact(cls):
        return cls(ObjectiveKind.EXACT_LML)

    @classmethod
    def sparse_bound(cls, inducing):
        return cls(ObjectiveKind.SPARSE_BOUND, tuple(int(i) for i in inducing))


@dataclass(frozen=True)
class SearchConfig:
    """Derivative-free coordinate search in log-parameter space.

    Bounds are relative: the length scale to the largest pairwise distance,
    both variances to the target variance.
    """

    starts: int = 3
    grid_points: int = 7
    sweeps: int = 2
    golden_iters: int = 20
    lengthscale_bounds: tuple = (1e-3, 10.0)
    sigma2_bounds: tuple = (1e-4, 1e2)
    gamma2_bounds: tuple = (1e-6, 1.0)
    fixed_gamma2: Optional[float] = None


@dataclass
class SearchResult:
    kernel: KernelSpec
    gamma2: float
    value: float
    evaluations: int = 0
    history: list = field(default_factory=list)


def max_pairwise_distance(X) -> float:
    X = as_points(X)
    if len(X) <= 2000:
        return float(distances(X, X).max())
    # diameter of the bounding box bounds the true diameter from above
    return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))


def _make_evaluator(X, y, kind, objective):
    if objective.kind is ObjectiveKind.EXACT_LML:
        def f(spec, gamma2):
            return log_marginal_likelihood(X, y, spec, gamma2)
    else:
        from .sparse import InducingSet, variational_bound

        M = InducingSet(objective.inducing, len(y))

        def f(spec, gamma2):
            return variational_bound(M, X, y, spec, gamma2)
    return f


def _golden_max(fun, lo, hi, iters):
    """Golden-section maximisation of a unimodal-ish function on [lo, hi]."""
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = fun(d)
    return (c, fc) if fc >= fd else (d, fd)


def optimize_hyperparameters(
    X, y, kind, objective: Objective | None = None, search: SearchConfig | None = None,
    initial: Optional[tuple] = None,
) -> SearchResult:
    """Maximise the chosen objective over (sigma2, lengthscale, gamma2).

    Multi-start coordinate search: each axis gets a log-spaced grid scan, then
    golden-section refinement between the grid neighbours of the best point.
    ``initial`` = (sigma2, lengthscale, gamma2) is always one of the starts.
    """
    X, y = _check_xy(X, y)
    if len(y) < 2:
        raise ValueError("hyperparameter search needs at least two points")
    kind = KernelKind(kind)
    objective = objective or Objective.exact()
    search = search or SearchConfig()
    evaluate = _make_evaluator(X, y, kind, objective)

    var_y = float(np.var(y)) or 1.0
    dist = max_pairwise_distance(X) or 1.0
    bounds = np.log(np.array([
        [search.sigma2_bounds[0] * var_y, search.sigma2_bounds[1] * var_y],
        [search.lengthscale_bounds[0] * dist, search.lengthscale_bounds[1] * dist],
        [search.gamma2_bounds[0] * var_y, search.gamma2_bounds[1] * var_y],
    ]))
    free_axes = [0, 1] if search.fixed_gamma2 is not None else [0, 1, 2]

    cache = {}

    def value(theta):
        key = tuple(np.round(theta, 12))
        if key not in cache:
            s2, ls, g2 = np.exp(theta)
            if search.fixed_gamma2 is not None:
                g2 = search.fixed_gamma2
            try:
                v = evaluate(KernelSpec(kind, s2, ls), g2)
            except (np.linalg.LinAlgError, ValueError):
                v = -np.inf
            cache[key] = v if np.isfinite(v) else -np.inf
        return cache[key]

    starts = []
    if initial is not None:
        starts.append(np.log(np.clip(initial, np.exp(bounds[:, 0]), np.exp(bounds[:, 1]))))
    defaults = [
        (var_y, 0.1 * dist, 0.01 * var_y),
        (var_y, 0.02 * dist, 0.1 * var_y),
        (0.5 * var_y, 0.5 * dist, 0.001 * var_y),
    ]
    for s in defaults:
        if len(starts) >= search.starts:
            break
        starts.append(np.log(np.clip(s, np.exp(bounds[:, 0]), np.exp(bounds[:, 1]))))
    if search.fixed_gamma2 is not None:
        for s in starts:
            s[2] = math.log(search.fixed_gamma2)

    best_theta, best_val = None, -np.inf
    history = []
    for theta0 in starts:
        theta = theta0.copy()
        current = value(theta)
        for _ in range(search.sweeps):
            for axis in free_axes:
                grid = np.linspace(bounds[axis, 0], bounds[axis, 1], search.grid_points)
                vals = []
                for g in grid:
                    t = theta.copy()
                    t[axis] = g
                    vals.append(value(t))
                k = int(np.argmax(vals))
                if vals[k] > current:
                    theta[axis], current = grid[k], vals[k]
                lo = grid[max(k - 1, 0)]
                hi = grid[min(k + 1, len(grid) - 1)]
                lo, hi = min(lo, theta[axis]), max(hi, theta[axis])

                def along(g, axis=axis):
                    t = theta.copy()
                    t[axis] = g
                    return value(t)

                g_best, v_best = _golden_max(along, lo, hi, search.golden_iters)
                if v_best > current:
                    theta[axis], current = g_best, v_best
        history.append((np.exp(theta).tolist(), current))
        if current > best_val:
            best_theta, best_val = theta.copy(), current

    if best_theta is None:
        best_theta = starts[0]
    s2, ls, g2 = np.exp(best_theta)
    if search.fixed_gamma2 is not None:
        g2 = search.fixed_gamma2
    return SearchResult(KernelSpec(kind, float(s2), float(ls)), float(g2), float(best_val),
                        len(cache), history)

"""Fit-and-evaluate pipelines for exact GPR, sparse GPR and STRIDE.

Each pipeline takes training data and test locations in a common coordinate
system and returns predictive means and variances plus timings.  Targets are
handled in whatever units they arrive in; callers destandardise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .deep_gp import Arch, DeepGPConfig
from .gpr import Objective, SearchConfig, gpr_fit, gpr_predict, optimize_hyperparameters
from .kernels import KernelSpec, as_points
from .sparse import InducingSet, greedy_select, sparse_posterior
from .stride import StrideConfig, stride_fit, stride_predict

HYPER_SUBSET = 1000


@dataclass
class MethodResult:
    method: str
    mean: np.ndarray
    var: np.ndarray
    kernel: KernelSpec
    gamma2: float
    fit_seconds: float
    predict_seconds: float
    m: Optional[int] = None
    extra: dict = field(default_factory=dict)


def _hyper_subset(n, rng, limit=HYPER_SUBSET):
    if n <= limit:
        return np.arange(n)
    return np.sort(rng.choice(n, size=limit, replace=False))


def fit_exact_hyperparameters(X, y, kind, search: SearchConfig, rng):
    """Exact-likelihood hyperparameters, on a random subset for large n."""
    idx = _hyper_subset(len(y), rng)
    res = optimize_hyperparameters(X[idx], y[idx], kind, Objective.exact(), search)
    return res.kernel, res.gamma2


def run_gpr(X, y, Xstar, kind, search: SearchConfig, rng=None) -> MethodResult:
    """Exact GP; hyperparameters from at most HYPER_SUBSET rows, posterior from all."""
    X, Xstar = as_points(X), as_points(Xstar)
    t0 = time.perf_counter()
    kernel, gamma2 = fit_exact_hyperparameters(X, y, kind, search, rng or np.random.default_rng(0))
    post = gpr_fit(X, y, kernel, gamma2)
    t1 = time.perf_counter()
    mean, var = gpr_predict(post, Xstar, full_cov=False)
    t2 = time.perf_counter()
    return MethodResult("gpr", mean, var, kernel, gamma2, t1 - t0, t2 - t1)


def fit_sparse(X, y, kind, m, J_size, search: SearchConfig, rng, reopt_every: int = 0):
    """Hyperparameters and inducing set for sparse GPR.

    Exact-likelihood search on a subset initialises the kernel and the set is
    grown greedily.  With ``reopt_every = k > 0`` the bound is re-maximised
    over the hyperparameters after every ``k`` additions; in all cases it is
    maximised once more for the final set.
    """
    kernel, gamma2 = fit_exact_hyperparameters(X, y, kind, search, rng)
    step = reopt_every if reopt_every > 0 else m
    M = InducingSet.empty(len(y))

    def refine(kernel, gamma2, M):
        res = optimize_hyperparameters(X, y, kind, Objective.sparse_bound(M.indices), search,
                                       initial=(kernel.sigma2, kernel.lengthscale, gamma2))
        return res.kernel, res.gamma2

    while M.m < m:
        M = greedy_select(X, y, kernel, gamma2, min(m, M.m + step), J_size, rng, start=M.indices)
        kernel, gamma2 = refine(kernel, gamma2, M)
    return kernel, gamma2, M


def run_sparse(X, y, Xstar, kind, m, J_size, search: SearchConfig, rng,
               reopt_every: int = 0) -> MethodResult:
    X, Xstar = as_points(X), as_points(Xstar)
    t0 = time.perf_counter()
    kernel, gamma2, M = fit_sparse(X, y, kind, m, J_size, search, rng, reopt_every)
    t1 = time.perf_counter()
    mean, var = sparse_posterior(M, X, y, kernel, gamma2, Xstar, full_cov=False)
    t2 = time.perf_counter()
    return MethodResult("sparse_gpr", mean, var, kernel, gamma2, t1 - t0, t2 - t1, m=M.m,
                        extra={"inducing": M.indices})


@dataclass(frozen=True)
class DeepSettings:
    arch: Arch = Arch.COMPOSITION
    num_layers: int = 2
    u_min: Optional[float] = None
    u_max: Optional[float] = None
    conv_form: str = "arithmetic"

    def build(self, kernel: KernelSpec, input_dim: int) -> DeepGPConfig:
        kw = {"conv_form": self.conv_form}
        if self.u_min is not None:
            kw["u_min"] = self.u_min
        if self.u_max is not None:
            kw["u_max"] = self.u_max
        return DeepGPConfig.from_hyperparameters(self.arch, self.num_layers, kernel, input_dim, **kw)


def run_stride(X, y, Xstar, deep: DeepSettings, scfg: StrideConfig, kernel: KernelSpec,
               gamma2: float, standardization=None):
    """STRIDE fitted from given stationary hyperparameters.

    Returns ``(MethodResult, StrideModel)``.
    """
    X, Xstar = as_points(X), as_points(Xstar)
    t0 = time.perf_counter()
    dgp = deep.build(kernel, X.shape[1])
    model = stride_fit(X, y, dgp, scfg, gamma2, standardization)
    t1 = time.perf_counter()
    mean, var, _ = stride_predict(model, Xstar)
    t2 = time.perf_counter()
    trace = model.trace
    extra = {
        "acceptance_rate": trace[-1]["acceptance_rate"] if trace else None,
        "F_t_trace": [r["F_t_after"] for r in trace],
        "inducing": model.inducing.indices,
    }
    return MethodResult("stride", mean, var, kernel, gamma2, t1 - t0, t2 - t1, m=model.inducing.m,
                        extra=extra), model

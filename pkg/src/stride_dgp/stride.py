"""Monte-Carlo EM over inducing sets for deep GP regression.

The E-step advances every particle with pCN against the sparse likelihood of
the current inducing set; the M-step performs birth/death swaps on the
inducing set to increase the bound averaged over the particles.  The fitted
model predicts with the uniform mixture of per-particle sparse posteriors.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .deep_gp import DeepGPConfig, HiddenState, init_hidden_state, top_layer_kernel
from .kernels import IndexKernel, KernelSpec, as_points
from .lowrank import FullBasis, SparseBasis, aca_basis_for, rewhiten, top_inputs_at
from .mcmc import Chain, MCMCConfig, run_expectation
from .numerics import SingularMatrixError
from .sparse import BoundState, InducingSet, _argmax_smallest, fit_sparse_posterior, greedy_select_multi

log = logging.getLogger(__name__)


class HiddenApprox(str, enum.Enum):
    FULL = "full"
    ACA = "aca"
    SPARSE = "sparse"


@dataclass(frozen=True)
class StrideConfig:
    S: int = 50
    T: int = 10
    R: int = 5
    J_size: int = 500
    m: int = 50
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)
    hidden_approx: HiddenApprox = HiddenApprox.FULL
    aca_rank: Optional[int] = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_approx", HiddenApprox(self.hidden_approx))
        if self.S < 1 or self.T < 0 or self.R < 0 or self.m < 1 or self.J_size < 1:
            raise ValueError("need S >= 1, T >= 0, R >= 0, m >= 1 and J_size >= 1")

    @property
    def rank(self) -> int:
        return self.aca_rank if self.aca_rank is not None else self.m


@dataclass
class StrideModel:
    chains: list
    inducing: InducingSet
    dgp: DeepGPConfig
    config: StrideConfig
    X: np.ndarray
    y: np.ndarray
    gamma2: float
    trace: list = field(default_factory=list)
    initial_inducing: Optional[InducingSet] = None
    standardization: Optional[dict] = None

    @property
    def particles(self) -> list:
        return [c.state for c in self.chains]


class StrideFitError(RuntimeError):
    """A failed EM iteration; ``model`` holds the last completed iterate."""

    def __init__(self, message, model: StrideModel, iteration: int):
        super().__init__(message)
        self.model = model
        self.iteration = iteration


def _unique(items):
    """Distinct objects by identity, with their multiplicities."""
    seen, out, counts = {}, [], []
    for it in items:
        key = id(it)
        if key in seen:
            counts[seen[key]] += 1
        else:
            seen[key] = len(out)
            out.append(it)
            counts.append(1)
    return out, np.asarray(counts, dtype=float)


class _Objective:
    """Bound averaged over particle kernels; identical particles are scored once."""

    def __init__(self, kernels, y, gamma2):
        self.kernels, self.weights = _unique(kernels)
        self.weights = self.weights / self.weights.sum()
        self.y = np.asarray(y, dtype=float)
        self.gamma2 = gamma2

    def states(self, M):
        out = []
        for k in self.kernels:
            try:
                out.append(BoundState(k, self.y, self.gamma2, M))
            except (SingularMatrixError, np.linalg.LinAlgError):
                out.append(None)
        return out

    def value(self, states):
        if any(s is None for s in states):
            return -math.inf
        return float(sum(w * s.value for w, s in zip(self.weights, states)))

    def combine(self, states, fn):
        if any(s is None for s in states):
            return None
        return sum(w * fn(s) for w, s in zip(self.weights, states))


def objective_Ft(M: InducingSet, kernels: Sequence[IndexKernel], y, gamma2: float) -> float:
    """Mean variational bound over the particles' top-layer kernels."""
    obj = _Objective(list(kernels), y, gamma2)
    return obj.value(obj.states(M))


def maximization_step(M: InducingSet, kernels, y, gamma2: float, R: int, J_size: int, rng):
    """Birth/death updates of the inducing set.

    Each repetition removes the member whose removal costs least, then adds
    the best of a random candidate set that always contains the point just
    removed, so the objective cannot decrease.  Returns ``(M, values)`` where
    ``values`` traces the objective after every repetition.
    """
    if M.m < 1:
        raise ValueError("the birth/death step needs a non-empty inducing set")
    obj = _Objective(list(kernels), y, gamma2)
    states = obj.states(M)
    current = obj.value(states)
    values = [current]
    for _ in range(R):
        removal = obj.combine(states, lambda s: s.remove_values())
        if removal is None:
            break
        members = M.array()
        z_bar = int(members[_argmax_smallest(removal, members)])
        reduced = M.remove(z_bar)
        red_states = obj.states(reduced)
        available = reduced.complement()
        available = available[available != z_bar]
        size = min(J_size, len(available))
        J = rng.choice(available, size=size, replace=False) if size < len(available) else available
        J = np.sort(np.append(J, z_bar))
        gains = obj.combine(red_states, lambda s: s.add_values(J))
        if gains is None:
            break
        z_star = int(J[_argmax_smallest(gains, J)])
        candidate = reduced.add(z_star)
        cand_states = obj.states(candidate)
        cand_value = obj.value(cand_states)
        # guard against rounding in the rank-one scores: never accept a worse set
        if cand_value >= current:
            M, states, current = candidate, cand_states, cand_value
        values.append(current)
    return M, values


def _stationary_top(dgp: DeepGPConfig) -> KernelSpec:
    return KernelSpec(dgp.kind, dgp.top_sigma2, dgp.lengthscale)


def initial_basis(dgp, scfg, X, M=None, gamma2=None):
    n = len(X)
    if scfg.hidden_approx is HiddenApprox.FULL:
        return FullBasis(n)
    if scfg.hidden_approx is HiddenApprox.ACA:
        return aca_basis_for(IndexKernel.stationary(_stationary_top(dgp), X), scfg.rank)
    return SparseBasis(M, _stationary_top(dgp), gamma2)


def rebase(state: HiddenState, dgp, scfg, X, M, gamma2) -> HiddenState:
    """Basis update after an M-step (fresh ACA pivots, or the new inducing set)."""
    if scfg.hidden_approx is HiddenApprox.ACA:
        kernel = top_layer_kernel(state, dgp, X)
        return rewhiten(state, aca_basis_for(kernel, scfg.rank), dgp, X)
    if scfg.hidden_approx is HiddenApprox.SPARSE:
        basis = state.basis
        return rewhiten(state, SparseBasis(M, basis.interp_kernel, basis.interp_gamma2), dgp, X)
    return state


def stride_fit(X, y, dgp: DeepGPConfig, scfg: StrideConfig, gamma2: float,
               standardization=None) -> StrideModel:
    """Run the Monte-Carlo EM loop from the stationary initialisation."""
    X = as_points(X)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = len(y)
    if scfg.m > n:
        raise ValueError(f"m = {scfg.m} exceeds the number of observations {n}")
    rng_select = np.random.default_rng([scfg.seed, 1])

    if scfg.hidden_approx is HiddenApprox.SPARSE:
        kern = IndexKernel.stationary(_stationary_top(dgp), X)
        M = greedy_select_multi([kern], y, gamma2, scfg.m, scfg.J_size, rng_select)
        state0 = init_hidden_state(dgp, X, initial_basis(dgp, scfg, X, M, gamma2))
    else:
        state0 = init_hidden_state(dgp, X, initial_basis(dgp, scfg, X))
        M = greedy_select_multi([top_layer_kernel(state0, dgp, X)], y, gamma2, scfg.m,
                                scfg.J_size, rng_select)
    chains = [Chain(state0, scfg.mcmc.beta) for _ in range(scfg.S)]
    model = StrideModel(chains, M, dgp, scfg, X, y, float(gamma2), [], M, standardization)

    for t in range(scfg.T):
        try:
            chains = run_expectation(chains, M, dgp, X, y, gamma2, scfg.mcmc, scfg.seed, t,
                                     threads=scfg.threads)
            kernels = [top_layer_kernel(c.state, dgp, X) for c in chains]
            M_new, values = maximization_step(
                M, kernels, y, gamma2, scfg.R, scfg.J_size, np.random.default_rng([scfg.seed, 2, t])
            )
            chains = [
                Chain(rebase(c.state, dgp, scfg, X, M_new, gamma2), c.beta, c.accepted, c.proposed)
                for c in chains
            ]
        except Exception as exc:  # keep completed iterations available to the caller
            raise StrideFitError(f"EM iteration {t} failed: {exc}", model, t) from exc
        record = {
            "iteration": t,
            "F_t_before": values[0],
            "F_t_after": values[-1],
            "F_t_trace": values,
            "swapped": sorted(set(M_new) ^ set(M)),
            "acceptance_rate": float(np.mean([c.acceptance_rate for c in chains])),
            "beta": float(np.mean([c.beta for c in chains])),
        }
        log.info("EM iteration %d: F_t %.6g -> %.6g, acceptance %.3f", t, values[0],
                 values[-1], record["acceptance_rate"])
        M = M_new
        model = StrideModel(chains, M, dgp, scfg, X, y, float(gamma2), model.trace + [record],
                            model.initial_inducing, standardization)
    return model


def particle_predictions(model: StrideModel, Xstar):
    """Per-particle sparse posterior means and pointwise variances at ``Xstar``."""
    Xstar = as_points(Xstar)
    states, _ = _unique(model.particles)
    index = {id(s): k for k, s in enumerate(states)}
    means, variances = [], []
    for state in states:
        kernel = top_layer_kernel(state, model.dgp, model.X)
        post = fit_sparse_posterior(kernel, model.inducing, model.y, model.gamma2)
        star = top_inputs_at(state, model.dgp, model.X, Xstar)
        K_ms = kernel.cross(model.inducing.array(), star)
        mu, var = post.predict_from_cross(K_ms, k_star_diag=np.full(len(Xstar), kernel.spec.sigma2))
        means.append(mu)
        variances.append(var)
    order = [index[id(s)] for s in model.particles]
    return np.asarray(means)[order], np.asarray(variances)[order]


def stride_predict(model: StrideModel, Xstar):
    """Mixture mean, mixture variance and per-particle means at ``Xstar``."""
    means, variances = particle_predictions(model, Xstar)
    mean = means.mean(axis=0)
    var = variances.mean(axis=0) + (means**2).mean(axis=0) - mean**2
    return mean, var, means

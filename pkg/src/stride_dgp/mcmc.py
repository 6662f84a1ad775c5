"""Whitened preconditioned Crank-Nicolson sampling of the hidden layers.

The prior on the whitened coordinates is N(0, I), so the pCN proposal keeps
it invariant and the acceptance ratio only involves the (sparse, top-layer
marginalised) likelihood.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .deep_gp import DeepGPConfig, HiddenState, top_layer_kernel
from .lowrank import realize
from .numerics import LowRankPlusNoise, SingularMatrixError, cholesky_psd
from .sparse import InducingSet

BETA_BOUNDS = (1e-4, 1.0)


@dataclass(frozen=True)
class MCMCConfig:
    """pCN settings.  With ``adapt`` the step size is tuned in windows of
    ``adapt_window`` steps during the first ``adapt_iterations`` EM iterations
    and frozen afterwards."""

    beta: float = 0.1
    steps_per_E: int = 400
    adapt: bool = True
    target_accept: float = 0.25
    adapt_window: int = 50
    adapt_iterations: int = 3

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError(f"pCN step size must lie in (0, 1], got {self.beta}")
        if self.steps_per_E < 0:
            raise ValueError("steps_per_E must be non-negative")


def sparse_log_likelihood(state: HiddenState, M: InducingSet, config: DeepGPConfig, X, y,
                          gamma2: float) -> float:
    """``-1/2 y^T Q^{-1} y - 1/2 log det Q`` for the state's top-layer kernel.

    Failed factorisations return ``-inf`` so that the proposal is rejected.
    """
    try:
        K = top_layer_kernel(state, config, X)
        idx = M.array()
        P = K.block(idx) if M.m else np.zeros((0, K.n))
        q = LowRankPlusNoise(None, P, gamma2, chol_A=cholesky_psd(P[:, idx]))
        value = -0.5 * q.quadform(y) - 0.5 * q.logdet()
    except (SingularMatrixError, np.linalg.LinAlgError, FloatingPointError, ValueError):
        return -math.inf
    return value if np.isfinite(value) else -math.inf


def make_loglik(M, config, X, y, gamma2) -> Callable[[HiddenState], float]:
    y = np.asarray(y, dtype=float)

    def loglik(state):
        return sparse_log_likelihood(state, M, config, X, y, gamma2)

    return loglik


def pcn_step(state: HiddenState, loglik, beta: float, rng, realize_fn, current_ll=None):
    """One pCN move.  Returns ``(state, accepted, loglik_of_returned_state)``.

    ``realize_fn(xi, basis)`` maps proposed coordinates to a hidden state.
    ``loglik`` is called once per proposal (plus once if ``current_ll`` is
    not supplied).
    """
    if current_ll is None:
        current_ll = loglik(state)
    if beta == 0:
        return state, True, current_ll
    shrink = math.sqrt(1.0 - beta * beta)
    xi_new = tuple(shrink * x + beta * rng.standard_normal(x.shape) for x in state.xi)
    try:
        proposal = realize_fn(xi_new, state.basis)
        new_ll = loglik(proposal)
    except (SingularMatrixError, np.linalg.LinAlgError):
        new_ll = -math.inf
    if not np.isfinite(new_ll):
        new_ll = -math.inf
    log_u = math.log(1.0 - rng.uniform())
    if new_ll > -math.inf and log_u <= new_ll - current_ll:
        proposal.warnings = state.warnings
        return proposal, True, new_ll
    return state, False, current_ll


@dataclass
class Chain:
    """A particle together with its own step size and acceptance counts."""

    state: HiddenState
    beta: float
    accepted: int = 0
    proposed: int = 0

    @property
    def acceptance_rate(self):
        return self.accepted / self.proposed if self.proposed else float("nan")


def particle_rng(seed: int, particle: int, em_iter: int):
    return np.random.default_rng([int(seed), 0, int(particle), int(em_iter)])


def advance_chain(chain: Chain, loglik, realize_fn, mcfg: MCMCConfig, rng, adapt: bool) -> Chain:
    state, beta = chain.state, chain.beta
    ll = loglik(state)
    acc_total, window_acc = 0, 0
    for step in range(mcfg.steps_per_E):
        state, accepted, ll = pcn_step(state, loglik, beta, rng, realize_fn, current_ll=ll)
        acc_total += accepted
        window_acc += accepted
        if adapt and (step + 1) % mcfg.adapt_window == 0:
            rate = window_acc / mcfg.adapt_window
            beta *= 1.1 if rate > mcfg.target_accept else 0.9
            beta = float(np.clip(beta, *BETA_BOUNDS))
            window_acc = 0
    return replace(chain, state=state, beta=beta,
                   accepted=chain.accepted + acc_total,
                   proposed=chain.proposed + mcfg.steps_per_E)


def run_expectation(chains, M: InducingSet, config: DeepGPConfig, X, y, gamma2: float,
                    mcfg: MCMCConfig, seed: int, em_iter: int, threads: int = 1):
    """Advance every chain ``steps_per_E`` pCN steps against the sparse likelihood.

    Each chain draws from its own stream keyed by (seed, particle, em_iter),
    so the result does not depend on ``threads``.
    """
    if mcfg.steps_per_E == 0:
        return list(chains)
    loglik = make_loglik(M, config, X, y, gamma2)
    level0 = {}

    def realize_fn(xi, basis):
        return realize(xi, basis, config, X, cache=level0)

    adapt = mcfg.adapt and em_iter < mcfg.adapt_iterations

    def work(item):
        s, chain = item
        return advance_chain(chain, loglik, realize_fn, mcfg, particle_rng(seed, s, em_iter), adapt)

    items = list(enumerate(chains))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, items))
    return [work(item) for item in items]

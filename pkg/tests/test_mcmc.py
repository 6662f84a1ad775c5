import math

import numpy as np
import pytest

from oracles import dense_Q, dense_bound, dense_kernel
from stride_dgp.deep_gp import Arch, DeepGPConfig, init_hidden_state, top_layer_kernel
from stride_dgp.kernels import KernelSpec
from stride_dgp.lowrank import realize
from stride_dgp.mcmc import (Chain, MCMCConfig, advance_chain, make_loglik, pcn_step,
                             run_expectation, sparse_log_likelihood)
from stride_dgp.sparse import InducingSet

KERNEL = KernelSpec("gaussian", 1.0, 0.3)


def setup(n=8, L=1, seed=0):
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(size=n))[:, None]
    y = np.sin(6 * X[:, 0]) + 0.1 * rng.normal(size=n)
    cfg = DeepGPConfig.from_hyperparameters(Arch.COMPOSITION, L, KERNEL, 1)
    return X, y, cfg, init_hidden_state(cfg, X)


def test_config_validation():
    with pytest.raises(ValueError):
        MCMCConfig(beta=0.0)
    with pytest.raises(ValueError):
        MCMCConfig(beta=1.5)


def test_loglik_at_stationary_init_matches_bound_terms():
    X, y, cfg, state = setup()
    M = InducingSet((1, 5), 8)
    K = dense_kernel(KERNEL, X, X)
    idx = list(M.indices)
    nys = K[:, idx] @ np.linalg.solve(K[np.ix_(idx, idx)], K[idx, :])
    trace = np.trace(K - nys)
    expect = dense_bound(K, idx, y, 0.05) + trace / (2 * 0.05) + 4 * math.log(2 * math.pi)
    got = sparse_log_likelihood(state, M, cfg, X, y, 0.05)
    assert got == pytest.approx(expect, rel=1e-8)


def test_loglik_matches_dense_gaussian_density(rng):
    X, y, cfg, state = setup(n=6)
    moved = realize((rng.normal(size=(6, 1)),), state.basis, cfg, X)
    M = InducingSet((0, 4), 6)
    K = top_layer_kernel(moved, cfg, X).block(np.arange(6))
    Q = dense_Q(K[np.ix_([0, 4], [0, 4])], K[[0, 4], :], 0.1)
    _, logdet = np.linalg.slogdet(Q)
    expect = -0.5 * y @ np.linalg.solve(Q, y) - 0.5 * logdet
    assert sparse_log_likelihood(moved, M, cfg, X, y, 0.1) == pytest.approx(expect, rel=1e-10)


def test_loglik_noise_dominated_limit(rng):
    X, y, cfg, state = setup()
    M = InducingSet((2, 3), 8)
    g2 = 1e8
    limit = -4 * math.log(g2) - y @ y / (2 * g2)
    for s in (state, realize((rng.normal(size=(8, 1)),), state.basis, cfg, X)):
        assert sparse_log_likelihood(s, M, cfg, X, y, g2) == pytest.approx(limit, rel=1e-6)


def prior_chain(steps, beta, seed):
    X, _, cfg, state = setup(n=5)
    rng = np.random.default_rng(seed)
    realize_fn = lambda xi, basis: realize(xi, basis, cfg, X)
    xs, acc = [], 0
    for _ in range(steps):
        state, a, _ = pcn_step(state, lambda s: 0.0, beta, rng, realize_fn, current_ll=0.0)
        acc += a
        xs.append(state.xi[0][:, 0])
    return np.array(xs), acc / steps


def test_beta_zero_is_identity(rng):
    X, y, cfg, state = setup()
    out, accepted, _ = pcn_step(state, make_loglik(InducingSet((0,), 8), cfg, X, y, 0.1), 0.0,
                                rng, lambda xi, b: realize(xi, b, cfg, X))
    assert accepted and out is state


def test_uphill_moves_are_always_accepted(rng):
    X, _, cfg, state = setup()
    realize_fn = lambda xi, b: realize(xi, b, cfg, X)
    for _ in range(50):
        ll = lambda s: float(np.sum(s.xi[0]))
        cur = ll(state)
        new, acc, new_ll = pcn_step(state, ll, 0.5, rng, realize_fn, current_ll=cur)
        if new_ll > cur:
            assert acc
        state = new


def test_prior_preservation_moments():
    beta = 0.5
    xs, rate = prior_chain(10_000, beta, seed=7)
    assert rate == 1.0
    rho = math.sqrt(1 - beta * beta)
    N = len(xs)
    se_mean = math.sqrt((1 + rho) / (1 - rho) / N)
    se_var = math.sqrt(2 * (1 + rho**2) / (1 - rho**2) / N)
    assert np.all(np.abs(xs.mean(axis=0)) <= 3 * se_mean)
    assert np.all(np.abs((xs**2).mean(axis=0) - 1) <= 3 * se_var)


def test_lag_one_autocorrelation():
    beta = 0.3
    xs, _ = prior_chain(10_000, beta, seed=11)
    rho = math.sqrt(1 - beta * beta)
    se = math.sqrt((1 - rho**2) / len(xs))
    for col in xs.T:
        c = col - col.mean()
        r1 = float(c[1:] @ c[:-1] / (c @ c))
        assert abs(r1 - rho) <= 3 * se


def test_loglik_called_once_per_proposal():
    X, y, cfg, state = setup()
    inner = make_loglik(InducingSet((1, 6), 8), cfg, X, y, 0.05)
    calls = []

    def counted(s):
        calls.append(1)
        return inner(s)

    mcfg = MCMCConfig(beta=0.2, steps_per_E=37, adapt=False)
    advance_chain(Chain(state, 0.2), counted, lambda xi, b: realize(xi, b, cfg, X), mcfg,
                  np.random.default_rng(0), adapt=False)
    assert len(calls) == 37 + 1  # one for the starting state


def test_non_finite_proposals_are_rejected(rng):
    X, _, cfg, state = setup()
    realize_fn = lambda xi, b: realize(xi, b, cfg, X)
    for _ in range(20):
        out, acc, ll = pcn_step(state, lambda s: math.nan, 0.5, rng, realize_fn, current_ll=0.0)
        assert not acc and out is state and ll == 0.0


def test_zero_steps_leaves_chains_unchanged():
    X, y, cfg, state = setup()
    chains = [Chain(state, 0.1)]
    out = run_expectation(chains, InducingSet((0, 3), 8), cfg, X, y, 0.05,
                          MCMCConfig(steps_per_E=0), seed=1, em_iter=0)
    assert out[0] is chains[0]


def test_serial_and_threaded_runs_are_bitwise_identical():
    X, y, cfg, state = setup(L=2)
    M = InducingSet((0, 3, 7), 8)
    mcfg = MCMCConfig(beta=0.3, steps_per_E=60, adapt=True, adapt_window=20)
    chains = [Chain(state, 0.3) for _ in range(3)]
    a = run_expectation(chains, M, cfg, X, y, 0.05, mcfg, seed=5, em_iter=0, threads=1)
    b = run_expectation(chains, M, cfg, X, y, 0.05, mcfg, seed=5, em_iter=0, threads=3)
    for ca, cb in zip(a, b):
        assert ca.beta == cb.beta and ca.accepted == cb.accepted
        for xa, xb in zip(ca.state.xi, cb.state.xi):
            assert np.array_equal(xa, xb)
    # particles draw from different streams
    assert not np.array_equal(a[0].state.xi[0], a[1].state.xi[0])


def test_adaptation_freezes_after_early_iterations():
    X, y, cfg, state = setup()
    M = InducingSet((0, 3), 8)
    mcfg = MCMCConfig(beta=0.3, steps_per_E=100, adapt=True, adapt_window=50, adapt_iterations=2)
    late = run_expectation([Chain(state, 0.3)], M, cfg, X, y, 0.05, mcfg, seed=0, em_iter=2)
    assert late[0].beta == 0.3
    early = run_expectation([Chain(state, 0.3)], M, cfg, X, y, 0.05, mcfg, seed=0, em_iter=0)
    assert early[0].beta != 0.3

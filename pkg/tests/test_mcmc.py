import warnings

import numpy as np
import pytest
from scipy import integrate

from windshed.grid import Field, RasterGrid
from windshed.mcmc import (
    EXPONENTIAL, HALF_NORMAL, ChainConfig, InitializationError, PriorSpec, TransportData, diagnostics,
    draws_digest, ess_basic, log_density, log_prior, run_chain, run_chains, spawn_seeds,
)
from windshed.transport import PARAM_NAMES, TransportModel, TransportParams, steady_state_mean

TRUTH = dict(theta1=0.5, theta2=1.0, theta3=0.5, delta=0.5, sigma2=0.02, beta0=1.0)


def test_half_normal_at_zero():
    assert log_density(HALF_NORMAL, 1.0, 0.0) == pytest.approx(-0.22579, abs=1e-5)
    assert log_density(HALF_NORMAL, 1.0, 0.0) == pytest.approx(np.log(2 / np.sqrt(2 * np.pi)), abs=1e-15)


def test_exponential_at_zero():
    assert log_density(EXPONENTIAL, 2.0, 0.0) == pytest.approx(np.log(2.0), abs=1e-15)


@pytest.mark.parametrize("family,value", [(HALF_NORMAL, 0.3), (HALF_NORMAL, 5.0), (EXPONENTIAL, 0.1),
                                          (EXPONENTIAL, 4.0)])
def test_priors_integrate_to_one(family, value):
    total, _ = integrate.quad(lambda x: np.exp(log_density(family, value, x)), 0, np.inf, epsabs=1e-12)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_log_prior_support():
    prior = PriorSpec.from_magnitudes(TRUTH)
    good = np.array(list(TRUTH.values()))
    assert np.isfinite(log_prior(good, prior))
    for k in range(5):
        bad = good.copy()
        bad[k] = 0.0
        assert log_prior(bad, prior) == -np.inf
    bad = good.copy()
    bad[5] = -1e-9
    assert log_prior(bad, prior) == -np.inf
    # beta0 = 0 is allowed
    zero_bg = good.copy()
    zero_bg[5] = 0.0
    assert np.isfinite(log_prior(zero_bg, prior))


def test_default_families():
    prior = PriorSpec.from_magnitudes(TRUTH, factor=10)
    for name in PARAM_NAMES[:5]:
        assert prior.priors[name] == (HALF_NORMAL, 10 * TRUTH[name])
    assert prior.priors["beta0"] == (EXPONENTIAL, 1 / (10 * TRUTH["beta0"]))
    with pytest.raises(ValueError):
        PriorSpec({n: (HALF_NORMAL, 1.0) for n in PARAM_NAMES[:5]})


def _small_data(seed=0, nrows=6, ncols=6):
    grid = RasterGrid(ncols, nrows, 1.0)
    model = TransportModel(grid, Field.constant(grid, 1.0), Field.constant(grid, 0.5))
    p = TransportParams(**TRUTH)
    R = np.zeros(grid.n_cells)
    R[[7, 28]] = [30.0, 20.0]
    ops = model.operators(p)
    rng = np.random.default_rng(seed)
    obs = p.beta0 + steady_state_mean(ops, R, p) + np.sqrt(p.sigma2) * ops.lu_A.solve(rng.standard_normal(grid.n_cells))
    return TransportData(Field(grid, obs), Field(grid, R), model)


def test_prior_only_chain_matches_prior_moments():
    # likelihood off: the log-scale walk with its Jacobian must reproduce the prior
    prior = PriorSpec.from_magnitudes(TRUTH)
    chain = run_chain(None, prior, ChainConfig(n_iter=42000, n_burn=2000, seed=3, use_likelihood=False))
    assert len(chain.draws) == 40000
    for k, name in enumerate(PARAM_NAMES):
        x = chain.draws[:, k]
        mcse = x.std() / np.sqrt(ess_basic(x))
        assert abs(x.mean() - prior.mean(name)) < 3 * mcse, name
    # second moments of the half-normal: E x^2 = scale^2
    x2 = chain.draws[:, 0] ** 2
    assert abs(x2.mean() - prior.priors["theta1"][1] ** 2) < 3 * x2.std() / np.sqrt(ess_basic(x2))


def test_fixed_seed_bit_identical():
    data = _small_data()
    prior = PriorSpec.from_magnitudes(TRUTH)
    cfg = ChainConfig(n_iter=600, n_burn=300, seed=11)
    a, b = run_chain(data, prior, cfg), run_chain(data, prior, cfg)
    assert a.digest() == b.digest()
    np.testing.assert_array_equal(a.log_posterior, b.log_posterior)
    c = run_chain(data, prior, ChainConfig(n_iter=600, n_burn=300, seed=12))
    assert c.digest() != a.digest()


def test_adaptation_frozen_and_support():
    chain = run_chain(_small_data(), PriorSpec.from_magnitudes(TRUTH), ChainConfig(n_iter=1500, n_burn=700, seed=1))
    first, last = chain.cov_snapshots
    np.testing.assert_array_equal(first, last)
    np.testing.assert_array_equal(last, chain.proposal_cov)
    assert (chain.draws[:, :5] > 0).all() and (chain.draws[:, 5] >= 0).all()
    assert 0 <= chain.acceptance_rate <= 1
    assert np.isfinite(chain.log_posterior).all()


def test_bad_start_raises_initialization_error():
    cfg = ChainConfig(n_iter=10, n_burn=5, init=(-1.0, 1, 1, 1, 1, 1))
    with pytest.raises(InitializationError, match="init"):
        run_chain(_small_data(), PriorSpec.from_magnitudes(TRUTH), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(n_iter=100, n_burn=100)


def test_chain_seeds_are_spawned_and_distinct():
    seeds = spawn_seeds(7, 4)
    assert len(set(seeds)) == 4 and seeds == spawn_seeds(7, 4)
    chains = run_chains(_small_data(), PriorSpec.from_magnitudes(TRUTH),
                        ChainConfig(n_iter=300, n_burn=100, seed=7), n_chains=2)
    assert [c.seed for c in chains] == spawn_seeds(7, 2)
    assert chains[0].digest() != chains[1].digest()


def test_digest_is_content_hash():
    x = np.arange(12.0).reshape(2, 6)
    assert draws_digest(x) == draws_digest(x.copy())
    assert draws_digest(x) != draws_digest(x + 1e-15 * 0 + np.eye(2, 6) * 1e-12)


def test_constant_chains_flagged():
    d = diagnostics([np.ones((100, 6)), np.ones((100, 6))])
    assert all(np.isnan(v) for v in d.rhat.values())
    assert all(np.isnan(v) for v in d.ess.values())
    assert any(f.startswith("degenerate") for f in d.flags)
    assert '"rhat"' in d.to_json()


def test_iid_chains_rhat_near_one():
    rng = np.random.default_rng(0)
    d = diagnostics([rng.standard_normal((1000, 1)) for _ in range(4)], names=("x",))
    assert d.rhat["x"] < 1.01
    assert 3000 < d.ess["x"] < 5000


def test_shifted_chains_detected():
    rng = np.random.default_rng(1)
    d = diagnostics([rng.standard_normal((500, 1)), 2 + rng.standard_normal((500, 1))], names=("x",))
    assert d.rhat["x"] > 1.2


def _ar1(rng, n, rho):
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1 - rho**2)
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    return x


@pytest.mark.parametrize("rho", [0.5, 0.9])
def test_ar1_ess_matches_analytic(rho):
    rng = np.random.default_rng(2)
    n = 20000
    x = _ar1(rng, n, rho)
    want = n * (1 - rho) / (1 + rho)
    assert ess_basic(x) == pytest.approx(want, rel=0.25)
    chains = [_ar1(rng, 5000, rho)[:, None] for _ in range(4)]
    d = diagnostics(chains, names=("x",))
    assert d.ess["x"] == pytest.approx(4 * 5000 * (1 - rho) / (1 + rho), rel=0.25)


def test_single_chain_warns_and_omits_rhat():
    rng = np.random.default_rng(3)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        d = diagnostics([rng.standard_normal((200, 2))], names=("a", "b"))
    assert any("R-hat" in str(x.message) for x in w)
    assert "single_chain:rhat_omitted" in d.flags
    assert np.isnan(d.rhat["a"]) and np.isfinite(d.ess["a"])


def test_unequal_chains_rejected():
    with pytest.raises(ValueError, match="equal length"):
        diagnostics([np.zeros((10, 6)), np.zeros((11, 6))])

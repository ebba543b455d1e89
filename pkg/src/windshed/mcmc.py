"""Adaptive random-walk Metropolis sampling of transport parameters.

Sampling happens on log-transformed parameters with the Jacobian folded
into the target.  The proposal covariance adapts during burn-in only and is
frozen afterwards, so post-burn-in draws come from a fixed Markov kernel.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .grid import Field
from .transport import PARAM_NAMES, NumericalError, TransportModel, TransportParams, log_likelihood

HALF_NORMAL = "half_normal"
EXPONENTIAL = "exponential"


class InitializationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PriorSpec:
    """Independent prior per parameter: ``{name: (family, scale_or_rate)}``.

    Half-normal priors take a scale, exponential priors a rate.
    """

    priors: dict

    def __post_init__(self):
        for name in PARAM_NAMES:
            if name not in self.priors:
                raise ValueError(f"no prior for {name}")
            family, value = self.priors[name]
            if family not in (HALF_NORMAL, EXPONENTIAL):
                raise ValueError(f"{name}: unknown prior family {family!r}")
            if not value > 0:
                raise ValueError(f"{name}: prior scale/rate must be positive")

    @classmethod
    def from_magnitudes(cls, magnitudes: dict, factor: float = 10.0) -> "PriorSpec":
        """Default priors from rough magnitude guesses: half-normal with scale
        ``factor * guess`` for rates and variance, exponential with mean
        ``factor * guess`` for the background level."""
        pri = {name: (HALF_NORMAL, factor * magnitudes[name]) for name in PARAM_NAMES[:5]}
        pri["beta0"] = (EXPONENTIAL, 1.0 / (factor * magnitudes["beta0"]))
        return cls(pri)

    def median(self, name: str) -> float:
        family, value = self.priors[name]
        if family == HALF_NORMAL:
            return value * stats.norm.ppf(0.75)
        return np.log(2.0) / value

    def mean(self, name: str) -> float:
        family, value = self.priors[name]
        if family == HALF_NORMAL:
            return value * np.sqrt(2.0 / np.pi)
        return 1.0 / value


def log_density(family: str, value: float, x: float) -> float:
    if x < 0 or not np.isfinite(x):
        return -np.inf
    if family == HALF_NORMAL:
        return np.log(2.0) - 0.5 * np.log(2 * np.pi) - np.log(value) - 0.5 * (x / value) ** 2
    if family == EXPONENTIAL:
        return np.log(value) - value * x
    raise ValueError(family)


def log_prior(params, prior: PriorSpec) -> float:
    values = params.as_array() if isinstance(params, TransportParams) else np.asarray(params, dtype=float)
    total = 0.0
    for name, x in zip(PARAM_NAMES, values):
        # positivity of the rate parameters is part of the support
        if name != "beta0" and x <= 0:
            return -np.inf
        total += log_density(*prior.priors[name], x)
    return float(total)


@dataclass(frozen=True)
class TransportData:
    observed: Field
    sources: Field
    model: TransportModel
    covariance: str = "sar"


@dataclass(frozen=True)
class ChainConfig:
    n_iter: int = 8000
    n_burn: int = 4000
    seed: int = 0
    target_accept: float = 0.234
    use_likelihood: bool = True
    adapt_start: int = 200
    init: tuple | None = None

    def __post_init__(self):
        if not (self.n_iter > self.n_burn >= 0):
            raise ValueError(f"need n_iter > n_burn >= 0, got {self.n_iter}, {self.n_burn}")


@dataclass
class Chain:
    draws: np.ndarray
    log_posterior: np.ndarray
    acceptance_rate: float
    seed: int
    proposal_cov: np.ndarray
    cov_snapshots: list = field(default_factory=list, repr=False)

    @property
    def params(self) -> list[TransportParams]:
        return [TransportParams.from_array(d) for d in self.draws]

    def mean(self) -> TransportParams:
        return TransportParams.from_array(self.draws.mean(axis=0))

    def digest(self) -> str:
        return draws_digest(self.draws)


def draws_digest(draws: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(draws, dtype=np.float64).tobytes()).hexdigest()


def _log_target(phi, data, prior, use_likelihood):
    theta = np.exp(phi)
    lp = log_prior(theta, prior)
    if not np.isfinite(lp):
        return -np.inf, -np.inf
    ll = 0.0
    if use_likelihood:
        try:
            params = TransportParams.from_array(theta)
            ll = log_likelihood(data.observed, data.sources, params, data.model, data.covariance)
        except (NumericalError, ValueError):
            return -np.inf, -np.inf
    post = lp + ll
    # random walk on log theta: add the log-Jacobian sum(phi)
    return post + float(np.sum(phi)), post


def run_chain(data: TransportData, prior: PriorSpec, config: ChainConfig = ChainConfig()) -> Chain:
    """Adaptive RW-MH; returns post-burn-in draws on the natural scale."""
    rng = np.random.default_rng(config.seed)
    d = len(PARAM_NAMES)
    if config.init is not None:
        theta0 = np.asarray(config.init, dtype=float)
    else:
        theta0 = np.array([prior.median(n) for n in PARAM_NAMES])
    if not (theta0.shape == (d,) and np.all(theta0 > 0) and np.all(np.isfinite(theta0))):
        raise InitializationError(
            f"start point must be {d} finite positive values, got {theta0.tolist()}; supply a different init"
        )
    phi = np.log(theta0)
    cur, cur_post = _log_target(phi, data, prior, config.use_likelihood)
    if not np.isfinite(cur):
        raise InitializationError(
            f"non-finite log-posterior at start {dict(zip(PARAM_NAMES, theta0))}; supply a different init"
        )

    log_scale = np.log(2.38 ** 2 / d)
    cov = np.eye(d) * 0.01
    mean_acc = phi.copy()
    cov_acc = np.zeros((d, d))
    chol = np.linalg.cholesky(np.exp(log_scale) * cov)

    n_keep = config.n_iter - config.n_burn
    draws = np.empty((n_keep, d))
    logpost = np.empty(n_keep)
    accepted = 0
    snapshots = []
    k0 = 0
    restarts = {config.n_burn // 4, config.n_burn // 2}
    for t in range(config.n_iter):
        prop = phi + chol @ rng.standard_normal(d)
        new, new_post = _log_target(prop, data, prior, config.use_likelihood)
        log_alpha = new - cur
        if np.log(rng.uniform()) < log_alpha:
            phi, cur, cur_post = prop, new, new_post
            if t >= config.n_burn:
                accepted += 1

        if t < config.n_burn:
            if t in restarts:
                # forget the transient from the starting point
                mean_acc, cov_acc, k0 = phi.copy(), np.zeros((d, d)), t
            # Welford running moments of the log-parameter history; the state
            # at k0 is the first of k samples
            k = t - k0 + 1
            if t > k0:
                delta = phi - mean_acc
                mean_acc = mean_acc + delta / k
                cov_acc = cov_acc + np.outer(delta, phi - mean_acc)
            gamma = (t + 1) ** -0.6
            log_scale += gamma * (min(1.0, np.exp(min(log_alpha, 0.0))) - config.target_accept)
            if k >= config.adapt_start:
                cov = cov_acc / k + 1e-8 * np.eye(d)
            try:
                chol = np.linalg.cholesky(np.exp(log_scale) * cov)
            except np.linalg.LinAlgError:
                chol = np.linalg.cholesky(np.exp(log_scale) * (cov + 1e-6 * np.eye(d)))
            if t == config.n_burn - 1:
                frozen = np.exp(log_scale) * cov
                chol = np.linalg.cholesky(frozen)
        else:
            j = t - config.n_burn
            draws[j] = np.exp(phi)
            logpost[j] = cur_post
            if j in (0, n_keep - 1):
                snapshots.append(chol @ chol.T)

    return Chain(
        draws=draws,
        log_posterior=logpost,
        acceptance_rate=accepted / n_keep,
        seed=config.seed,
        proposal_cov=chol @ chol.T,
        cov_snapshots=snapshots,
    )


def spawn_seeds(master_seed: int, n: int) -> list[int]:
    """Independent per-job seeds derived from one master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(c.generate_state(1)[0]) for c in ss.spawn(n)]


def run_chains(data: TransportData, prior: PriorSpec, config: ChainConfig, n_chains: int = 2,
               n_jobs: int = 1) -> list[Chain]:
    from dataclasses import replace

    from joblib import Parallel, delayed

    seeds = spawn_seeds(config.seed, n_chains)
    configs = [replace(config, seed=s) for s in seeds]
    if n_jobs == 1:
        return [run_chain(data, prior, c) for c in configs]
    return Parallel(n_jobs=n_jobs)(delayed(run_chain)(data, prior, c) for c in configs)


# --- convergence diagnostics ----------------------------------------------

@dataclass
class Diagnostics:
    ess: dict
    rhat: dict
    accept: list
    flags: list

    def to_json(self) -> str:
        clean = lambda d: {k: (None if not np.isfinite(v) else float(v)) for k, v in d.items()}
        return json.dumps({"ess": clean(self.ess), "rhat": clean(self.rhat),
                           "accept": self.accept, "flags": self.flags}, sort_keys=True)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), nfft)
    return np.fft.irfft(f * np.conj(f), nfft)[:n] / n


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((ranks - 0.375) / (x.size + 0.25))


def _split(x: np.ndarray) -> np.ndarray:
    n = x.shape[1] // 2
    return np.vstack([x[:, :n], x[:, -n:]])


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    chain_var = x.var(axis=1, ddof=1)
    W = chain_var.mean()
    B = n * x.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def ess_basic(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    acov = np.array([_autocov(c) for c in x])
    chain_mean = x.mean(axis=1)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # sum consecutive pairs while positive, forcing them monotone
    tau = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        tau += pair
        prev = pair
        t += 2
    tau = 2.0 * tau - 1.0
    return float(m * n / max(tau, 1.0 / np.log10(m * n)))


def diagnostics(chains, names=PARAM_NAMES) -> Diagnostics:
    """Rank-normalized split R-hat and bulk ESS per parameter.

    Accepts Chain objects or raw (n_draws, n_params) arrays.
    """
    arrays = [c.draws if isinstance(c, Chain) else np.asarray(c, dtype=float) for c in chains]
    accept = [float(c.acceptance_rate) for c in chains if isinstance(c, Chain)]
    lengths = {a.shape[0] for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"chains must have equal length, got {sorted(lengths)}")
    stacked = np.stack([a.reshape(a.shape[0], -1) for a in arrays])  # (m, n, p)
    flags = []
    if len(arrays) < 2:
        flags.append("single_chain:rhat_omitted")
        warnings.warn("R-hat needs at least two chains; omitted", stacklevel=2)
    ess, rhat = {}, {}
    for p, name in enumerate(names[: stacked.shape[2]]):
        x = stacked[:, :, p]
        if np.ptp(x) == 0:
            ess[name] = np.nan
            rhat[name] = np.nan
            flags.append(f"degenerate:{name}")
            continue
        z = _rank_normalize(_split(x))
        ess[name] = ess_basic(z)
        if len(arrays) < 2:
            rhat[name] = np.nan
            continue
        folded = np.abs(x - np.median(x))
        rhat[name] = max(_rhat_basic(z), _rhat_basic(_rank_normalize(_split(folded))))
    return Diagnostics(ess=ess, rhat=rhat, accept=accept, flags=flags)

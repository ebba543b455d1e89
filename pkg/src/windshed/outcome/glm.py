"""Bayesian log-linear Poisson regression with a population offset.

The linear predictor is ``x'beta + phi*z + gamma*g + psi*z*g`` with the
covariates standardized internally.  Every coefficient gets a N(0, 10^2)
prior.  Sampling is random-walk Metropolis started at the posterior mode,
with the proposal shaped by the inverse Hessian there and its scale tuned
during burn-in.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .table import OutcomeTable, OutcomeValidationError

EXPOSURE_TERMS = ("phi", "gamma", "psi")


@dataclass(frozen=True)
class GLMConfig:
    n_iter: int = 4000
    n_burn: int = 1000
    seed: int = 0
    prior_sd: float = 10.0
    thin: int = 1
    target_accept: float = 0.234
    exposure_terms: bool = True  # False fixes phi = gamma = psi = 0


@dataclass(frozen=True)
class GLMParams:
    """One draw on the raw covariate scale; ``beta[0]`` is the intercept."""

    beta: np.ndarray
    phi: float
    gamma: float
    psi: float

    def log_rate_factor(self, x, z, g) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.asarray(z, dtype=float)
        g = np.asarray(g, dtype=float)
        return self.beta[0] + x @ self.beta[1:] + self.phi * z + self.gamma * g + self.psi * z * g


def design_matrix(x, z, g) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
    g = np.broadcast_to(np.asarray(g, dtype=float), (n,))
    return np.column_stack([np.ones(n), x, z, g, z * g])


def _collinear_columns(X, names) -> list:
    bad = []
    kept = []
    for j in range(X.shape[1]):
        trial = X[:, kept + [j]]
        if np.linalg.matrix_rank(trial) < len(kept) + 1:
            bad.append(names[j])
        else:
            kept.append(j)
    return bad


@dataclass
class GLMPosterior:
    coef: np.ndarray  # (draws, 1 + p + 3) on the standardized scale
    x_mean: np.ndarray
    x_scale: np.ndarray
    x_names: tuple
    acceptance_rate: float
    x_range: tuple = ()

    model = "glm"

    @property
    def n_draws(self) -> int:
        return self.coef.shape[0]

    @property
    def column_names(self) -> tuple:
        return ("intercept",) + self.x_names + EXPOSURE_TERMS

    def _standardize(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - self.x_mean) / self.x_scale

    def log_rate_factor(self, x, z, g) -> np.ndarray:
        """log f for every draw and row, shape (draws, n)."""
        X = design_matrix(self._standardize(x), z, g)
        return self.coef @ X.T

    def draw(self, d: int) -> GLMParams:
        c = self.coef[d]
        p = len(self.x_names)
        slopes = c[1:1 + p] / self.x_scale
        intercept = c[0] - slopes @ self.x_mean
        return GLMParams(np.concatenate([[intercept], slopes]), *c[1 + p:])

    def to_records(self):
        for d in range(self.n_draws):
            prm = self.draw(d)
            yield {"model": "glm", "draw": d, "beta": prm.beta.tolist(),
                   "phi": float(prm.phi), "gamma": float(prm.gamma), "psi": float(prm.psi),
                   "x_names": list(self.x_names)}

    @classmethod
    def from_records(cls, records) -> "GLMPosterior":
        records = list(records)
        names = tuple(records[0]["x_names"])
        coef = np.array([r["beta"] + [r["phi"], r["gamma"], r["psi"]] for r in records], dtype=float)
        p = len(names)
        return cls(coef=coef, x_mean=np.zeros(p), x_scale=np.ones(p), x_names=names, acceptance_rate=np.nan)


def _log_post(b, X, y, log_off, prior_var):
    eta = X @ b + log_off
    return float(y @ eta - np.exp(eta).sum() - 0.5 * b @ b / prior_var)


def _posterior_mode(X, y, log_off, prior_var, max_iter=100):
    d = X.shape[1]
    b = np.zeros(d)
    # start the intercept at the pooled log rate so Newton steps stay small
    b[0] = np.log((y.sum() + 0.5) / np.exp(log_off).sum())
    for _ in range(max_iter):
        mu = np.exp(X @ b + log_off)
        grad = X.T @ (y - mu) - b / prior_var
        H = (X * mu[:, None]).T @ X + np.eye(d) / prior_var
        step = np.linalg.solve(H, grad)
        # damp huge steps that can appear when counts are all zero
        scale = min(1.0, 5.0 / max(np.max(np.abs(step)), 1e-300))
        b = b + scale * step
        if np.max(np.abs(step)) < 1e-10:
            break
    mu = np.exp(X @ b + log_off)
    H = (X * mu[:, None]).T @ X + np.eye(d) / prior_var
    return b, H


def fit_poisson_glm(table: OutcomeTable, config: GLMConfig = GLMConfig()) -> GLMPosterior:
    if len(table) == 0:
        raise OutcomeValidationError("empty outcome table")
    x_mean = table.x.mean(axis=0)
    x_scale = table.x.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    xs = (table.x - x_mean) / x_scale
    X = design_matrix(xs, table.z, table.g)
    names = ("intercept",) + table.x_names + EXPOSURE_TERMS
    n_fixed = 0 if config.exposure_terms else len(EXPOSURE_TERMS)
    if n_fixed:
        X, names = X[:, :-n_fixed], names[:-n_fixed]
    bad = _collinear_columns(X, names)
    if bad:
        raise OutcomeValidationError(f"design matrix is rank deficient; collinear columns: {bad}")

    y = table.y.astype(float)
    log_off = np.log(table.offset)
    prior_var = config.prior_sd ** 2
    b, H = _posterior_mode(X, y, log_off, prior_var)
    d = X.shape[1]
    base_cov = np.linalg.inv(H)
    base_cov = 0.5 * (base_cov + base_cov.T)
    base_chol = np.linalg.cholesky(base_cov)
    log_scale = np.log(2.38 ** 2 / d)

    rng = np.random.default_rng(config.seed)
    cur = _log_post(b, X, y, log_off, prior_var)
    kept = []
    accepted = 0
    for t in range(config.n_iter):
        prop = b + np.exp(0.5 * log_scale) * (base_chol @ rng.standard_normal(d))
        new = _log_post(prop, X, y, log_off, prior_var)
        log_alpha = new - cur
        if np.log(rng.uniform()) < log_alpha:
            b, cur = prop, new
            if t >= config.n_burn:
                accepted += 1
        if t < config.n_burn:
            log_scale += (t + 1) ** -0.6 * (min(1.0, np.exp(min(log_alpha, 0.0))) - config.target_accept)
        elif (t - config.n_burn) % config.thin == 0:
            kept.append(b.copy())
    n_keep = config.n_iter - config.n_burn
    coef = np.array(kept)
    if n_fixed:
        coef = np.hstack([coef, np.zeros((len(coef), n_fixed))])
    return GLMPosterior(
        coef=coef, x_mean=x_mean, x_scale=x_scale, x_names=table.x_names,
        acceptance_rate=accepted / max(n_keep, 1),
        x_range=(table.features.min(axis=0), table.features.max(axis=0)),
    )

"""Causal contrasts by g-computation, and cut-posterior pooling.

A fitted outcome model (GLM or BART posterior) exposes
``log_rate_factor(x, z, g)`` returning log f for every draw.  The
dose-response at (z, g) averages f over the observed covariates with
(z, g) set for every region, reported per 1000 offset units.

Under modular (cut) inference each transport draw yields its own exposures
and outcome fit; the per-imputation draw sets are then pooled.  Rubin's
within/between decomposition is reported alongside percentile intervals of
the pooled draws.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .outcome.table import OutcomeTable, OutcomeValidationError

PER = 1000.0
MIN_DRAWS = 50
EFFECTS_HEADER = ("estimand", "z", "g", "point", "ci_low", "ci_high", "within_var",
                  "between_var", "between_share", "method", "model")


@dataclass(frozen=True)
class EstimandGrid:
    g_values: tuple
    g_min: float
    z_values: tuple = (0, 1)

    def __post_init__(self):
        g = np.asarray(self.g_values, dtype=float)
        if g.size == 0 or np.any(np.diff(g) <= 0) or g[0] < 0 or g[-1] > 1:
            raise ValueError("g_values must be strictly increasing within [0, 1]")
        if self.g_min > g[0]:
            raise ValueError(f"g_min={self.g_min} exceeds smallest evaluation point {g[0]}")
        object.__setattr__(self, "g_values", tuple(float(v) for v in g))

    @classmethod
    def from_exposures(cls, g_mean, n_points: int = 11, g_min: float | None = None) -> "EstimandGrid":
        """Evenly spaced points over the 5th-95th percentile of mean exposure;
        baseline defaults to the 5th percentile."""
        lo, hi = np.percentile(g_mean, [5, 95])
        base = float(lo) if g_min is None else float(g_min)
        return cls(tuple(np.linspace(max(lo, base), hi, n_points)), base)

    def check_support(self, g_mean) -> list:
        lo, hi = np.percentile(g_mean, [5, 95])
        outside = [g for g in self.g_values if g < lo or g > hi]
        if outside:
            warnings.warn(f"estimand points outside the 5th-95th percentile of G: {outside}", stacklevel=2)
        return outside

    def weights(self, g_mean) -> np.ndarray:
        """Empirical distribution of mean exposures binned to the nearest grid point."""
        g = np.asarray(self.g_values)
        nearest = np.argmin(np.abs(np.asarray(g_mean)[:, None] - g[None, :]), axis=1)
        return np.bincount(nearest, minlength=g.size) / len(g_mean)


@dataclass(frozen=True)
class EffectEstimate:
    point: float
    ci_low: float
    ci_high: float
    within_var: float
    between_var: float
    total_var: float
    between_share: float
    n_imputations: int = 1
    flags: tuple = ()


def _check_table(table: OutcomeTable):
    if len(table) == 0:
        raise OutcomeValidationError("empty outcome table")


def dose_response_surface(model, table: OutcomeTable, z_values, g_values) -> np.ndarray:
    """mu(z, g) for every draw: shape (draws, len(z_values), len(g_values))."""
    _check_table(table)
    n = len(table)
    zs, gs = np.meshgrid(np.asarray(z_values, float), np.asarray(g_values, float), indexing="ij")
    k = zs.size
    x = np.tile(table.x, (k, 1))
    z = np.repeat(zs.ravel(), n)
    g = np.repeat(gs.ravel(), n)
    f = np.exp(model.log_rate_factor(x, z, g))  # (draws, k * n)
    mu = PER * f.reshape(f.shape[0], k, n).mean(axis=2)
    return mu.reshape(f.shape[0], *zs.shape)


def dose_response(model, table: OutcomeTable, z, g) -> np.ndarray:
    return dose_response_surface(model, table, [z], [g])[:, 0, 0]


def direct_effect(model, table, g) -> np.ndarray:
    mu = dose_response_surface(model, table, [0, 1], [g])
    return mu[:, 1, 0] - mu[:, 0, 0]


def indirect_effect(model, table, z, g, g_min) -> np.ndarray:
    if g < g_min:
        raise ValueError(f"g={g} is below the baseline g_min={g_min}")
    mu = dose_response_surface(model, table, [z], [g_min, g])
    return mu[:, 0, 1] - mu[:, 0, 0]


def average_direct_effect(model, table, grid: EstimandGrid, g_mean) -> np.ndarray:
    mu = dose_response_surface(model, table, [0, 1], grid.g_values)
    return (mu[:, 1, :] - mu[:, 0, :]) @ grid.weights(g_mean)


def average_indirect_effect(model, table, z, grid: EstimandGrid, g_mean) -> np.ndarray:
    mu = dose_response_surface(model, table, [z], (grid.g_min,) + grid.g_values)
    ie = mu[:, 0, 1:] - mu[:, 0, :1]
    return ie @ grid.weights(g_mean)


@dataclass(frozen=True)
class EstimandKey:
    estimand: str
    z: int | None = None
    g: float | None = None


def estimand_draws(model, table: OutcomeTable, grid: EstimandGrid, g_mean) -> dict:
    """Per-draw values of every estimand on the grid, from one surface evaluation."""
    g_all = tuple(sorted(set((grid.g_min,) + grid.g_values)))
    mu = dose_response_surface(model, table, grid.z_values, g_all)
    gi = {g: i for i, g in enumerate(g_all)}
    zi = {z: i for i, z in enumerate(grid.z_values)}
    w = grid.weights(g_mean)
    out = {}
    for z in grid.z_values:
        for g in grid.g_values:
            out[EstimandKey("mu", z, g)] = mu[:, zi[z], gi[g]]
    for g in grid.g_values:
        out[EstimandKey("DE", None, g)] = mu[:, zi[1], gi[g]] - mu[:, zi[0], gi[g]]
    out[EstimandKey("ADE")] = np.stack([out[EstimandKey("DE", None, g)] for g in grid.g_values], 1) @ w
    for z in grid.z_values:
        base = mu[:, zi[z], gi[grid.g_min]]
        ies = []
        for g in grid.g_values:
            out[EstimandKey("IE", z, g)] = mu[:, zi[z], gi[g]] - base
            ies.append(out[EstimandKey("IE", z, g)])
        out[EstimandKey("AIE", z)] = np.stack(ies, 1) @ w
    return out


def rubin_combine(q, u) -> tuple[float, float, float, float]:
    """Rubin's rules from per-imputation means ``q`` and variances ``u``:
    (point, within, between, total)."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    K = q.size
    W = float(u.mean())
    B = float(q.var(ddof=1)) if K > 1 else 0.0
    return float(q.mean()), W, B, W + (1.0 + 1.0 / K) * B


def pool_cut(draw_sets) -> EffectEstimate:
    """Pool per-imputation posterior draws of one scalar estimand.

    ``total_var = W + (1 + 1/K) B``; the interval is the 2.5/97.5 percentile
    of all draws mixed together (empirical-CDF quantiles).
    """
    sets = [np.asarray(s, dtype=float).ravel() for s in draw_sets]
    K = len(sets)
    if K == 0 or any(s.size < MIN_DRAWS for s in sets):
        raise ValueError(f"each imputation needs at least {MIN_DRAWS} posterior draws")
    q = np.array([s.mean() for s in sets])
    u = np.array([s.var(ddof=1) for s in sets])
    _, W, B, total = rubin_combine(q, u)
    flags = ("plugin:single_imputation",) if K == 1 else ()
    pooled = np.concatenate(sets)
    # empirical-CDF quantiles depend only on the mixture, not on how many
    # copies of each draw set were pooled
    lo, hi = np.percentile(pooled, [2.5, 97.5], method="inverted_cdf")
    share = (1.0 + 1.0 / K) * B / total if total > 0 else 0.0
    return EffectEstimate(float(q.mean()), float(lo), float(hi), W, B, total, float(share), K, flags)


def pool_estimands(per_imputation: list) -> dict:
    """``[{key: draws}, ...]`` from K imputations -> ``{key: EffectEstimate}``."""
    keys = per_imputation[0].keys()
    return {k: pool_cut([d[k] for d in per_imputation]) for k in keys}


@dataclass
class EffectsResult:
    """Pooled estimates by method ('plugin', 'cut') and model name."""

    grid: EstimandGrid
    estimates: dict = field(default_factory=dict)  # (method, model) -> {EstimandKey: EffectEstimate}
    theta_digest: str = ""

    def rows(self):
        for (method, model), est in self.estimates.items():
            for key, e in est.items():
                yield key, e, method, model


def effects_rows(result: EffectsResult, include_mu: bool = False) -> list:
    rows = []
    for key, e, method, model in result.rows():
        if key.estimand == "mu" and not include_mu:
            continue
        rows.append([key.estimand, "" if key.z is None else int(key.z), "" if key.g is None else repr(float(key.g)),
                     repr(e.point), repr(e.ci_low), repr(e.ci_high), repr(e.within_var), repr(e.between_var),
                     repr(e.between_share), method, model])
    return rows


def write_effects_csv(result: EffectsResult, path, include_mu: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EFFECTS_HEADER)
        w.writerows(effects_rows(result, include_mu))


def variance_report(result: EffectsResult) -> str:
    lines = ["method,model,estimand,z,g,within_var,between_var,total_var,between_share"]
    for key, e, method, model in result.rows():
        if key.estimand == "mu":
            continue
        lines.append(",".join([method, model, key.estimand, "" if key.z is None else str(key.z),
                               "" if key.g is None else repr(float(key.g)), repr(e.within_var),
                               repr(e.between_var), repr(e.total_var), repr(e.between_share)]))
    return "\n".join(lines) + "\n"


def fit_outcome(table: OutcomeTable, kind: str, config=None):
    from .outcome import BARTConfig, GLMConfig, fit_loglinear_bart, fit_poisson_glm

    if kind == "glm":
        return fit_poisson_glm(table, config or GLMConfig())
    if kind == "bart":
        return fit_loglinear_bart(table, config or BARTConfig())
    raise ValueError(f"unknown outcome model {kind!r}")


def thin_indices(n_available: int, k: int) -> np.ndarray:
    """``k`` evenly spaced draw indices."""
    if k > n_available:
        raise ValueError(f"requested {k} draws but only {n_available} available")
    return np.unique(np.linspace(0, n_available - 1, k).round().astype(int))


def _fit_and_evaluate(table, kind, config, grid, g_mean):
    return estimand_draws(fit_outcome(table, kind, config), table, grid, g_mean)


def effects_from_exposures(table: OutcomeTable, plugin=None, cut=None, *, models=("glm",),
                           configs: dict | None = None, grid: EstimandGrid | None = None,
                           n_jobs: int = 1, theta_digest: str = "") -> EffectsResult:
    """Pool estimands from exposure sets given as ``(region_ids, z, g)``.

    ``plugin`` is a single set, ``cut`` a list of K sets; either may be
    omitted.  The outcome fits share one config per model (seed included)
    across both arms.
    """
    if plugin is None and not cut:
        raise ValueError("need plug-in exposures, cut exposures, or both")
    configs = configs or {}
    cut_tables = [table.align_exposure(*c) for c in (cut or [])]
    plug_table = table.align_exposure(*plugin) if plugin is not None else None
    if cut_tables:
        g_mean = np.mean([t.g for t in cut_tables], axis=0)
    else:
        g_mean = plug_table.g
    if grid is None:
        grid = EstimandGrid.from_exposures(g_mean)
    result = EffectsResult(grid=grid, theta_digest=theta_digest)
    for kind in models:
        cfg = configs.get(kind)
        if plug_table is not None:
            result.estimates[("plugin", kind)] = pool_estimands(
                [_fit_and_evaluate(plug_table, kind, cfg, grid, plug_table.g)])
        if not cut_tables:
            continue
        if n_jobs == 1:
            per_imp = [_fit_and_evaluate(t, kind, cfg, grid, g_mean) for t in cut_tables]
        else:
            from joblib import Parallel, delayed

            per_imp = Parallel(n_jobs=n_jobs)(
                delayed(_fit_and_evaluate)(t, kind, cfg, grid, g_mean) for t in cut_tables)
        result.estimates[("cut", kind)] = pool_estimands(per_imp)
    return result


def plugin_vs_cut(theta_draws, transport, facilities, region_map, table: OutcomeTable, *,
                  emission_scale: float = 1.0, n_imputations: int = 250, models=("glm",),
                  configs: dict | None = None, grid: EstimandGrid | None = None,
                  n_jobs: int = 1) -> EffectsResult:
    """Plug-in (posterior-mean transport) and cut (K imputations) estimates.

    The outcome fits in both arms share one config per model, seed
    included, so a point-mass transport posterior reproduces the plug-in
    estimate exactly.
    """
    from .exposure import posterior_exposures
    from .mcmc import draws_digest
    from .transport import TransportParams

    draws = np.asarray(theta_draws, dtype=float)
    idx = thin_indices(len(draws), min(n_imputations, len(draws)))
    cut_exp = posterior_exposures([TransportParams.from_array(d) for d in draws[idx]], transport,
                                  facilities, region_map, emission_scale=emission_scale, n_jobs=n_jobs)
    plug_exp = posterior_exposures([TransportParams.from_array(draws.mean(axis=0))], transport,
                                   facilities, region_map, emission_scale=emission_scale)
    p = plug_exp.assignments[0]
    return effects_from_exposures(
        table, (p.region_ids, p.z, p.g), [(a.region_ids, a.z, a.g) for a in cut_exp.assignments],
        models=models, configs=configs, grid=grid, n_jobs=n_jobs, theta_digest=draws_digest(draws))

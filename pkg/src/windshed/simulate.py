"""Synthetic scenarios and the plug-in vs. cut replication study.

Scenario geometry (facilities, regions, scrubber status) is fixed by the
spec seed; each replicate draws fresh sulfate noise, covariates, offsets
and counts from its own seed stream.  Generators go through the same
transport and exposure code used for estimation.
"""
from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import asdict, dataclass, replace

import numpy as np

from .effects import EstimandGrid, EstimandKey, plugin_vs_cut
from .exposure import exposure_levels, key_associated, source_receptor_matrix
from .grid import Facility, Field, RasterGrid, RegionMap, rasterize_sources
from .mcmc import ChainConfig, PriorSpec, TransportData, run_chain
from .outcome import BARTConfig, GLMConfig, OutcomeTable
from .transport import PARAM_NAMES, TransportModel, TransportParams, steady_state_mean

log = logging.getLogger(__name__)

RESULTS_HEADER = ("scenario", "method", "model", "estimand", "z", "g", "bias", "bias_se", "rmse",
                  "ci_width", "coverage", "between_share", "n_ok", "n_failed")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "bundled"
    nrows: int = 12
    ncols: int = 12
    cell_size: float = 1.0
    wind: str = "uniform"
    wind_u: float = 1.0
    wind_v: float = 0.5
    n_facilities: int = 4
    facility_cells: tuple | None = ((8, 2), (2, 8), (9, 6), (2, 3))
    scrubbed: tuple | None = (1, 0, 1, 0)
    scrub_prob: float = 0.5
    so2_meanlog: float = 7.8
    so2_sdlog: float = 0.4
    theta1: float = 0.5
    theta2: float = 1.0
    theta3: float = 0.5
    delta: float = 0.5
    sigma2: float = 0.02
    beta0: float = 1.0
    emission_scale: float = 0.01
    n_regions: int = 20
    n_covariates: int = 2
    dgp: str = "glm"
    beta: tuple = (-4.0, 0.2, -0.1)
    phi: float = -0.2
    gamma: float = -0.5
    psi: float = 0.0
    offset_meanlog: float = 8.0
    offset_sdlog: float = 0.5
    seed: int = 2016

    def __post_init__(self):
        if self.n_facilities < 2:
            raise ValueError("need at least two facilities")
        if self.n_regions < 10:
            raise ValueError("need at least ten regions")
        if self.n_regions > self.nrows * self.ncols:
            raise ValueError("more regions than grid cells")
        if self.wind not in ("zero", "uniform", "rotational"):
            raise ValueError(f"unknown wind pattern {self.wind!r}")
        if self.dgp != "glm" and self.dgp not in SURFACES:
            raise ValueError(f"unknown outcome DGP {self.dgp!r}")
        if len(self.beta) != self.n_covariates + 1:
            raise ValueError("beta needs an intercept plus one slope per covariate")
        if self.facility_cells is not None and len(self.facility_cells) != self.n_facilities:
            raise ValueError("facility_cells length must equal n_facilities")

    @property
    def params(self) -> TransportParams:
        return TransportParams(*(getattr(self, n) for n in PARAM_NAMES))


# --- outcome surfaces ------------------------------------------------------

def _linear_part(spec, x):
    return spec.beta[0] + x @ np.asarray(spec.beta[1:], dtype=float)


SURFACES = {
    "threshold": lambda s, x, z, g: _linear_part(s, x) + s.phi * z + s.gamma * (g > 0.5),
    "bump": lambda s, x, z, g: _linear_part(s, x) + s.phi * z + s.gamma * np.exp(-(((g - 0.5) / 0.12) ** 2)),
    "quadratic": lambda s, x, z, g: _linear_part(s, x) + s.phi * z + s.gamma * 4.0 * (g - 0.5) ** 2,
    "sine": lambda s, x, z, g: _linear_part(s, x) + s.phi * z + s.gamma * np.sin(2 * np.pi * g),
    "step_interaction": lambda s, x, z, g: _linear_part(s, x) + s.phi * z * (g > 0.5) + s.gamma * (g > 0.4),
}


def true_log_rate(spec: ScenarioSpec, x, z, g) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.asarray(z, dtype=float)
    g = np.asarray(g, dtype=float)
    if spec.dgp == "glm":
        return _linear_part(spec, x) + spec.phi * z + spec.gamma * g + spec.psi * z * g
    return SURFACES[spec.dgp](spec, x, z, g)


def sample_truth(spec: ScenarioSpec, x, z, g) -> float:
    """mu(z, g) averaged over the given covariate rows, per 1000 offset units."""
    n = len(x)
    return float(1000.0 * np.mean(np.exp(true_log_rate(spec, x, np.full(n, z), np.full(n, g)))))


def population_truth(spec: ScenarioSpec, z, g, n_mc: int = 10_000_000, seed: int = 99) -> float:
    """mu(z, g) over the covariate distribution: closed form for GLM DGPs,
    brute-force Monte Carlo otherwise."""
    if spec.dgp == "glm":
        b = np.asarray(spec.beta[1:], dtype=float)
        lin = spec.beta[0] + spec.phi * z + spec.gamma * g + spec.psi * z * g
        return float(1000.0 * np.exp(lin + 0.5 * b @ b))
    rng = np.random.default_rng(seed)
    total, done, chunk = 0.0, 0, 1_000_000
    while done < n_mc:
        k = min(chunk, n_mc - done)
        x = rng.standard_normal((k, spec.n_covariates))
        total += np.exp(true_log_rate(spec, x, np.full(k, z), np.full(k, g))).sum()
        done += k
    return float(1000.0 * total / n_mc)


# --- scenario geometry -------------------------------------------------------

@dataclass
class Scenario:
    spec: ScenarioSpec
    grid: RasterGrid
    wind_u: Field
    wind_v: Field
    model: TransportModel
    facilities: list
    region_map: RegionMap
    sources: Field
    key_assoc: np.ndarray


def wind_fields(spec: ScenarioSpec, grid: RasterGrid) -> tuple[Field, Field]:
    if spec.wind == "zero":
        return Field.constant(grid, 0.0), Field.constant(grid, 0.0)
    if spec.wind == "uniform":
        return Field.constant(grid, spec.wind_u), Field.constant(grid, spec.wind_v)
    x, y = grid.cell_centers()
    xmin, xmax, ymin, ymax = grid.extent
    xc, yc = (xmin + xmax) / 2, (ymin + ymax) / 2
    u = -spec.wind_u * (y - yc) / ((ymax - ymin) / 2)
    v = spec.wind_u * (x - xc) / ((xmax - xmin) / 2)
    return Field(grid, u), Field(grid, v)


def tessellate(grid: RasterGrid, n_regions: int, rng) -> RegionMap:
    """Contiguous regions grown breadth-first from random seed cells."""
    seeds = rng.choice(grid.n_cells, size=n_regions, replace=False)
    labels = np.zeros(grid.n_cells, dtype=np.int64)
    queue = deque()
    for rid, cell in enumerate(seeds, start=1):
        labels[cell] = rid
        queue.append(cell)
    nr, nc = grid.nrows, grid.ncols
    while queue:
        k = queue.popleft()
        r, c = divmod(int(k), nc)
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < nr and 0 <= cc < nc and labels[rr * nc + cc] == 0:
                labels[rr * nc + cc] = labels[k]
                queue.append(rr * nc + cc)
    return RegionMap(grid, labels)


def build_scenario(spec: ScenarioSpec) -> Scenario:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0)))
    grid = RasterGrid(spec.ncols, spec.nrows, spec.cell_size)
    u, v = wind_fields(spec, grid)
    if spec.facility_cells is None:
        cells = rng.choice(grid.n_cells, size=spec.n_facilities, replace=False)
        rc = [divmod(int(c), grid.ncols) for c in cells]
    else:
        rc = [tuple(p) for p in spec.facility_cells]
    if spec.scrubbed is None:
        # keep at least a third of the facilities in each arm so both
        # treatment levels are represented among key-associated regions
        min_arm = max(1, int(np.ceil(spec.n_facilities / 3)))
        while True:
            scrubbed = rng.uniform(size=spec.n_facilities) < spec.scrub_prob
            if min_arm <= scrubbed.sum() <= spec.n_facilities - min_arm:
                break
    else:
        scrubbed = np.asarray(spec.scrubbed, dtype=bool)
    tons = rng.lognormal(spec.so2_meanlog, spec.so2_sdlog, spec.n_facilities)
    xs, ys = grid.cell_centers()
    facilities = []
    for j, (r, c) in enumerate(rc):
        k = r * grid.ncols + c
        facilities.append(Facility(f"F{j + 1:03d}", float(xs[k]), float(ys[k]), float(tons[j]), bool(scrubbed[j]),
                                   heat_input=float(tons[j]) * 10.0, operating_time=8000.0))
    region_map = tessellate(grid, spec.n_regions, rng)
    return Scenario(
        spec=spec, grid=grid, wind_u=u, wind_v=v, model=TransportModel(grid, u, v),
        facilities=facilities, region_map=region_map,
        sources=rasterize_sources(facilities, grid, spec.emission_scale),
        key_assoc=key_associated(facilities, region_map),
    )


# --- generators --------------------------------------------------------------

def simulate_transport_field(scenario: Scenario, seed: int, params: TransportParams | None = None) -> Field:
    """One draw of observed sulfate: ``beta0 + mu + sigma * A^-1 eps``."""
    params = params or scenario.spec.params
    ops = scenario.model.operators(params)
    mean = params.beta0 + steady_state_mean(ops, scenario.sources, params)
    eps = np.random.default_rng(seed).standard_normal(ops.n)
    noise = np.sqrt(params.sigma2) * ops.lu_A.solve(eps)
    return Field(scenario.grid, mean + noise)


def true_exposures(scenario: Scenario):
    sr = source_receptor_matrix(scenario.spec.params, scenario.model, scenario.facilities,
                                scenario.region_map, scenario.spec.emission_scale)
    return exposure_levels(sr, [f.scrubbed for f in scenario.facilities], scenario.key_assoc)


def simulate_outcomes(spec: ScenarioSpec, exposures, seed: int) -> OutcomeTable:
    rng = np.random.default_rng(seed)
    n = len(exposures.g)
    x = rng.standard_normal((n, spec.n_covariates))
    offset = rng.lognormal(spec.offset_meanlog, spec.offset_sdlog, n)
    if np.any(offset <= 0):
        raise ValueError("offsets must be positive")
    with np.errstate(over="ignore"):
        rate = offset * np.exp(true_log_rate(spec, x, exposures.z, exposures.g))
    bad = np.flatnonzero(~np.isfinite(rate) | (rate > 1e15))
    if bad.size:
        raise ValueError(f"rate overflow in regions {[exposures.region_ids[i] for i in bad]}")
    y = rng.poisson(rate)
    return OutcomeTable(np.asarray(exposures.region_ids), y, offset, x, exposures.z, exposures.g)


# --- replication study -------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    chain_iter: int = 5000
    chain_burn: int = 2500
    prior_factor: float = 10.0
    n_imputations: int = 20
    models: tuple = ("glm",)
    methods: tuple = ("plugin", "cut")
    glm_iter: int = 2500
    glm_burn: int = 500
    glm_thin: int = 2
    bart_m: int = 50
    bart_iter: int = 500
    bart_burn: int = 200
    g_values: tuple | None = None
    g_min: float | None = None
    transport: str = "fit"


def _replicate(scenario: Scenario, study: StudyConfig, rep: int) -> dict:
    spec = scenario.spec
    ss = np.random.SeedSequence((spec.seed, 1, rep))
    s_field, s_outcome, s_chain, s_model = (int(c.generate_state(1)[0]) for c in ss.spawn(4))

    exp_true = true_exposures(scenario)
    table = simulate_outcomes(spec, exp_true, s_outcome)
    if study.transport == "fit":
        observed = simulate_transport_field(scenario, s_field)
        prior = PriorSpec.from_magnitudes(asdict(spec.params), study.prior_factor)
        chain = run_chain(TransportData(observed, scenario.sources, scenario.model), prior,
                          ChainConfig(study.chain_iter, study.chain_burn, s_chain))
        theta = chain.draws
    else:
        theta = np.tile(spec.params.as_array(), (2, 1))

    grid = study_grid(study, exp_true.g)
    configs = {
        "glm": GLMConfig(study.glm_iter, study.glm_burn, s_model, thin=study.glm_thin),
        "bart": BARTConfig(m=study.bart_m, n_iter=study.bart_iter, n_burn=study.bart_burn, seed=s_model),
    }
    result = plugin_vs_cut(theta, scenario.model, scenario.facilities, scenario.region_map, table,
                           emission_scale=spec.emission_scale, n_imputations=study.n_imputations,
                           models=study.models, configs=configs, grid=grid)
    truth = {}
    for z in grid.z_values:
        for g in set(grid.g_values) | {grid.g_min}:
            truth[(z, g)] = sample_truth(spec, table.x, z, g)
    out = {}
    for (method, model), est in result.estimates.items():
        if method not in study.methods:
            continue
        for key, e in est.items():
            if key.estimand == "mu":
                t = truth[(key.z, key.g)]
            elif key.estimand == "DE":
                t = truth[(1, key.g)] - truth[(0, key.g)]
            elif key.estimand == "IE":
                t = truth[(key.z, key.g)] - truth[(key.z, grid.g_min)]
            else:
                continue
            out[(method, model, key)] = (e.point, e.ci_low, e.ci_high, t, e.between_share)
    return out


def study_grid(study: StudyConfig, g_true) -> EstimandGrid:
    """Evaluation points; defaults sit at the 20/40/60/80th percentiles of the
    true exposures with the 5th percentile as baseline."""
    g_min = float(np.percentile(g_true, 5)) if study.g_min is None else study.g_min
    if study.g_values is None:
        return EstimandGrid(tuple(np.round(np.percentile(g_true, [20, 40, 60, 80]), 6)), g_min)
    return EstimandGrid(study.g_values, g_min)


def _safe_replicate(scenario, study, rep):
    try:
        return _replicate(scenario, study, rep)
    except Exception as exc:  # recorded per replicate, never fatal
        log.warning("replicate %d of %s failed: %s", rep, scenario.spec.name, exc)
        return None


def run_replication_study(spec: ScenarioSpec, n_replicates: int, study: StudyConfig = StudyConfig(),
                          n_jobs: int = 1) -> list[dict]:
    """Operating characteristics of each (method, model, estimand)."""
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    if n_replicates < 20:
        log.warning("%d replicates: operating characteristics will be noisy (20 or more recommended)", n_replicates)
    scenario = build_scenario(spec)
    if n_jobs == 1:
        reps = [_safe_replicate(scenario, study, r) for r in range(n_replicates)]
    else:
        from joblib import Parallel, delayed

        reps = Parallel(n_jobs=n_jobs)(delayed(_safe_replicate)(scenario, study, r) for r in range(n_replicates))
    return summarize(spec.name, reps)


def summarize(name: str, reps: list) -> list[dict]:
    ok = [r for r in reps if r is not None]
    n_failed = len(reps) - len(ok)
    if not ok:
        return [{"scenario": name, "method": "", "model": "", "estimand": "all", "z": "", "g": "",
                 "bias": np.nan, "bias_se": np.nan, "rmse": np.nan, "ci_width": np.nan, "coverage": np.nan,
                 "between_share": np.nan, "n_ok": 0, "n_failed": n_failed}]
    rows = []
    keys = list(ok[0].keys())
    for method, model, key in keys:
        arr = np.array([r[(method, model, key)] for r in ok if (method, model, key) in r])
        point, lo, hi, truth, share = arr.T
        err = point - truth
        rows.append({
            "scenario": name, "method": method, "model": model, "estimand": key.estimand,
            "z": "" if key.z is None else int(key.z), "g": "" if key.g is None else float(key.g),
            "bias": float(err.mean()), "bias_se": float(err.std(ddof=1) / np.sqrt(len(err))) if len(err) > 1 else np.nan,
            "rmse": float(np.sqrt(np.mean(err ** 2))), "ci_width": float(np.mean(hi - lo)),
            "coverage": float(np.mean((lo <= truth) & (truth <= hi))), "between_share": float(share.mean()),
            "n_ok": len(arr), "n_failed": n_failed,
        })
    # dose-response surface error: RMSE over the (z, g) grid per replicate, averaged
    for method, model in dict.fromkeys((m, mo) for m, mo, _ in keys):
        mu_keys = [k for m, mo, k in keys if m == method and mo == model and k.estimand == "mu"]
        per_rep = [np.sqrt(np.mean([(r[(method, model, k)][0] - r[(method, model, k)][3]) ** 2 for k in mu_keys]))
                   for r in ok]
        rows.append({"scenario": name, "method": method, "model": model, "estimand": "surface_rmse",
                     "z": "", "g": "", "bias": np.nan, "bias_se": np.nan, "rmse": float(np.mean(per_rep)),
                     "ci_width": np.nan, "coverage": np.nan, "between_share": np.nan,
                     "n_ok": len(ok), "n_failed": n_failed})
    return rows


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r[h] if not isinstance(r[h], float) else repr(r[h]) for h in RESULTS_HEADER])


# --- sampler calibration -----------------------------------------------------

def _calibration_replicate(scenario: Scenario, rep: int, chain: ChainConfig, prior_factor: float, level: float):
    spec = scenario.spec
    s_field, s_chain = (int(c.generate_state(1)[0]) for c in np.random.SeedSequence((spec.seed, 4, rep)).spawn(2))
    observed = simulate_transport_field(scenario, s_field)
    prior = PriorSpec.from_magnitudes(asdict(spec.params), prior_factor)
    draws = run_chain(TransportData(observed, scenario.sources, scenario.model), prior,
                      replace(chain, seed=s_chain)).draws
    tail = (1.0 - level) / 2.0
    return np.percentile(draws, [100 * tail, 100 * (1 - tail)], axis=0)


def calibration_study(spec: ScenarioSpec, n_replicates: int = 20, chain: ChainConfig = ChainConfig(),
                      prior_factor: float = 10.0, level: float = 0.9, n_jobs: int = 1) -> dict:
    """Refit the transport posterior to fresh sulfate fields drawn at the true
    parameters and count how often each central interval covers the truth.

    Returns ``{name: (covered, n_replicates)}`` plus the raw intervals under
    ``"intervals"`` with shape (replicates, 2, 6).
    """
    scenario = build_scenario(spec)
    if n_jobs == 1:
        cis = [_calibration_replicate(scenario, r, chain, prior_factor, level) for r in range(n_replicates)]
    else:
        from joblib import Parallel, delayed

        cis = Parallel(n_jobs=n_jobs)(delayed(_calibration_replicate)(scenario, r, chain, prior_factor, level)
                                      for r in range(n_replicates))
    cis = np.array(cis)
    truth = spec.params.as_array()
    hit = (cis[:, 0, :] <= truth) & (truth <= cis[:, 1, :])
    out = {name: (int(hit[:, k].sum()), n_replicates) for k, name in enumerate(PARAM_NAMES)}
    out["intervals"] = cis
    return out


# --- bundled suites ----------------------------------------------------------

def bundled_scenario() -> ScenarioSpec:
    """12 x 12 grid, four facilities, uniform wind."""
    return ScenarioSpec()


def default_suite() -> list[ScenarioSpec]:
    """Correctly specified GLM outcome scenarios for plug-in vs. cut."""
    base = ScenarioSpec(
        name="glm_uniform", nrows=12, ncols=12, n_facilities=6, facility_cells=None, scrubbed=None,
        n_regions=40, sigma2=0.5, emission_scale=0.01, gamma=-1.0, offset_meanlog=10.0, seed=11,
    )
    return [
        base,
        replace(base, name="glm_rotational", wind="rotational", wind_u=1.5, seed=12),
        replace(base, name="glm_noisy", sigma2=2.0, seed=13),
    ]


def nonlinear_suite() -> list[ScenarioSpec]:
    base = ScenarioSpec(
        name="nl", nrows=16, ncols=16, n_facilities=8, facility_cells=None, scrubbed=None,
        n_regions=120, gamma=0.6, phi=-0.2, seed=21,
    )
    return [replace(base, name=f"nl_{s}", dgp=s, seed=21 + i) for i, s in enumerate(SURFACES)]


def write_scenario_inputs(spec: ScenarioSpec, out_dir, seed: int = 0) -> dict:
    """Materialize one synthetic dataset as CLI input files.

    Writes ``sulfate.asc``, ``wind_u.asc``, ``wind_v.asc``, ``regions.asc``,
    ``facilities.csv``, ``outcomes.csv`` and a ``config.txt`` wiring them
    together.  Returns ``{name: path}``.
    """
    from pathlib import Path

    from .config import format_config
    from .grid import write_ascii_grid, write_facilities
    from .outcome import write_outcome_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = build_scenario(spec)
    s_field, s_outcome = (int(c.generate_state(1)[0]) for c in np.random.SeedSequence((spec.seed, 2, seed)).spawn(2))
    paths = {k: out / v for k, v in (("sulfate", "sulfate.asc"), ("wind_u", "wind_u.asc"), ("wind_v", "wind_v.asc"),
                                      ("regions", "regions.asc"), ("facilities", "facilities.csv"),
                                      ("outcomes", "outcomes.csv"), ("config", "config.txt"))}
    write_ascii_grid(simulate_transport_field(scenario, s_field), paths["sulfate"])
    write_ascii_grid(scenario.wind_u, paths["wind_u"])
    write_ascii_grid(scenario.wind_v, paths["wind_v"])
    write_ascii_grid(Field(scenario.grid, scenario.region_map.labels.astype(float)), paths["regions"])
    write_facilities(scenario.facilities, paths["facilities"])
    write_outcome_csv(simulate_outcomes(spec, true_exposures(scenario), s_outcome), paths["outcomes"])
    cfg = {
        "data": {k: str(paths[k].name) for k in ("sulfate", "wind_u", "wind_v", "regions", "facilities", "outcomes")},
        "transport": {"emission_scale": spec.emission_scale},
        "prior": {"factor": 10.0, **asdict(spec.params)},
        "run": {"seed": seed},
    }
    paths["config"].write_text(format_config(cfg))
    return {k: str(v) for k, v in paths.items()}

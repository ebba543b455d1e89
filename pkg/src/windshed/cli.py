"""Command-line front end.

Subcommands ``fit-transport``, ``build-exposure``, ``fit-outcome``,
``estimate-effects`` and ``simulate`` read a flat ``section.key = value``
config (``--config``), apply ``--set section.key=value`` and per-command
flag overrides, and write their outputs atomically into ``--out`` together
with a JSON run manifest.

Exit codes: 0 success, 1 numerical or convergence failure, 2 input error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, build_dataclass, config_hash, load_config, parse_value
from .transport import PARAM_NAMES, NumericalError

log = logging.getLogger("windshed")

POSTERIOR_HEADER = PARAM_NAMES + ("log_posterior",)
# fixed per-component offsets into the master seed's spawn list
SEED_SLOTS = {"transport": 0, "glm": 1, "bart": 2, "simulate": 3}


class InputError(Exception):
    """Bad arguments, files or schemas (exit code 2)."""


class ConvergenceError(Exception):
    """Sampler failed its convergence check (exit code 1)."""


# --- plumbing ------------------------------------------------------------------

def n_threads() -> int:
    raw = os.environ.get("WINDSHED_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"WINDSHED_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename over it only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    with atomic_path(path) as tmp:
        Path(tmp).write_text(text)


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    master_seed: int
    seeds: dict
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: dict = dataclasses.field(default_factory=dict)
    versions: dict = dataclasses.field(default_factory=dict)
    started: str = ""
    finished: str = ""

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def write(self, out_dir) -> Path:
        # outputs are keyed relative to the output directory so that reruns
        # into different directories produce identical manifests
        self.outputs = {os.path.relpath(k, out_dir): v for k, v in sorted(self.outputs.items())}
        self.finished = _timestamp()
        path = Path(out_dir) / f"manifest-{self.command}.json"
        write_text_atomic(path, json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _versions() -> dict:
    import numba
    import scipy

    return {"windshed": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def component_seeds(master: int) -> dict:
    from .mcmc import spawn_seeds

    seeds = spawn_seeds(master, len(SEED_SLOTS))
    return {name: seeds[i] for name, i in SEED_SLOTS.items()}


# --- config resolution ----------------------------------------------------------

def resolve_config(args) -> dict:
    cfg: dict = {}
    base = Path(".")
    if args.config:
        try:
            cfg = load_config(args.config)
        except FileNotFoundError as exc:
            raise InputError(str(exc)) from None
        base = Path(args.config).resolve().parent
    # relative data paths are resolved against the config file's directory
    for k, v in cfg.get("data", {}).items():
        if isinstance(v, str) and not os.path.isabs(v):
            cfg["data"][k] = str(base / v)
    for item in args.set or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise InputError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        cfg.setdefault(section, {})[name] = parse_value(value)
    if args.seed is not None:
        cfg.setdefault("run", {})["seed"] = args.seed
    cfg.setdefault("run", {}).setdefault("seed", 0)
    # command-line flags are part of the run definition, so they enter the hash
    skip = {"func", "config", "set", "seed", "out", "verbose"}
    cfg["cli"] = {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    return cfg


def _data_path(cfg, key, flag=None) -> Path:
    value = flag or cfg.get("data", {}).get(key)
    if value is None:
        raise InputError(f"no input given for data.{key}")
    p = Path(value)
    if not p.exists():
        raise InputError(f"input file not found: {p}")
    return p


def _optional_path(cfg, key, flag=None):
    value = flag or cfg.get("data", {}).get(key)
    if value is None:
        return None
    return _data_path(cfg, key, value)


def _load_geometry(cfg, manifest: RunManifest, need_regions: bool):
    """Grid-bound inputs shared by fit-transport and build-exposure."""
    from .grid import Field, RegionMap, load_ascii_grid, load_facilities
    from .transport import TransportModel

    sulfate_p = _data_path(cfg, "sulfate")
    fac_p = _data_path(cfg, "facilities")
    sulfate = load_ascii_grid(sulfate_p)
    manifest.add_input(sulfate_p)
    facilities = load_facilities(fac_p, sulfate.grid)
    manifest.add_input(fac_p)
    winds = []
    for key in ("wind_u", "wind_v"):
        p = _optional_path(cfg, key)
        if p is None:
            winds.append(Field.constant(sulfate.grid, float(cfg.get("transport", {}).get(key, 0.0))))
        else:
            w = load_ascii_grid(p)
            if w.grid.shape != sulfate.grid.shape:
                raise InputError(f"{p}: grid {w.grid.shape} does not match sulfate grid {sulfate.grid.shape}")
            winds.append(Field(sulfate.grid, np.nan_to_num(w.values)))
            manifest.add_input(p)
    region_map = None
    if need_regions:
        rp = _data_path(cfg, "regions")
        rf = load_ascii_grid(rp)
        if rf.grid.shape != sulfate.grid.shape:
            raise InputError(f"{rp}: grid {rf.grid.shape} does not match sulfate grid {sulfate.grid.shape}")
        region_map = RegionMap(sulfate.grid, np.nan_to_num(rf.values))
        manifest.add_input(rp)
    return sulfate, facilities, TransportModel(sulfate.grid, *winds), region_map


def _start(command: str, cfg: dict) -> RunManifest:
    seed = int(cfg["run"]["seed"])
    return RunManifest(command=command, config_hash=config_hash(cfg), master_seed=seed,
                       seeds=component_seeds(seed), versions=_versions(), started=_timestamp())


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.get("run", {}).get("out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- posterior CSV ---------------------------------------------------------------

def write_posterior_csv(draws, log_post, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSTERIOR_HEADER)
        for d, lp in zip(draws, log_post):
            w.writerow([repr(float(v)) for v in d] + [repr(float(lp))])


def read_posterior_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = tuple(next(reader))
        except StopIteration:
            raise InputError(f"{path}: empty posterior file") from None
        if header != POSTERIOR_HEADER:
            raise InputError(f"{path}:1: expected header {','.join(POSTERIOR_HEADER)}, got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-numeric value in {row!r}") from None
    if not rows:
        raise InputError(f"{path}: no posterior draws")
    arr = np.array(rows)
    return arr[:, :-1], arr[:, -1]


# --- subcommands ------------------------------------------------------------------

def cmd_fit_transport(args) -> int:
    from .mcmc import ChainConfig, PriorSpec, TransportData, diagnostics, run_chains

    cfg = resolve_config(args)
    manifest = _start("fit-transport", cfg)
    sulfate, facilities, model, _ = _load_geometry(cfg, manifest, need_regions=False)
    from .grid import rasterize_sources

    tcfg = cfg.get("transport", {})
    sources = rasterize_sources(facilities, sulfate.grid, float(tcfg.get("emission_scale", 1.0)))
    pcfg = dict(cfg.get("prior", {}))
    factor = float(pcfg.pop("factor", 10.0))
    missing = [n for n in PARAM_NAMES if n not in pcfg]
    if missing:
        raise InputError(f"prior magnitudes missing for {missing} (set prior.<name> = value)")
    prior = PriorSpec.from_magnitudes({n: float(pcfg[n]) for n in PARAM_NAMES}, factor)
    mcfg = dict(cfg.get("mcmc", {}))
    n_chains = int(args.chains or mcfg.pop("n_chains", 2))
    mcfg.pop("n_chains", None)
    if n_chains < 2:
        raise InputError("fit-transport needs at least 2 chains")
    if args.iter:
        mcfg["n_iter"] = args.iter
    if args.burn:
        mcfg["n_burn"] = args.burn
    chain_cfg = build_dataclass(ChainConfig, {**mcfg, "seed": manifest.seeds["transport"]}, "mcmc")
    data = TransportData(sulfate, sources, model, tcfg.get("covariance", "sar"))
    chains = run_chains(data, prior, chain_cfg, n_chains=n_chains, n_jobs=n_threads())
    diag = diagnostics(chains)

    out = _out_dir(args, cfg)
    draws = np.vstack([c.draws for c in chains])
    logp = np.concatenate([c.log_posterior for c in chains])
    post_p, jsonl_p, diag_p = out / "posterior.csv", out / "posterior.jsonl", out / "diagnostics.json"
    with atomic_path(post_p) as tmp:
        write_posterior_csv(draws, logp, tmp)
    meta = {"record": "metadata", "seed": manifest.master_seed, "config_hash": manifest.config_hash,
            "chain_seeds": [c.seed for c in chains], "n_chains": n_chains,
            "draws_per_chain": int(chains[0].draws.shape[0]), "params": list(PARAM_NAMES)}
    lines = [json.dumps(meta, sort_keys=True)]
    for ci, c in enumerate(chains):
        for k, (d, lp) in enumerate(zip(c.draws, c.log_posterior)):
            rec = {"record": "draw", "chain": ci, "iter": k, "log_posterior": float(lp),
                   **{n: float(v) for n, v in zip(PARAM_NAMES, d)}}
            lines.append(json.dumps(rec, sort_keys=True))
    write_text_atomic(jsonl_p, "\n".join(lines) + "\n")
    write_text_atomic(diag_p, diag.to_json() + "\n")
    for p in (post_p, jsonl_p, diag_p):
        manifest.add_output(p)
    manifest.write(out)

    worst = max((v for v in diag.rhat.values() if np.isfinite(v)), default=np.inf)
    print(f"fit-transport: {len(draws)} draws from {n_chains} chains, max R-hat {worst:.4f}, "
          f"min ESS {min(diag.ess.values()):.0f}")
    if not worst <= 1.05 and not args.allow_unconverged:
        raise ConvergenceError(f"max R-hat {worst:.4f} exceeds 1.05 (rerun longer or pass --allow-unconverged)")
    return 0


def cmd_build_exposure(args) -> int:
    from .effects import thin_indices
    from .exposure import posterior_exposures, write_exposures_csv, write_sr_csv
    from .transport import TransportParams

    cfg = resolve_config(args)
    manifest = _start("build-exposure", cfg)
    _, facilities, model, region_map = _load_geometry(cfg, manifest, need_regions=True)
    post_p = _data_path(cfg, "posterior", args.posterior)
    draws, _ = read_posterior_csv(post_p)
    manifest.add_input(post_p)
    scale = float(cfg.get("transport", {}).get("emission_scale", 1.0))
    out = _out_dir(args, cfg)

    if args.plugin:
        params = [TransportParams.from_array(draws.mean(axis=0))]
        draw_ids = [0]
        stem = "plugin"
    else:
        k = args.draws or int(cfg.get("exposure", {}).get("draws", 250))
        if k < 1:
            raise InputError("--draws must be positive")
        if k > len(draws):
            raise InputError(f"--draws {k} exceeds the {len(draws)} available posterior draws")
        idx = thin_indices(len(draws), k)
        params = [TransportParams.from_array(draws[i]) for i in idx]
        draw_ids = [int(i) for i in idx]
        stem = "cut"
    pe = posterior_exposures(params, model, facilities, region_map, emission_scale=scale, n_jobs=n_threads())
    exp_p = out / f"exposures_{stem}.csv"
    with atomic_path(exp_p) as tmp:
        write_exposures_csv(pe.assignments, tmp, draw_ids)
    manifest.add_output(exp_p)
    sr_dir = out / f"sr_{stem}"
    for d, sr in zip(draw_ids, pe.sr):
        p = sr_dir / f"draw_{d:06d}.csv"
        with atomic_path(p) as tmp:
            write_sr_csv(sr, tmp)
        manifest.add_output(p)
    manifest.write(out)
    print(f"build-exposure: {len(params)} exposure set(s) -> {exp_p}")
    return 0


def _load_exposure_sets(path, manifest) -> list:
    from .exposure import read_exposures_csv

    p = Path(path)
    if not p.exists():
        raise InputError(f"input file not found: {p}")
    try:
        sets = read_exposures_csv(p)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    manifest.add_input(p)
    if not sets:
        raise InputError(f"{p}: no exposure rows")
    return sets


def _load_outcomes(cfg, args, manifest):
    from .outcome import read_outcome_csv

    p = _data_path(cfg, "outcomes", args.outcomes)
    table = read_outcome_csv(p)
    manifest.add_input(p)
    return table


def _model_configs(cfg, manifest) -> dict:
    from .outcome import BARTConfig, GLMConfig

    out = {}
    for name, cls in (("glm", GLMConfig), ("bart", BARTConfig)):
        values = {**cfg.get(name, {}), "seed": manifest.seeds[name]}
        out[name] = build_dataclass(cls, values, name)
    return out


def _models(args, cfg) -> tuple:
    raw = args.models or cfg.get("effects", {}).get("models", "glm")
    models = tuple(m.strip() for m in raw.split(",")) if isinstance(raw, str) else tuple(raw)
    bad = [m for m in models if m not in ("glm", "bart")]
    if bad:
        raise InputError(f"unknown outcome model(s) {bad}; choose from glm, bart")
    return models


def cmd_fit_outcome(args) -> int:
    from .effects import fit_outcome

    cfg = resolve_config(args)
    manifest = _start("fit-outcome", cfg)
    table = _load_outcomes(cfg, args, manifest)
    exp_path = args.exposures or cfg.get("data", {}).get("exposures")
    if exp_path is None:
        raise InputError("no exposures given (--exposures or data.exposures)")
    sets = _load_exposure_sets(exp_path, manifest)
    draw = args.draw if args.draw is not None else next(iter(sets))
    if draw not in sets:
        raise InputError(f"draw {draw} not in {exp_path}; available: {sorted(sets)[:10]}")
    table = table.align_exposure(*sets[draw])
    kind = _models(args, cfg)
    if len(kind) != 1:
        raise InputError("fit-outcome fits one model at a time")
    kind = kind[0]
    post = fit_outcome(table, kind, _model_configs(cfg, manifest)[kind])
    out = _out_dir(args, cfg)
    path = out / f"outcome_{kind}.jsonl"
    meta = {"record": "metadata", "format_version": 1, "model": kind, "exposure_draw": int(draw),
            "seed": manifest.seeds[kind], "config_hash": manifest.config_hash, "n_regions": len(table)}
    lines = [json.dumps(meta, sort_keys=True)] + [json.dumps(r, sort_keys=True) for r in post.to_records()]
    write_text_atomic(path, "\n".join(lines) + "\n")
    manifest.add_output(path)
    manifest.write(out)
    print(f"fit-outcome: {kind} posterior with {len(lines) - 1} draws -> {path}")
    return 0


def cmd_estimate_effects(args) -> int:
    from .effects import EstimandGrid, effects_from_exposures, variance_report, write_effects_csv

    cfg = resolve_config(args)
    manifest = _start("estimate-effects", cfg)
    table = _load_outcomes(cfg, args, manifest)
    dcfg = cfg.get("data", {})
    plug_p = args.plugin_exposures or dcfg.get("plugin_exposures")
    cut_p = args.cut_exposures or dcfg.get("cut_exposures")
    if plug_p is None and cut_p is None:
        raise InputError("need --plugin-exposures and/or --cut-exposures")
    plugin = None
    if plug_p is not None:
        sets = _load_exposure_sets(plug_p, manifest)
        if len(sets) != 1:
            raise InputError(f"{plug_p}: plug-in exposures must hold exactly one draw, found {len(sets)}")
        plugin = next(iter(sets.values()))
    cut = list(_load_exposure_sets(cut_p, manifest).values()) if cut_p is not None else None

    ecfg = cfg.get("effects", {})
    grid = None
    if "g_values" in ecfg:
        g_vals = ecfg["g_values"]
        grid = EstimandGrid(tuple(g_vals), float(ecfg.get("g_min", min(g_vals))))
    result = effects_from_exposures(table, plugin, cut, models=_models(args, cfg),
                                    configs=_model_configs(cfg, manifest), grid=grid, n_jobs=n_threads())
    out = _out_dir(args, cfg)
    eff_p, var_p = out / "effects.csv", out / "variance_report.csv"
    with atomic_path(eff_p) as tmp:
        write_effects_csv(result, tmp, include_mu=bool(ecfg.get("include_mu", True)))
    write_text_atomic(var_p, variance_report(result))
    for p in (eff_p, var_p):
        manifest.add_output(p)
    manifest.write(out)
    print(f"estimate-effects: {sorted(result.estimates)} -> {eff_p}")
    return 0


def cmd_simulate(args) -> int:
    from .simulate import (ScenarioSpec, StudyConfig, default_suite, nonlinear_suite, run_replication_study,
                           write_results_csv)

    cfg = resolve_config(args)
    manifest = _start("simulate", cfg)
    scfg = cfg.get("simulate", {})
    suite = args.suite or scfg.get("suite", "default")
    n_rep = int(args.replicates or scfg.get("replicates", 50))
    if suite == "default":
        specs = default_suite()
    elif suite == "nonlinear":
        specs = nonlinear_suite()
    elif suite == "custom":
        specs = [build_dataclass(ScenarioSpec, cfg.get("scenario", {}), "scenario")]
    else:
        raise InputError(f"unknown suite {suite!r}; choose default, nonlinear or custom")
    study_values = dict(cfg.get("study", {}))
    if suite == "nonlinear":
        study_values.setdefault("models", ("glm", "bart"))
        study_values.setdefault("transport", "truth")
    study = build_dataclass(StudyConfig, study_values, "study")
    offset = manifest.seeds["simulate"]
    rows = []
    for spec in specs:
        spec = dataclasses.replace(spec, seed=(spec.seed + offset) % 2**32 if args.reseed else spec.seed)
        rows += run_replication_study(spec, n_rep, study, n_jobs=n_threads())
    out = _out_dir(args, cfg)
    path = out / f"simulation_{suite}.csv"
    with atomic_path(path) as tmp:
        write_results_csv(rows, tmp)
    manifest.add_output(path)
    manifest.write(out)
    print(f"simulate: {len(specs)} scenario(s) x {n_rep} replicates -> {path}")
    return 0


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="windshed", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"windshed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat section.key = value config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config entry")
        p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("fit-transport", help="sample the transport posterior"))
    p.add_argument("--chains", type=int)
    p.add_argument("--iter", type=int, help="iterations per chain, burn-in included")
    p.add_argument("--burn", type=int)
    p.add_argument("--allow-unconverged", action="store_true")
    p.set_defaults(func=cmd_fit_transport)

    p = common(sub.add_parser("build-exposure", help="source-receptor matrices and exposures"))
    p.add_argument("--posterior", help="posterior CSV from fit-transport")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--plugin", action="store_true", help="use the posterior-mean parameters only")
    mode.add_argument("--draws", type=int, help="number of evenly thinned posterior draws")
    p.set_defaults(func=cmd_build_exposure)

    p = common(sub.add_parser("fit-outcome", help="fit one outcome model to one exposure set"))
    p.add_argument("--outcomes")
    p.add_argument("--exposures")
    p.add_argument("--draw", type=int, help="exposure draw index (default: first in file)")
    p.add_argument("--models", help="glm or bart")
    p.set_defaults(func=cmd_fit_outcome)

    p = common(sub.add_parser("estimate-effects", help="plug-in and cut effect estimates"))
    p.add_argument("--outcomes")
    p.add_argument("--plugin-exposures")
    p.add_argument("--cut-exposures")
    p.add_argument("--models", help="comma-separated: glm,bart")
    p.set_defaults(func=cmd_estimate_effects)

    p = common(sub.add_parser("simulate", help="plug-in vs. cut replication study"))
    p.add_argument("--suite", choices=("default", "nonlinear", "custom"))
    p.add_argument("--replicates", type=int)
    p.add_argument("--reseed", action="store_true", help="shift scenario seeds by the master seed")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    from .exposure import DegenerateExposureError
    from .mcmc import InitializationError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConvergenceError, NumericalError, InitializationError, DegenerateExposureError,
            np.linalg.LinAlgError) as exc:
        print(f"windshed {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (InputError, ConfigError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"windshed {args.command}: input error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Source-receptor matrices and bipartite exposure assignment.

Each column of the SR matrix is the region-averaged SO4 response to 1000
tons of SO2 released at one facility, with every other facility silent and
no background.  The direct treatment of a region is the scrubber status of
its nearest facility; the upwind exposure is the SR-weighted share of
scrubbed facilities among all the others.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .grid import RasterGrid, RegionMap, check_on_grid, region_weight_matrix
from .transport import NumericalError, TransportModel, TransportParams, steady_state_mean

TONS_PER_UNIT = 1000.0
SR_HEADER = ("region_id", "facility_id", "value")
EXPOSURE_HEADER = ("region_id", "draw", "z", "g")


class DegenerateExposureError(ValueError):
    def __init__(self, region_ids):
        self.region_ids = list(region_ids)
        super().__init__(f"regions with zero upwind weighted degree: {self.region_ids}")


@dataclass(frozen=True)
class SRMatrix:
    values: np.ndarray  # (N regions, J facilities)
    region_ids: tuple
    facility_ids: tuple
    linearity_deviation: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.region_ids), len(self.facility_ids)):
            raise ValueError(f"SR matrix shape {v.shape} does not match ids")
        if (v < 0).any():
            raise ValueError("SR matrix entries must be nonnegative")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ExposureAssignment:
    z: np.ndarray
    g: np.ndarray
    key_assoc: np.ndarray
    weighted_degree: np.ndarray
    region_ids: tuple = ()


def _facility_cells(facilities, grid: RasterGrid) -> np.ndarray:
    check_on_grid(facilities, grid)
    return np.array([grid.cell_index(f.x, f.y) for f in facilities], dtype=int)


def source_receptor_matrix(params: TransportParams, model: TransportModel, facilities,
                           region_map: RegionMap, emission_scale: float = 1.0,
                           check_linearity: bool = True) -> SRMatrix:
    """Region-average SO4 per 1000 tons from each facility alone.

    All J unit scenarios are solved against one factorization of each
    operator.  The stored linearity deviation compares ``T @ (R / 1000)``
    with a single combined-source solve.
    """
    grid = model.grid
    cells = _facility_cells(facilities, grid)
    n, J = grid.n_cells, len(facilities)
    unit = np.zeros((n, J))
    unit[cells, np.arange(J)] = TONS_PER_UNIT * emission_scale
    ops = model.operators(params)
    fields_ = steady_state_mean(ops, unit, params)
    W = region_weight_matrix(region_map)
    T = np.asarray(W @ fields_)
    # small negative round-off from the solves is clipped; the exact response is nonnegative
    T = np.where(T < 0, 0.0, T)

    deviation = 0.0
    if check_linearity and J:
        tons = np.array([f.so2_tons for f in facilities])
        combined = np.zeros(n)
        np.add.at(combined, cells, tons * emission_scale)
        direct = W @ steady_state_mean(ops, combined, params)
        via_T = T @ (tons / TONS_PER_UNIT)
        scale = max(np.max(np.abs(direct)), np.finfo(float).tiny)
        deviation = float(np.max(np.abs(direct - via_T)) / scale)
    return SRMatrix(T, tuple(region_map.region_ids), tuple(f.id for f in facilities), deviation)


def key_associated(facilities, region_map: RegionMap) -> np.ndarray:
    """Index of the nearest facility to each region centroid.

    Ties go to the lexicographically smallest facility id, so the result is
    independent of facility file order.
    """
    if not facilities:
        raise ValueError("need at least one facility")
    cent = region_map.centroids()
    fx = np.array([f.x for f in facilities])
    fy = np.array([f.y for f in facilities])
    ids = [f.id for f in facilities]
    d2 = (cent[:, :1] - fx[None, :]) ** 2 + (cent[:, 1:] - fy[None, :]) ** 2
    out = np.empty(len(cent), dtype=int)
    for i, row in enumerate(d2):
        best = row.min()
        tied = np.flatnonzero(row <= best * (1 + 1e-12) + 1e-300)
        out[i] = min(tied, key=lambda j: ids[j])
    return out


def exposure_levels(sr: SRMatrix, scrubbed, key_assoc) -> ExposureAssignment:
    S = np.asarray(scrubbed, dtype=float)
    key = np.asarray(key_assoc, dtype=int)
    T = sr.values
    if S.shape != (T.shape[1],) or key.shape != (T.shape[0],):
        raise ValueError(f"dimension mismatch: T {T.shape}, scrubbed {S.shape}, key_assoc {key.shape}")
    others = np.ones_like(T)
    others[np.arange(T.shape[0]), key] = 0.0
    T_other = T * others
    degree = T_other.sum(axis=1)
    bad = np.flatnonzero(degree <= 0)
    if bad.size:
        raise DegenerateExposureError([sr.region_ids[i] for i in bad])
    g = (T_other * S).sum(axis=1) / degree
    z = S[key].astype(int)
    return ExposureAssignment(z=z, g=g, key_assoc=key, weighted_degree=degree, region_ids=sr.region_ids)


@dataclass
class PosteriorExposures:
    sr: list
    assignments: list
    g_mean: np.ndarray
    g_sd: np.ndarray

    @property
    def g_draws(self) -> np.ndarray:
        return np.array([a.g for a in self.assignments])


def _one_draw(k, params, model, facilities, region_map, scrubbed, key, emission_scale):
    try:
        sr = source_receptor_matrix(params, model, facilities, region_map, emission_scale)
        return sr, exposure_levels(sr, scrubbed, key)
    except (NumericalError, ValueError) as exc:
        exc.draw_index = k
        exc.args = (f"draw {k}: {exc}",) + exc.args[1:]
        raise


def posterior_exposures(theta_draws, model: TransportModel, facilities, region_map: RegionMap,
                        scrubbed=None, emission_scale: float = 1.0, n_jobs: int = 1) -> PosteriorExposures:
    """SR matrix and exposures for every transport draw."""
    draws = list(theta_draws)
    if not draws:
        raise ValueError("need at least one transport draw")
    if scrubbed is None:
        scrubbed = [f.scrubbed for f in facilities]
    key = key_associated(facilities, region_map)
    args = [(k, p, model, facilities, region_map, scrubbed, key, emission_scale) for k, p in enumerate(draws)]
    if n_jobs == 1:
        results = [_one_draw(*a) for a in args]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_one_draw)(*a) for a in args)
    srs = [r[0] for r in results]
    assigns = [r[1] for r in results]
    G = np.array([a.g for a in assigns])
    return PosteriorExposures(sr=srs, assignments=assigns, g_mean=G.mean(axis=0), g_sd=G.std(axis=0))


def write_sr_csv(sr: SRMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SR_HEADER)
        for i, rid in enumerate(sr.region_ids):
            for j, fid in enumerate(sr.facility_ids):
                w.writerow([rid, fid, repr(float(sr.values[i, j]))])


def read_sr_csv(path) -> SRMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != SR_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SR_HEADER)}")
        rows = list(reader)
    regions = list(dict.fromkeys(int(r[0]) for r in rows))
    facs = list(dict.fromkeys(r[1] for r in rows))
    ri = {r: i for i, r in enumerate(regions)}
    fi = {f: j for j, f in enumerate(facs)}
    T = np.zeros((len(regions), len(facs)))
    for r in rows:
        T[ri[int(r[0])], fi[r[1]]] = float(r[2])
    return SRMatrix(T, tuple(regions), tuple(facs))


def write_exposures_csv(assignments, path, draw_ids=None) -> None:
    draw_ids = range(len(assignments)) if draw_ids is None else draw_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPOSURE_HEADER)
        for k, a in zip(draw_ids, assignments):
            for rid, z, g in zip(a.region_ids, a.z, a.g):
                w.writerow([rid, k, int(z), repr(float(g))])


def read_exposures_csv(path) -> dict:
    """``{draw: (region_ids, z, g)}`` in file order."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != EXPOSURE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(EXPOSURE_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rid, k, z, g = int(row[0]), int(row[1]), int(row[2]), float(row[3])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed exposure row {row!r}") from None
            out.setdefault(k, ([], [], []))
            out[k][0].append(rid)
            out[k][1].append(z)
            out[k][2].append(g)
    return {k: (tuple(r), np.array(z), np.array(g)) for k, (r, z, g) in out.items()}

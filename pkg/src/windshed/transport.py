"""Steady-state advection-diffusion operators for coupled SO2/SO4 transport.

Both operators have the form ``theta1 * D + theta2 * V + k * I`` where ``D``
is the negative 5-point Laplacian with reflecting (no diffusive flux)
boundaries, ``V`` is first-order upwind advection along the wind field and
``k`` is the loss rate (oxidation ``theta3`` for SO2, deposition ``delta``
for SO4).  ``D`` and ``V`` depend only on the grid and wind, so they are
built once per :class:`TransportModel` and reused for every parameter draw.

With these operators the steady-state SO2 field solves ``L nu = R`` and the
SO4 field solves ``A eta = theta3 * nu``.  Observed sulfate is modelled as
``N(beta0 + eta, sigma2 * (A^T A)^-1)``.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import splu

from .grid import Field, RasterGrid

PARAM_NAMES = ("theta1", "theta2", "theta3", "delta", "sigma2", "beta0")
LOG_2PI = np.log(2.0 * np.pi)
DENSE_LIMIT = 400


class NumericalError(RuntimeError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True)
class TransportParams:
    """Physical parameters: diffusion, advection multiplier, oxidation,
    deposition, process-noise variance and background sulfate."""

    theta1: float
    theta2: float
    theta3: float
    delta: float
    sigma2: float
    beta0: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES[:5]:
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if not (np.isfinite(self.beta0) and self.beta0 >= 0):
            raise ValueError(f"beta0 must be finite and >= 0, got {self.beta0}")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "TransportParams":
        return cls(*(float(a) for a in arr))

    def replace(self, **kw) -> "TransportParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return TransportParams(**d)


def laplacian_matrix(nrows: int, ncols: int, cell_size: float) -> sparse.csr_matrix:
    """Negative 5-point Laplacian with zero-flux boundaries (symmetric, PSD)."""
    if not cell_size > 0:
        raise AssemblyError(f"cell_size must be positive, got {cell_size}")
    n = nrows * ncols
    idx = np.arange(n).reshape(nrows, ncols)
    # one entry per interior face, contributing to both adjacent cells
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    h2 = cell_size * cell_size
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([b, a, a, b])
    vals = np.concatenate([-np.ones(a.size), -np.ones(a.size), np.ones(a.size), np.ones(a.size)]) / h2
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def upwind_matrix(nrows: int, ncols: int, cell_size: float, u: np.ndarray, v: np.ndarray) -> sparse.csr_matrix:
    """First-order upwind discretization of ``w . grad``.

    ``u`` is the eastward and ``v`` the northward wind component per cell.
    The donor neighbour is picked by wind sign along each axis; a donor
    outside the domain carries zero concentration, so material leaves freely
    through outflow faces and no inflow enters.
    """
    if not cell_size > 0:
        raise AssemblyError(f"cell_size must be positive, got {cell_size}")
    n = nrows * ncols
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise AssemblyError("wind fields must be finite on every cell")
    rows_i, cols_i = np.divmod(np.arange(n), ncols)
    diag = (np.abs(u) + np.abs(v)) / cell_size
    r_list, c_list, val_list = [np.arange(n)], [np.arange(n)], [diag]

    # east-west: u > 0 draws from the west neighbour, u < 0 from the east
    west = (u > 0) & (cols_i > 0)
    east = (u < 0) & (cols_i < ncols - 1)
    # north-south: row 0 is the north edge; v > 0 draws from the south (row + 1)
    south = (v > 0) & (rows_i < nrows - 1)
    north = (v < 0) & (rows_i > 0)
    k = np.arange(n)
    for mask, offset, comp in ((west, -1, u), (east, 1, u), (south, ncols, v), (north, -ncols, v)):
        r_list.append(k[mask])
        c_list.append(k[mask] + offset)
        val_list.append(-np.abs(comp[mask]) / cell_size)
    return sparse.csr_matrix(
        (np.concatenate(val_list), (np.concatenate(r_list), np.concatenate(c_list))), shape=(n, n)
    )


def _splu(M, what):
    try:
        return splu(sparse.csc_matrix(M))
    except RuntimeError as exc:
        raise NumericalError(f"factorization of {what} failed: {exc}") from exc


def _logabsdet(lu) -> float:
    d = lu.U.diagonal()
    if np.any(d == 0) or not np.all(np.isfinite(d)):
        raise NumericalError(f"singular factor: {np.sum(d == 0)} zero pivots")
    return float(np.sum(np.log(np.abs(d))))


class OperatorPair:
    """SO2 operator ``L`` and SO4 operator ``A`` with lazily cached LU factors."""

    def __init__(self, L, A):
        self.L = sparse.csc_matrix(L)
        self.A = sparse.csc_matrix(A)

    @cached_property
    def lu_L(self):
        return _splu(self.L, "SO2 operator L")

    @cached_property
    def lu_A(self):
        return _splu(self.A, "SO4 operator A")

    @property
    def n(self) -> int:
        return self.L.shape[0]


class TransportModel:
    """Grid plus wind; caches the parameter-free pieces of the operators."""

    def __init__(self, grid: RasterGrid, wind_u: Field | None = None, wind_v: Field | None = None):
        self.grid = grid
        zeros = np.zeros(grid.n_cells)
        self.u = zeros if wind_u is None else np.asarray(wind_u.values, dtype=float)
        self.v = zeros if wind_v is None else np.asarray(wind_v.values, dtype=float)
        for w in (wind_u, wind_v):
            if w is not None and w.grid != grid:
                raise AssemblyError("wind field grid does not match transport grid")
        self.D = laplacian_matrix(grid.nrows, grid.ncols, grid.cell_size)
        self.V = upwind_matrix(grid.nrows, grid.ncols, grid.cell_size, self.u, self.v)
        self.I = sparse.identity(grid.n_cells, format="csr")

    def operators(self, params: TransportParams) -> OperatorPair:
        base = params.theta1 * self.D + params.theta2 * self.V
        return OperatorPair(base + params.theta3 * self.I, base + params.delta * self.I)


def assemble_operators(grid: RasterGrid, wind_u: Field | None, wind_v: Field | None,
                       params: TransportParams) -> OperatorPair:
    return TransportModel(grid, wind_u, wind_v).operators(params)


def steady_state_mean(ops: OperatorPair, sources, params: TransportParams) -> np.ndarray:
    """Facility-attributable SO4 field (background excluded).

    ``sources`` may be a Field, a length-n vector, or an (n, k) matrix of
    several source scenarios solved together.
    """
    R = sources.values if isinstance(sources, Field) else np.asarray(sources, dtype=float)
    nu = ops.lu_L.solve(R)
    eta = ops.lu_A.solve(params.theta3 * nu)
    if not np.all(np.isfinite(eta)):
        raise NumericalError("non-finite steady-state solution")
    return eta


def so2_steady_state(ops: OperatorPair, sources) -> np.ndarray:
    R = sources.values if isinstance(sources, Field) else np.asarray(sources, dtype=float)
    return ops.lu_L.solve(R)


def sar_precision_apply(ops: OperatorPair, params: TransportParams, vector) -> np.ndarray:
    """``Q @ vector`` with ``Q = A^T A / sigma2``."""
    return ops.A.T @ (ops.A @ np.asarray(vector, dtype=float)) / params.sigma2


def log_det_precision(ops: OperatorPair, params: TransportParams) -> float:
    return 2.0 * _logabsdet(ops.lu_A) - ops.n * np.log(params.sigma2)


def sar_precision(ops: OperatorPair, params: TransportParams) -> sparse.csc_matrix:
    return sparse.csc_matrix(ops.A.T @ ops.A / params.sigma2)


def dense_covariance(ops: OperatorPair, params: TransportParams, kind: str = "sar",
                     nugget: float = 0.0) -> np.ndarray:
    """Dense process covariance; only for desk-scale grids."""
    if ops.n > DENSE_LIMIT:
        raise NumericalError(f"dense covariance limited to {DENSE_LIMIT} cells, grid has {ops.n}")
    A = ops.A.toarray()
    if kind == "sar":
        Ainv = np.linalg.inv(A)
        cov = params.sigma2 * Ainv @ Ainv.T
    elif kind == "lyapunov":
        # stationary covariance of d eta = -A eta dt + sigma dW
        cov = scipy.linalg.solve_continuous_lyapunov(A, params.sigma2 * np.eye(ops.n))
    else:
        raise ValueError(f"unknown covariance kind {kind!r}")
    cov = 0.5 * (cov + cov.T)
    if nugget:
        cov = cov + nugget * np.eye(ops.n)
    return cov


def _dense_gaussian_logpdf(resid, cov) -> float:
    try:
        c = scipy.linalg.cho_factor(cov, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance not positive definite: {exc}") from exc
    quad = resid @ scipy.linalg.cho_solve(c, resid)
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return float(-0.5 * (resid.size * LOG_2PI + logdet + quad))


def log_likelihood(observed: Field, sources, params: TransportParams, model: TransportModel,
                   covariance: str = "sar", nugget: float = 0.0, ops: OperatorPair | None = None) -> float:
    """Gaussian log-density of observed sulfate, normalizing constant included.

    NODATA cells are removed by deleting rows and columns of the SAR
    precision, i.e. the density is conditional on the masked cells sitting
    at their mean.  The Lyapunov and nugget variants are dense and marginal.
    """
    valid = observed.valid
    if not valid.any():
        raise ValueError("observation field is entirely NODATA")
    ops = ops if ops is not None else model.operators(params)
    mean = params.beta0 + steady_state_mean(ops, sources, params)
    resid = np.nan_to_num(observed.values - mean)

    if covariance == "sar" and not nugget:
        if valid.all():
            Ar = ops.A @ resid
            quad = Ar @ Ar / params.sigma2
            logdet = log_det_precision(ops, params)
            n = ops.n
        else:
            Q = sar_precision(ops, params)
            Qs = Q[valid][:, valid]
            rs = resid[valid]
            quad = rs @ (Qs @ rs)
            logdet = _logabsdet(_splu(Qs, "masked precision"))
            n = int(valid.sum())
        return float(-0.5 * (n * LOG_2PI - logdet + quad))

    cov = dense_covariance(ops, params, covariance, nugget)
    return _dense_gaussian_logpdf(resid[valid], cov[np.ix_(valid, valid)])

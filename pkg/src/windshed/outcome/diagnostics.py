"""Residual spatial autocorrelation: Moran's I on region adjacency."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse, stats

from ..grid import RegionMap


@dataclass(frozen=True)
class MoranResult:
    statistic: float
    expected: float
    variance: float
    z_score: float
    p_value: float
    dropped: tuple = ()


def queen_adjacency(region_map: RegionMap) -> sparse.csr_matrix:
    """Binary region adjacency: regions touching at an edge or corner."""
    lab = region_map.labels.reshape(region_map.grid.shape)
    index = {rid: i for i, rid in enumerate(region_map.region_ids)}
    P = np.pad(lab, 1)
    core = P[1:-1, 1:-1]
    pairs = set()
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        nb = P[1 + dr:P.shape[0] - 1 + dr, 1 + dc:P.shape[1] - 1 + dc]
        m = (core != nb) & (core > 0) & (nb > 0)
        pairs.update(zip(core[m].tolist(), nb[m].tolist()))
    rows, cols = [], []
    for p, q in pairs:
        rows += [index[p], index[q]]
        cols += [index[q], index[p]]
    n = region_map.n_regions
    W = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    W.data[:] = 1.0
    return W


def knn_adjacency(region_map: RegionMap, k: int = 4) -> sparse.csr_matrix:
    cent = region_map.centroids()
    d = np.linalg.norm(cent[:, None, :] - cent[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    n = len(cent)
    nbrs = np.argsort(d, axis=1, kind="stable")[:, :k]
    return sparse.csr_matrix((np.ones(n * k), (np.repeat(np.arange(n), k), nbrs.ravel())), shape=(n, n))


def region_weights(region_map: RegionMap, kind: str = "queen", k: int = 4) -> sparse.csr_matrix:
    if kind == "queen":
        return queen_adjacency(region_map)
    if kind == "knn":
        return knn_adjacency(region_map, k)
    raise ValueError(f"unknown weights kind {kind!r}")


def row_standardize(W) -> sparse.csr_matrix:
    W = sparse.csr_matrix(W, dtype=float)
    rs = np.asarray(W.sum(axis=1)).ravel()
    inv = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)
    return sparse.diags(inv) @ W


def morans_i(residuals, weights, standardize: bool = True) -> MoranResult:
    """Moran's I with the normal approximation under randomization.

    Regions with no neighbours are dropped before computing the statistic.
    """
    x = np.asarray(residuals, dtype=float)
    W = sparse.csr_matrix(weights, dtype=float)
    rs = np.asarray(W.sum(axis=1)).ravel()
    islands = np.flatnonzero(rs == 0)
    if islands.size:
        warnings.warn(f"dropping {islands.size} regions with no neighbours", stacklevel=2)
        keep = np.flatnonzero(rs > 0)
        W = W[keep][:, keep]
        x = x[keep]
    if standardize:
        W = row_standardize(W)
    n = x.size
    if n < 4:
        raise ValueError(f"Moran's I needs at least 4 regions, got {n}")
    zc = x - x.mean()
    m2 = zc @ zc
    S0 = W.sum()
    I = n / S0 * (zc @ (W @ zc)) / m2

    Wsym = W + W.T
    S1 = 0.5 * Wsym.multiply(Wsym).sum()
    S2 = np.sum((np.asarray(W.sum(axis=1)).ravel() + np.asarray(W.sum(axis=0)).ravel()) ** 2)
    b2 = n * np.sum(zc ** 4) / m2 ** 2
    EI = -1.0 / (n - 1)
    num = n * ((n * n - 3 * n + 3) * S1 - n * S2 + 3 * S0 ** 2) - b2 * ((n * n - n) * S1 - 2 * n * S2 + 6 * S0 ** 2)
    var = num / ((n - 1) * (n - 2) * (n - 3) * S0 ** 2) - EI ** 2
    z = (I - EI) / np.sqrt(var)
    return MoranResult(float(I), EI, float(var), float(z), float(2 * stats.norm.sf(abs(z))),
                       tuple(islands.tolist()))

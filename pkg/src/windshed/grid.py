"""Raster lattice, ESRI ASCII grid IO, facilities and region label maps.

Cells are indexed row-major from the top-left corner, matching the ESRI
ASCII layout, so cell ``k`` sits in row ``k // ncols`` counted from the
north edge.  Coordinates are planar kilometres supplied by the user.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")
FACILITY_HEADER = ("id", "x", "y", "so2_tons", "scrubbed", "heat_input", "operating_time")


class GridFormatError(ValueError):
    """Malformed raster or table input."""


class GridDimensionError(GridFormatError):
    """Row or column count disagrees with the declared header."""


class FacilityValidationError(ValueError):
    pass


class MissingRegionError(ValueError):
    pass


@dataclass(frozen=True)
class RasterGrid:
    ncols: int
    nrows: int
    cell_size: float
    x_origin: float = 0.0
    y_origin: float = 0.0
    nodata_value: float = -9999.0

    def __post_init__(self):
        if self.ncols < 1 or self.nrows < 1:
            raise GridFormatError(f"grid needs at least one cell, got {self.nrows}x{self.ncols}")
        if not self.cell_size > 0:
            raise GridFormatError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def n_cells(self) -> int:
        return self.ncols * self.nrows

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax)."""
        return (
            self.x_origin,
            self.x_origin + self.ncols * self.cell_size,
            self.y_origin,
            self.y_origin + self.nrows * self.cell_size,
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """x and y of every cell center, flat in row-major order."""
        rows, cols = np.divmod(np.arange(self.n_cells), self.ncols)
        x = self.x_origin + (cols + 0.5) * self.cell_size
        y = self.y_origin + (self.nrows - rows - 0.5) * self.cell_size
        return x, y

    def contains(self, x: float, y: float) -> bool:
        xmin, xmax, ymin, ymax = self.extent
        return xmin <= x <= xmax and ymin <= y <= ymax

    def cell_index(self, x: float, y: float) -> int:
        """Flat index of the cell containing (x, y); points on the far edge
        are assigned to the last cell."""
        if not self.contains(x, y):
            raise FacilityValidationError(f"point ({x}, {y}) outside grid extent {self.extent}")
        col = int(np.floor((x - self.x_origin) / self.cell_size))
        row_from_bottom = int(np.floor((y - self.y_origin) / self.cell_size))
        col = min(col, self.ncols - 1)
        row_from_bottom = min(row_from_bottom, self.nrows - 1)
        return (self.nrows - 1 - row_from_bottom) * self.ncols + col


@dataclass(frozen=True)
class Field:
    """Scalar values on a grid; NODATA cells are stored as NaN."""

    grid: RasterGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.n_cells:
            raise GridDimensionError(
                f"field has {values.size} values, grid needs {self.grid.n_cells}"
            )
        if np.isinf(values).any():
            raise GridFormatError("field contains infinite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    def as_2d(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    @classmethod
    def constant(cls, grid: RasterGrid, value: float) -> "Field":
        return cls(grid, np.full(grid.n_cells, float(value)))


@dataclass(frozen=True)
class Facility:
    id: str
    x: float
    y: float
    so2_tons: float
    scrubbed: bool
    heat_input: float = 0.0
    operating_time: float = 0.0

    def __post_init__(self):
        if not self.so2_tons >= 0:
            raise FacilityValidationError(f"facility {self.id}: so2_tons must be >= 0, got {self.so2_tons}")


@dataclass(frozen=True)
class RegionMap:
    """Integer region id per cell; 0 marks cells outside the study area."""

    grid: RasterGrid
    labels: np.ndarray
    region_ids: tuple = field(init=False)

    def __post_init__(self):
        labels = np.asarray(self.labels).ravel()
        if labels.size != self.grid.n_cells:
            raise GridDimensionError(f"label map has {labels.size} cells, grid needs {self.grid.n_cells}")
        if not np.all(labels == np.round(labels)):
            raise GridFormatError("region labels must be integers")
        labels = labels.astype(np.int64)
        if (labels < 0).any():
            raise GridFormatError("region labels must be nonnegative")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "region_ids", tuple(int(r) for r in np.unique(labels[labels > 0])))

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @classmethod
    def from_field(cls, f: Field) -> "RegionMap":
        values = np.where(np.isnan(f.values), 0, f.values)
        return cls(f.grid, values)

    def require(self, ids) -> None:
        missing = sorted(set(int(i) for i in ids) - set(self.region_ids))
        if missing:
            raise MissingRegionError(f"regions with no labeled cells: {missing}")

    def centroids(self) -> np.ndarray:
        """Unweighted mean of member cell centers, shape (N, 2)."""
        x, y = self.grid.cell_centers()
        out = np.empty((self.n_regions, 2))
        for i, rid in enumerate(self.region_ids):
            member = self.labels == rid
            out[i] = x[member].mean(), y[member].mean()
        return out


# --- ESRI ASCII grid -----------------------------------------------------

def _format_value(v: float) -> str:
    return f"{v:.6g}"


def load_ascii_grid(path) -> Field:
    """Read an ESRI ASCII grid.

    The six header lines are required in the canonical order.  Values equal
    to ``NODATA_value`` become NaN in the returned field.
    """
    lines = Path(path).read_text().splitlines()
    header = {}
    for lineno, key in enumerate(HEADER_KEYS, start=1):
        if lineno > len(lines):
            raise GridFormatError(f"line {lineno}: missing header '{key}'")
        parts = lines[lineno - 1].split()
        if len(parts) != 2 or parts[0].lower() != key.lower():
            raise GridFormatError(f"line {lineno}: expected '{key} <value>', got {lines[lineno - 1]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridFormatError(f"line {lineno}: non-numeric value for '{key}': {parts[1]!r}") from None
    for key in ("ncols", "nrows"):
        if header[key] != int(header[key]):
            raise GridFormatError(f"header '{key}' must be an integer, got {header[key]}")

    grid = RasterGrid(
        ncols=int(header["ncols"]),
        nrows=int(header["nrows"]),
        cell_size=header["cellsize"],
        x_origin=header["xllcorner"],
        y_origin=header["yllcorner"],
        nodata_value=header["NODATA_value"],
    )
    rows = [ln.split() for ln in lines[len(HEADER_KEYS):] if ln.strip()]
    if len(rows) != grid.nrows:
        raise GridDimensionError(f"header says nrows={grid.nrows}, found {len(rows)} data rows")
    for r, row in enumerate(rows):
        if len(row) != grid.ncols:
            raise GridDimensionError(
                f"line {len(HEADER_KEYS) + r + 1}: header says ncols={grid.ncols}, row has {len(row)} entries"
            )
    values = np.array([[float(v) for v in row] for row in rows]).ravel()
    values[values == grid.nodata_value] = np.nan
    return Field(grid, values)


def format_ascii_grid(f: Field) -> str:
    g = f.grid
    lines = [
        f"ncols {g.ncols}",
        f"nrows {g.nrows}",
        f"xllcorner {g.x_origin:.12g}",
        f"yllcorner {g.y_origin:.12g}",
        f"cellsize {g.cell_size:.12g}",
        f"NODATA_value {_format_value(g.nodata_value)}",
    ]
    vals = np.where(np.isnan(f.values), g.nodata_value, f.values).reshape(g.shape)
    lines.extend(" ".join(_format_value(v) for v in row) for row in vals)
    return "\n".join(lines) + "\n"


def write_ascii_grid(f: Field, path) -> None:
    Path(path).write_text(format_ascii_grid(f))


# --- facilities ----------------------------------------------------------

def load_facilities(path, grid: RasterGrid | None = None) -> list[Facility]:
    """Read the facility table, preserving file order.

    When ``grid`` is given, every facility must fall inside its extent.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FACILITY_HEADER:
            raise GridFormatError(
                f"{path}: expected header {','.join(FACILITY_HEADER)}, got {','.join(reader.fieldnames or [])}"
            )
        facilities = []
        for lineno, row in enumerate(reader, start=2):
            if row["scrubbed"].strip() not in ("0", "1"):
                raise FacilityValidationError(
                    f"{path}:{lineno}: facility {row['id']}: scrubbed must be 0 or 1, got {row['scrubbed']!r}"
                )
            try:
                fac = Facility(
                    id=row["id"].strip(),
                    x=float(row["x"]),
                    y=float(row["y"]),
                    so2_tons=float(row["so2_tons"]),
                    scrubbed=row["scrubbed"].strip() == "1",
                    heat_input=float(row["heat_input"]),
                    operating_time=float(row["operating_time"]),
                )
            except ValueError as exc:
                raise FacilityValidationError(f"{path}:{lineno}: {exc}") from None
            facilities.append(fac)
    ids = [f.id for f in facilities]
    if len(set(ids)) != len(ids):
        raise FacilityValidationError(f"{path}: duplicate facility ids")
    if grid is not None:
        check_on_grid(facilities, grid)
    return facilities


def check_on_grid(facilities, grid: RasterGrid) -> None:
    outside = [f.id for f in facilities if not grid.contains(f.x, f.y)]
    if outside:
        raise FacilityValidationError(f"facilities outside grid extent: {outside}")


def write_facilities(facilities, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FACILITY_HEADER)
        for f in facilities:
            w.writerow([f.id, repr(f.x), repr(f.y), repr(f.so2_tons), int(f.scrubbed),
                        repr(f.heat_input), repr(f.operating_time)])


def rasterize_sources(facilities, grid: RasterGrid, emission_scale: float = 1.0) -> Field:
    """Point emissions summed into their containing cells."""
    check_on_grid(facilities, grid)
    values = np.zeros(grid.n_cells)
    for f in facilities:
        values[grid.cell_index(f.x, f.y)] += f.so2_tons * emission_scale
    return Field(grid, values)


def region_cell_weights(region_map: RegionMap) -> dict[int, list[tuple[int, float]]]:
    """Uniform averaging weights over each region's member cells."""
    out = {}
    for rid in region_map.region_ids:
        cells = np.flatnonzero(region_map.labels == rid)
        if cells.size == 0:
            raise MissingRegionError(f"region {rid} has no cells")
        w = 1.0 / cells.size
        out[rid] = [(int(c), w) for c in cells]
    return out


def region_weight_matrix(region_map: RegionMap):
    """Sparse (N regions x n cells) averaging matrix, rows in ``region_ids`` order."""
    from scipy import sparse

    rows, cols, vals = [], [], []
    for i, (rid, pairs) in enumerate(region_cell_weights(region_map).items()):
        for c, w in pairs:
            rows.append(i)
            cols.append(c)
            vals.append(w)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(region_map.n_regions, region_map.grid.n_cells))

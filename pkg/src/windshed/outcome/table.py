"""Region-level count outcomes with covariates and exposures."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

FIXED_COLUMNS = ("region_id", "y", "offset", "z", "g")


class OutcomeValidationError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeTable:
    region_id: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    x: np.ndarray
    z: np.ndarray
    g: np.ndarray
    x_names: tuple = ()

    def __post_init__(self):
        n = len(self.region_id)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float).reshape(n, -1) if n else np.zeros((0, len(self.x_names)))
        arrays = {
            "region_id": np.asarray(self.region_id, dtype=np.int64),
            "offset": np.asarray(self.offset, dtype=float),
            "z": np.asarray(self.z, dtype=float),
            "g": np.asarray(self.g, dtype=float),
        }
        for name, arr in arrays.items():
            if arr.shape != (n,):
                raise OutcomeValidationError(f"column {name} has shape {arr.shape}, expected ({n},)")
        if y.shape != (n,):
            raise OutcomeValidationError(f"column y has shape {y.shape}, expected ({n},)")
        if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.round(y)):
            bad = np.flatnonzero(~np.isfinite(y) | (y < 0) | (y != np.round(y)))
            raise OutcomeValidationError(f"y must be nonnegative integers; bad rows {bad[:10].tolist()}")
        if np.any(~(arrays["offset"] > 0)):
            bad = np.flatnonzero(~(arrays["offset"] > 0))
            raise OutcomeValidationError(f"offset must be > 0; bad rows {bad[:10].tolist()}")
        if np.any((arrays["g"] < 0) | (arrays["g"] > 1) | ~np.isfinite(arrays["g"])):
            raise OutcomeValidationError("g must lie in [0, 1]")
        if np.any((arrays["z"] != 0) & (arrays["z"] != 1)):
            raise OutcomeValidationError("z must be 0 or 1")
        if not np.all(np.isfinite(x)):
            raise OutcomeValidationError("covariates must be finite")
        names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise OutcomeValidationError(f"{len(names)} covariate names for {x.shape[1]} columns")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_names", names)

    def __len__(self) -> int:
        return len(self.region_id)

    @property
    def features(self) -> np.ndarray:
        """Tree inputs: raw covariates followed by z and g."""
        return np.column_stack([self.x, self.z, self.g])

    @property
    def feature_names(self) -> tuple:
        return self.x_names + ("z", "g")

    def with_exposure(self, z, g) -> "OutcomeTable":
        return replace(self, z=np.asarray(z, dtype=float), g=np.asarray(g, dtype=float))

    def align_exposure(self, region_ids, z, g) -> "OutcomeTable":
        """Attach exposures given in another region order."""
        pos = {int(r): i for i, r in enumerate(region_ids)}
        missing = [int(r) for r in self.region_id if int(r) not in pos]
        if missing:
            raise OutcomeValidationError(f"no exposure for regions {missing[:10]}")
        idx = np.array([pos[int(r)] for r in self.region_id], dtype=int)
        return self.with_exposure(np.asarray(z)[idx], np.asarray(g)[idx])


def read_outcome_csv(path) -> OutcomeTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header[:5] != FIXED_COLUMNS:
            raise OutcomeValidationError(
                f"{path}: header must start with {','.join(FIXED_COLUMNS)}, got {','.join(header[:5])}"
            )
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise OutcomeValidationError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            vals = []
            for name, v in zip(header, row):
                try:
                    vals.append(float(v))
                except ValueError:
                    raise OutcomeValidationError(f"{path}:{lineno}: column {name}: not a number: {v!r}") from None
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    y = data[:, 1]
    if np.any(y != np.round(y)):
        bad = int(np.flatnonzero(y != np.round(y))[0])
        raise OutcomeValidationError(f"{path}:{bad + 2}: column y: must be an integer count, got {y[bad]}")
    return OutcomeTable(
        region_id=data[:, 0].astype(np.int64), y=y, offset=data[:, 2],
        z=data[:, 3], g=data[:, 4], x=data[:, 5:], x_names=header[5:],
    )


def write_outcome_csv(table: OutcomeTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIXED_COLUMNS + table.x_names)
        for i in range(len(table)):
            w.writerow([int(table.region_id[i]), int(table.y[i]), repr(float(table.offset[i])),
                        int(table.z[i]), repr(float(table.g[i]))] + [repr(float(v)) for v in table.x[i]])

"""Data container, CSV ingestion, normalization and train/test splitting."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

MISSING_TOKENS = ["", "NA"]


class DataError(ValueError):
    """Raised when input data violate the dataset contract."""


def _frozen(arr, dtype=float, ndim=1):
    out = np.array(arr, dtype=dtype, copy=True)
    if out.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable table of confounders, treatment, outcome and predictive covariates.

    ``w`` holds NaN wherever ``r`` is 0. Arrays are copied on construction and
    marked read-only.
    """

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    w: np.ndarray | None = None
    r: np.ndarray | None = None
    x_names: tuple[str, ...] = ()
    w_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "x", _frozen(x, ndim=2))
        object.__setattr__(self, "a", _frozen(self.a))
        object.__setattr__(self, "y", _frozen(self.y))
        n = self.x.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one row")
        if self.a.shape != (n,) or self.y.shape != (n,):
            raise DataError("x, a and y must have the same number of rows")
        if not np.all(np.isfinite(self.x)):
            raise DataError("confounders must be finite")
        if not np.all(np.isfinite(self.y)):
            raise DataError("outcome must be finite")
        if not np.all(np.isin(self.a, (-1.0, 1.0))):
            raise DataError("treatment entries must be -1 or +1")

        if self.w is None and self.r is None:
            object.__setattr__(self, "w", np.empty((n, 0)))
            object.__setattr__(self, "r", np.empty((n, 0)))
        elif self.w is None or self.r is None:
            raise DataError("w and r must be given together")
        w = np.asarray(self.w, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if r.ndim == 1:
            r = r[:, None]
        if w.shape != r.shape or w.shape[0] != n:
            raise DataError(f"w {w.shape} and r {r.shape} must share shape with n={n} rows")
        if not np.all(np.isin(r, (0.0, 1.0))):
            raise DataError("missingness indicators must be 0 or 1")
        observed = r == 1
        if not np.all(np.isfinite(w[observed])):
            raise DataError("observed predictive covariates must be finite")
        if w.shape[1] and np.any(r.mean(axis=0) == 0):
            raise DataError("every predictive column needs at least one observed entry")
        w = np.where(observed, w, np.nan)
        object.__setattr__(self, "w", _frozen(w, ndim=2))
        object.__setattr__(self, "r", _frozen(r, ndim=2))

        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(self.p)))
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"w{j + 1}" for j in range(self.q)))
        if len(self.x_names) != self.p or len(self.w_names) != self.q:
            raise DataError("column names do not match matrix widths")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def q(self) -> int:
        return self.w.shape[1]

    def take(self, idx) -> "Dataset":
        """Row subset (or resample) by integer index."""
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            self.x[idx], self.a[idx], self.y[idx], self.w[idx], self.r[idx],
            x_names=self.x_names, w_names=self.w_names,
        )

    def replace(self, **changes) -> "Dataset":
        fields = dict(x=self.x, a=self.a, y=self.y, w=self.w, r=self.r,
                      x_names=self.x_names, w_names=self.w_names)
        fields.update(changes)
        return Dataset(**fields)


@dataclass(frozen=True, eq=False)
class AugmentedDataset:
    """Dataset plus imputed predictive covariates.

    ``columns`` is the extended covariate matrix laid out as ``[X | W~ | R]``.
    """

    base: Dataset
    w_tilde: np.ndarray
    columns: np.ndarray = field(init=False)

    def __post_init__(self):
        wt = _frozen(np.asarray(self.w_tilde, dtype=float).reshape(self.base.n, -1), ndim=2)
        object.__setattr__(self, "w_tilde", wt)
        cols = np.hstack([self.base.x, wt, self.base.r])
        cols.flags.writeable = False
        object.__setattr__(self, "columns", cols)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class Schema:
    """Mapping from CSV columns to dataset roles."""

    treatment: str
    outcome: str
    confounders: tuple[str, ...]
    predictive: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "confounders", tuple(self.confounders))
        object.__setattr__(self, "predictive", tuple(self.predictive))
        if not self.confounders:
            raise ValueError("schema needs at least one confounder column")


def _numeric_column(frame: pd.DataFrame, name: str, mandatory: bool) -> np.ndarray:
    col = frame[name]
    missing = col.isna()
    if mandatory and missing.any():
        row = int(np.flatnonzero(missing.to_numpy())[0]) + 2
        raise DataError(f"missing mandatory value in column {name!r} (line {row})")
    # str -> float is correctly rounded; pandas' fast parser is not
    values = np.full(len(col), np.nan)
    for i, cell in enumerate(col.to_numpy()):
        if missing.iloc[i]:
            continue
        try:
            values[i] = float(cell)
        except ValueError:
            raise DataError(f"non-numeric cell {cell!r} in column {name!r} (line {i + 2})") from None
    return values


def load_csv(path, schema: Schema) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Empty cells and the token ``NA`` mark missing values. They are allowed only in
    predictive columns, where they set the matching indicator in ``r`` to 0.
    A treatment column coded {0, 1} is remapped to {-1, +1}.
    """
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=MISSING_TOKENS,
                        encoding="utf-8")
    wanted = [schema.treatment, schema.outcome, *schema.confounders, *schema.predictive]
    unknown = [c for c in wanted if c not in frame.columns]
    if unknown:
        raise DataError(f"unknown column(s): {', '.join(unknown)}")

    a = _numeric_column(frame, schema.treatment, mandatory=True)
    levels = set(np.unique(a).tolist())
    if len(levels) < 2:
        raise DataError(f"treatment column {schema.treatment!r} is constant")
    if levels == {0.0, 1.0}:
        a = np.where(a == 0, -1.0, 1.0)
    elif levels != {-1.0, 1.0}:
        raise DataError(f"treatment values must be in {{-1,1}} or {{0,1}}, got {sorted(levels)}")
    y = _numeric_column(frame, schema.outcome, mandatory=True)
    x = np.column_stack([_numeric_column(frame, c, mandatory=True) for c in schema.confounders])
    if schema.predictive:
        w = np.column_stack([_numeric_column(frame, c, mandatory=False) for c in schema.predictive])
        r = np.isfinite(w).astype(float)
    else:
        w = r = None
    return Dataset(x, a, y, w, r, x_names=schema.confounders, w_names=schema.predictive)


def write_csv(ds: Dataset, path, schema: Schema | None = None) -> None:
    """Write ``ds`` so that :func:`load_csv` reproduces it exactly."""
    if schema is None:
        schema = Schema("A", "Y", ds.x_names, ds.w_names)
    cols = {schema.treatment: ds.a.astype(int), schema.outcome: ds.y}
    for name, col in zip(schema.confounders, ds.x.T):
        cols[name] = col
    for name, col in zip(schema.predictive, ds.w.T):
        cols[name] = col
    # float repr round-trips exactly; NaN becomes an empty cell
    pd.DataFrame(cols).to_csv(path, index=False, na_rep="", float_format=None)


def _resolve(ds: Dataset, columns) -> list[tuple[str, int]]:
    out = []
    for c in columns:
        if isinstance(c, str):
            if c in ds.x_names:
                out.append(("x", ds.x_names.index(c)))
            elif c in ds.w_names:
                out.append(("w", ds.w_names.index(c)))
            else:
                raise DataError(f"unknown column {c!r}")
        else:
            j = int(c)
            if not 0 <= j < ds.p + ds.q:
                raise DataError(f"column index {j} out of range")
            out.append(("x", j) if j < ds.p else ("w", j - ds.p))
    return out


def normalize(ds: Dataset, columns: Sequence) -> Dataset:
    """Standardize selected columns to mean 0 and sample sd 1 (ddof=1).

    Columns are given by name or by index into ``[X | W]``. Predictive columns
    use observed entries only.
    """
    x = ds.x.copy()
    w = ds.w.copy()
    for block, j in _resolve(ds, columns):
        if block == "x":
            vals = x[:, j]
            mask = np.ones(ds.n, dtype=bool)
        else:
            mask = ds.r[:, j] == 1
            vals = w[:, j]
        obs = vals[mask]
        sd = obs.std(ddof=1) if obs.size > 1 else 0.0
        if not sd > 0:
            name = ds.x_names[j] if block == "x" else ds.w_names[j]
            raise DataError(f"column {name!r} has zero variance")
        vals[mask] = (obs - obs.mean()) / sd
    return ds.replace(x=x, w=w)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise DataError("need at least two rows to split")
    n_train = min(max(round_half_up(n * spec.train_fraction), 1), n - 1)
    perm = np.random.default_rng(int(spec.seed)).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Seeded disjoint train/test partition preserving row order within each part."""
    train, test = split_indices(ds.n, spec)
    return ds.take(train), ds.take(test)


def augment(ds: Dataset, w_tilde) -> AugmentedDataset:
    w_tilde = np.asarray(w_tilde, dtype=float)
    if ds.q == 0 and w_tilde.size == 0:
        w_tilde = np.empty((ds.n, 0))
    if w_tilde.shape != ds.w.shape:
        raise DataError(f"w_tilde shape {w_tilde.shape} does not match w {ds.w.shape}")
    if not np.all(np.isfinite(w_tilde)):
        raise DataError("w_tilde must be finite everywhere")
    observed = ds.r == 1
    if np.any(w_tilde[observed] != ds.w[observed]):
        raise DataError("w_tilde disagrees with observed entries of w")
    return AugmentedDataset(ds, w_tilde)

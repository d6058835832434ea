"""Datasets, search spaces and seeded random streams."""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class DataError(ValueError):
    """Invalid dataset contents or shape."""


class CSVFormatError(DataError):
    """A dataset CSV could not be parsed.

    ``row`` is the 1-based line number in the file (the header is line 1) and
    ``column`` the 1-based column, when the problem can be localized.
    """

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


class MalformedCSVError(CSVFormatError):
    pass


class NonNumericCellError(CSVFormatError):
    pass


class ColumnCountError(CSVFormatError):
    pass


class EmptyDatasetError(CSVFormatError):
    pass


# --------------------------------------------------------------------------
# random streams

def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *key)``.

    Streams with different keys are statistically independent; the same
    ``(seed, key)`` always yields the same sequence.
    """
    if not 0 <= int(seed) < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


# --------------------------------------------------------------------------
# dataset

def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """Labeled samples: ``inputs`` is n x p, ``outputs`` is n x t."""

    inputs: np.ndarray
    outputs: np.ndarray
    feature_names: tuple[str, ...] = ()
    output_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = _as_matrix(self.inputs, "inputs")
        y = _as_matrix(self.outputs, "outputs")
        if x.shape[0] < 1:
            raise DataError("dataset must contain at least one sample")
        if x.shape[1] < 1 or y.shape[1] < 1:
            raise DataError("dataset needs at least one input and one output column")
        if x.shape[0] != y.shape[0]:
            raise DataError(f"row count mismatch: {x.shape[0]} inputs vs {y.shape[0]} outputs")
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            raise DataError("dataset contains non-finite values")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "outputs", y)
        fnames = tuple(self.feature_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        onames = tuple(self.output_names) or tuple(f"y{j + 1}" for j in range(y.shape[1]))
        if len(fnames) != x.shape[1] or len(onames) != y.shape[1]:
            raise DataError("column name count does not match data width")
        object.__setattr__(self, "feature_names", fnames)
        object.__setattr__(self, "output_names", onames)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def p(self) -> int:
        return self.inputs.shape[1]

    @property
    def t(self) -> int:
        return self.outputs.shape[1]

    def __len__(self) -> int:
        return self.n

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.inputs[rows], self.outputs[rows], self.feature_names, self.output_names)


def _fmt(v: float) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return repr(float(v))


def write_matrix_csv(path, header: Sequence[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in np.asarray(rows, dtype=float):
            w.writerow([_fmt(v) for v in r])


def write_dataset_csv(ds: Dataset, path) -> None:
    write_matrix_csv(path, ds.feature_names + ds.output_names, np.hstack([ds.inputs, ds.outputs]))


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a headered numeric CSV. Raises a ``CSVFormatError`` subclass."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, strict=True)
            try:
                header = next(reader)
            except StopIteration:
                raise MalformedCSVError("missing header row", row=1) from None
            header = [h.strip() for h in header]
            if not header or any(h == "" for h in header):
                raise MalformedCSVError("empty column name in header", row=1)
            rows = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec or all(c.strip() == "" for c in rec):
                    continue
                if len(rec) != len(header):
                    raise ColumnCountError(
                        f"expected {len(header)} columns, found {len(rec)}", row=lineno
                    )
                vals = []
                for col, cell in enumerate(rec, start=1):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise NonNumericCellError(
                            f"non-numeric cell {cell!r}", row=lineno, column=col
                        ) from None
                    if not math.isfinite(v):
                        raise NonNumericCellError(
                            f"non-finite cell {cell!r}", row=lineno, column=col
                        )
                    vals.append(v)
                rows.append(vals)
    except csv.Error as exc:
        raise MalformedCSVError(str(exc)) from exc
    if not rows:
        raise EmptyDatasetError("no data rows", row=2)
    return header, np.array(rows, dtype=float)


def load_dataset_csv(path) -> Dataset:
    """Load a dataset whose header marks inputs with ``x`` and outputs with ``y``.

    All input columns must precede all output columns.
    """
    header, data = read_matrix_csv(path)
    kinds = []
    for col, name in enumerate(header, start=1):
        c = name[:1].lower()
        if c not in ("x", "y"):
            raise MalformedCSVError(
                f"column {name!r} is neither an input (x*) nor an output (y*)", row=1, column=col
            )
        kinds.append(c)
    p = kinds.count("x")
    if p == 0 or p == len(kinds) or kinds != ["x"] * p + ["y"] * (len(kinds) - p):
        raise MalformedCSVError("header must list x* input columns followed by y* output columns", row=1)
    return Dataset(data[:, :p], data[:, p:], tuple(header[:p]), tuple(header[p:]))


def train_test_split(ds: Dataset, n_test: int, seed: int | np.random.Generator) -> tuple[Dataset, Dataset]:
    """Seeded shuffle, last ``n_test`` shuffled rows become the test set."""
    if not 1 <= n_test < ds.n:
        raise ValueError(f"n_test must be in [1, {ds.n - 1}], got {n_test}")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed)
    perm = rng.permutation(ds.n)
    train_rows = np.sort(perm[: ds.n - n_test])
    test_rows = np.sort(perm[ds.n - n_test:])
    return ds.subset(train_rows), ds.subset(test_rows)


# --------------------------------------------------------------------------
# search space

@dataclass(frozen=True)
class Fixed:
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("fixed value must be finite")


@dataclass(frozen=True)
class Range:
    min: float
    max: float

    def __post_init__(self):
        if not (math.isfinite(self.min) and math.isfinite(self.max)):
            raise ValueError("range bounds must be finite")
        if self.min >= self.max:
            raise ValueError(f"range requires min < max, got [{self.min}, {self.max}]")


DimSpec = Union[Fixed, Range]


@dataclass(frozen=True)
class SearchSpace:
    """Finite candidate set; every row honors ``dims``."""

    dims: tuple[DimSpec, ...]
    candidates: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(self.dims)
        c = _as_matrix(self.candidates, "candidates")
        if not dims:
            raise ValueError("search space needs at least one dimension")
        if c.shape[0] < 1:
            raise ValueError("search space needs at least one candidate")
        if c.shape[1] != len(dims):
            raise ValueError(f"candidates have {c.shape[1]} columns but {len(dims)} dims declared")
        if not np.isfinite(c).all():
            raise ValueError("search space contains non-finite values")
        for j, d in enumerate(dims):
            col = c[:, j]
            if isinstance(d, Fixed):
                ok = (col == d.value).all()
            else:
                ok = ((col >= d.min) & (col <= d.max)).all()
            if not ok:
                raise ValueError(f"candidate column {j} violates its dimension spec {d}")
        c.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "candidates", c)

    @property
    def m(self) -> int:
        return self.candidates.shape[0]

    @property
    def p(self) -> int:
        return self.candidates.shape[1]

    def __len__(self) -> int:
        return self.m

    def to_csv(self, path, names: Sequence[str] | None = None) -> None:
        names = list(names) if names else [f"x{j + 1}" for j in range(self.p)]
        write_matrix_csv(path, names, self.candidates)


def sample_search_space(dims: Sequence[DimSpec], m: int, seed: int | np.random.Generator) -> SearchSpace:
    """Draw ``m`` candidates: ranged dims i.i.d. uniform on [min, max), fixed dims copied."""
    dims = tuple(dims)
    if not dims:
        raise ValueError("search space needs at least one dimension")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed)
    out = np.empty((m, len(dims)))
    for j, d in enumerate(dims):
        if isinstance(d, Fixed):
            out[:, j] = d.value
        elif isinstance(d, Range):
            out[:, j] = rng.uniform(d.min, d.max, size=m)
        else:
            raise TypeError(f"unknown dimension spec {d!r}")
    return SearchSpace(dims, out)


# --------------------------------------------------------------------------
# targets and intervals

@dataclass(frozen=True)
class TargetSpec:
    target: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.array(self.target, dtype=float))
        if v.ndim != 1 or v.size < 1:
            raise ValueError("target must be a non-empty vector")
        if not np.isfinite(v).all():
            raise ValueError("target entries must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "target", v)

    @property
    def t(self) -> int:
        return self.target.size


@dataclass(frozen=True)
class PredictionInterval:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.array(self.lower, dtype=float))
        hi = np.atleast_1d(np.array(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if (lo > hi).any():
            raise ValueError("interval lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


# --------------------------------------------------------------------------
# config helpers

_PI_RE = re.compile(r"^\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+)?(?:[eE][+-]?\d+)?)\s*\*?\s*pi\s*$")


def parse_number(v) -> float:
    """Accept JSON numbers and strings such as ``"0.1pi"``, ``"-pi"`` or ``"2.5"``."""
    out = _parse_number(v)
    if not math.isfinite(out):
        raise ValueError(f"expected a finite number, got {v!r}")
    return out


def _parse_number(v) -> float:
    if isinstance(v, bool):
        raise ValueError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        m = _PI_RE.match(v)
        if m:
            coef = m.group(1)
            if coef in ("", "+"):
                return math.pi
            if coef == "-":
                return -math.pi
            return float(coef) * math.pi
        return float(v)
    raise ValueError(f"expected a number, got {v!r}")


def parse_dim(spec) -> DimSpec:
    """``{"fixed": v}`` or ``{"range": [lo, hi]}``."""
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError(f"dimension spec must be {{'fixed': v}} or {{'range': [lo, hi]}}, got {spec!r}")
    (key, val), = spec.items()
    if key == "fixed":
        return Fixed(parse_number(val))
    if key == "range":
        lo, hi = val
        return Range(parse_number(lo), parse_number(hi))
    raise ValueError(f"unknown dimension spec field {key!r}")


def dim_to_json(d: DimSpec) -> dict:
    if isinstance(d, Fixed):
        return {"fixed": d.value}
    return {"range": [d.min, d.max]}


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def assign_folds(n: int, K: int, seed: int | np.random.Generator) -> np.ndarray:
    """Fold label (0..K-1) per sample: seeded shuffle, then contiguous blocks.

    Block sizes differ by at most one.
    """
    if not 2 <= K <= n:
        raise ValueError(f"fold count must be in [2, {n}], got {K}")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed)
    perm = rng.permutation(n)
    membership = np.empty(n, dtype=np.int64)
    for k, block in enumerate(np.array_split(perm, K)):
        membership[block] = k
    return membership


class ConfigError(ValueError):
    """A configuration document failed validation."""


def check_fields(doc, allowed, required=(), context: str = "config") -> dict:
    """Reject unknown or missing keys, naming the offending field."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{context} must be a JSON object")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{context}: unknown field {key!r}")
    for key in required:
        if key not in doc:
            raise ConfigError(f"{context}: missing required field {key!r}")
    return doc

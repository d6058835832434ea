"""Point-prediction surrogates: brute-force kNN and multivariate polynomial.

Both regressors are fitted by minimizing the mean squared error (the kNN
regressor trivially, by memorizing the data) and share a small interface:
``predict``, ``input_dim``, ``output_dim``, ``to_dict``.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import ConfigError, Dataset, assign_folds, check_fields

KNN = "knn"
POLYNOMIAL = "polynomial"
KINDS = (KNN, POLYNOMIAL)
FORMAT_VERSION = "1"

# rows of the query matrix handled per distance block
_CHUNK = 1024


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class RegressorSpec:
    """Model family plus its single integer hyperparameter.

    ``param`` is the neighbor count for kNN and the total degree for
    polynomial regression.
    """

    kind: str
    param: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown regressor kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.param, bool) or int(self.param) != self.param or self.param < 1:
            raise ModelError(f"hyperparameter must be a positive integer, got {self.param!r}")
        object.__setattr__(self, "param", int(self.param))

    @classmethod
    def knn(cls, k: int) -> "RegressorSpec":
        return cls(KNN, k)

    @classmethod
    def polynomial(cls, degree: int) -> "RegressorSpec":
        return cls(POLYNOMIAL, degree)

    def to_dict(self) -> dict:
        key = "k" if self.kind == KNN else "degree"
        return {"kind": self.kind, key: self.param}

    def __str__(self) -> str:
        return f"{self.kind}(k={self.param})" if self.kind == KNN else f"{self.kind}(degree={self.param})"


def _query_matrix(x, p: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != p:
        raise ModelError(f"expected inputs with {p} columns, got shape {np.shape(x)}")
    if not np.isfinite(arr).all():
        raise ModelError("query contains non-finite values")
    return arr, single


# --------------------------------------------------------------------------
# k nearest neighbors

def _squared_distances(queries: np.ndarray, train: np.ndarray) -> np.ndarray:
    # per-dimension accumulation keeps the summation order fixed
    d = np.subtract.outer(queries[:, 0], train[:, 0])
    d *= d
    for j in range(1, train.shape[1]):
        diff = np.subtract.outer(queries[:, j], train[:, j])
        diff *= diff
        d += diff
    return d


def knn_select(d: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k smallest entries per row, ties to lower column."""
    n = d.shape[1]
    if k >= n:
        return np.ones_like(d, dtype=bool)
    kth = np.partition(d, k - 1, axis=1)[:, k - 1: k]
    mask = d <= kth
    over = np.flatnonzero(mask.sum(axis=1) > k)
    if over.size:
        sub_d = d[over]
        sub_kth = kth[over]
        below = sub_d < sub_kth
        need = k - below.sum(axis=1, keepdims=True)
        tied = sub_d == sub_kth
        mask[over] = below | (tied & (np.cumsum(tied, axis=1) <= need))
    return mask


class KNNRegressor:
    """Unweighted k-nearest-neighbor regression with exact Euclidean distance."""

    def __init__(self, spec: RegressorSpec, inputs: np.ndarray, outputs: np.ndarray):
        self.spec = spec
        self.inputs = np.array(inputs, dtype=float)
        self.outputs = np.array(outputs, dtype=float)
        self.inputs.flags.writeable = False
        self.outputs.flags.writeable = False
        self._tree = cKDTree(self.inputs)

    @property
    def k(self) -> int:
        return self.spec.param

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]

    def _brute_rows(self, q: np.ndarray) -> np.ndarray:
        rows = np.empty((q.shape[0], self.k), dtype=np.int64)
        for s in range(0, q.shape[0], _CHUNK):
            block = q[s: s + _CHUNK]
            d = _squared_distances(block, self.inputs)
            mask = knn_select(d, self.k)
            idx = np.nonzero(mask)[1].reshape(block.shape[0], self.k)
            dsel = np.take_along_axis(d, idx, axis=1)
            rows[s: s + _CHUNK] = np.take_along_axis(idx, np.lexsort((idx, dsel), axis=-1), axis=1)
        return rows

    def neighbor_rows(self, q: np.ndarray, exact: bool = False) -> np.ndarray:
        """Indices of the k nearest training rows per query, nearest first.

        Equal distances are ordered by training-row index.

        The KD-tree answer is kept only when the gap between the k-th and
        (k+1)-th exact distances is far above rounding error; other rows go
        through the brute-force scan, so both paths agree exactly.
        """
        n, k = self.inputs.shape[0], self.k
        if exact or k >= n:
            return self._brute_rows(q)
        _, idx = self._tree.query(q, k=k + 1)
        idx = idx.reshape(q.shape[0], k + 1)
        cand = self.inputs[idx]
        d = (cand[..., 0] - q[:, None, 0]) ** 2
        for j in range(1, q.shape[1]):
            d += (cand[..., j] - q[:, None, j]) ** 2
        order = np.lexsort((idx, d), axis=-1)
        d = np.take_along_axis(d, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        rows = np.ascontiguousarray(idx[:, :k])
        unsure = np.flatnonzero(~(d[:, k - 1] < d[:, k] * (1.0 - 1e-9)))
        if unsure.size:
            rows[unsure] = self._brute_rows(q[unsure])
        return rows

    def predict(self, x, exact: bool = False) -> np.ndarray:
        q, single = _query_matrix(x, self.input_dim)
        rows = self.neighbor_rows(q, exact=exact)
        # neighbors summed one at a time, nearest first
        out = self.outputs[rows[:, 0]].copy()
        for c in range(1, rows.shape[1]):
            out += self.outputs[rows[:, c]]
        out /= self.k
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            **self.spec.to_dict(),
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
        }


# --------------------------------------------------------------------------
# polynomial

def monomial_exponents(p: int, degree: int) -> np.ndarray:
    """Exponent vectors of all monomials of total degree <= ``degree``.

    Ordered by total degree, then by variable combination; row 0 is the
    constant term.
    """
    rows = []
    for deg in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(p), deg):
            e = [0] * p
            for j in combo:
                e[j] += 1
            rows.append(e)
    return np.array(rows, dtype=np.int64).reshape(-1, p)


def monomial_features(x: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    max_e = int(exponents.max()) if exponents.size else 0
    powers = [np.ones_like(x)]
    for _ in range(max_e):
        powers.append(powers[-1] * x)
    feats = np.empty((x.shape[0], exponents.shape[0]))
    for c, e in enumerate(exponents):
        col = np.ones(x.shape[0])
        for j, ej in enumerate(e):
            if ej:
                col = col * powers[ej][:, j]
        feats[:, c] = col
    return feats


class PolynomialRegressor:
    """Least-squares polynomial regression on standardized monomial features."""

    def __init__(self, spec, exponents, mean, scale, coef):
        self.spec = spec
        self.exponents = np.asarray(exponents, dtype=np.int64)
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        self.coef = np.asarray(coef, dtype=float)
        if not np.isfinite(self.coef).all():
            raise ModelError("polynomial coefficients are not finite")

    @property
    def degree(self) -> int:
        return self.spec.param

    @property
    def input_dim(self) -> int:
        return self.exponents.shape[1]

    @property
    def output_dim(self) -> int:
        return self.coef.shape[1]

    def _design(self, x: np.ndarray) -> np.ndarray:
        return (monomial_features(x, self.exponents) - self.mean) / self.scale

    def predict(self, x) -> np.ndarray:
        q, single = _query_matrix(x, self.input_dim)
        # explicit reduction: row results do not depend on batch size
        out = (self._design(q)[:, :, None] * self.coef[None, :, :]).sum(axis=1)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            **self.spec.to_dict(),
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "exponents": self.exponents.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "coef": self.coef.tolist(),
        }


def _fit_polynomial(spec: RegressorSpec, ds: Dataset) -> PolynomialRegressor:
    n_terms = comb(ds.p + spec.param, spec.param)
    if n_terms > ds.n:
        warnings.warn(
            f"degree-{spec.param} polynomial has {n_terms} monomials but only {ds.n} samples; "
            "returning the minimum-norm least-squares solution",
            stacklevel=3,
        )
    exps = monomial_exponents(ds.p, spec.param)
    feats = monomial_features(ds.inputs, exps)
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    # the constant monomial stays as a raw column of ones
    mean[0], scale[0] = 0.0, 1.0
    scale[scale == 0.0] = 1.0
    design = (feats - mean) / scale
    coef, *_ = np.linalg.lstsq(design, ds.outputs, rcond=None)
    return PolynomialRegressor(spec, exps, mean, scale, coef)


# --------------------------------------------------------------------------
# public operations

def fit(spec: RegressorSpec, ds: Dataset):
    """Fit ``spec`` to ``ds`` by quadratic-loss empirical risk minimization."""
    if ds.n < 1:
        raise ModelError("cannot fit on an empty dataset")
    if spec.kind == KNN:
        if spec.param > ds.n:
            raise ModelError(f"k={spec.param} exceeds the number of samples ({ds.n})")
        return KNNRegressor(spec, ds.inputs, ds.outputs)
    return _fit_polynomial(spec, ds)


def predict(model, x) -> np.ndarray:
    return model.predict(x)


def r2_from_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """Per-output coefficient of determination.

    A constant target column scores 1 when predicted exactly, else 0.
    """
    y_true = np.asarray(y_true, dtype=float).reshape(len(y_true), -1)
    y_pred = np.asarray(y_pred, dtype=float).reshape(y_true.shape)
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    ss_tot = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    out = np.empty(y_true.shape[1])
    for j in range(out.size):
        if ss_tot[j] == 0.0:
            out[j] = 1.0 if ss_res[j] == 0.0 else 0.0
        else:
            out[j] = 1.0 - ss_res[j] / ss_tot[j]
    return out


def r2_score(model, ds: Dataset) -> np.ndarray:
    if ds.p != model.input_dim or ds.t != model.output_dim:
        raise ModelError(
            f"dataset shape (p={ds.p}, t={ds.t}) does not match model "
            f"(p={model.input_dim}, t={model.output_dim})"
        )
    return r2_from_predictions(ds.outputs, model.predict(ds.inputs))


def cv_score(spec: RegressorSpec, ds: Dataset, membership: np.ndarray) -> float:
    """Mean over folds of the output-averaged held-out R²."""
    scores = []
    for k in range(int(membership.max()) + 1):
        held = membership == k
        model = fit(spec, ds.subset(~held))
        scores.append(float(r2_score(model, ds.subset(held)).mean()))
    return float(np.mean(scores))


def grid_search(kind: str, grid: Sequence[int], ds: Dataset, folds: int, seed) -> RegressorSpec:
    """Pick the grid value with the best cross-validated R².

    Ties go to the smaller hyperparameter. All grid values share one fold
    assignment.
    """
    grid = sorted({int(g) for g in grid})
    if not grid:
        raise ModelError("hyperparameter grid is empty")
    if not 2 <= folds <= ds.n:
        raise ModelError(f"folds must be in [2, {ds.n}], got {folds}")
    specs = [RegressorSpec(kind, g) for g in grid]
    if len(specs) == 1:
        return specs[0]
    membership = assign_folds(ds.n, folds, seed)
    best, best_score = None, -np.inf
    for spec in specs:
        s = cv_score(spec, ds, membership)
        if s > best_score:
            best, best_score = spec, s
    if best is None:
        # every score was NaN; fall back to the simplest model
        best = specs[0]
    return best


def parse_model_config(doc, context: str = "model") -> tuple[str, list[int]]:
    """``{"kind": "knn", "k": 6}``, ``{"kind": "polynomial", "degree": 6}``
    or either kind with ``"grid": [...]``. Returns ``(kind, grid)``."""
    check_fields(doc, ("kind", "k", "degree", "grid"), ("kind",), context)
    kind = doc["kind"]
    if kind not in KINDS:
        raise ConfigError(f"{context}: kind must be one of {KINDS}, got {kind!r}")
    key = "k" if kind == KNN else "degree"
    wrong = "degree" if kind == KNN else "k"
    if wrong in doc:
        raise ConfigError(f"{context}: unknown field {wrong!r} for kind {kind!r}")
    if (key in doc) == ("grid" in doc):
        raise ConfigError(f"{context}: give exactly one of {key!r} or 'grid'")
    grid = doc["grid"] if "grid" in doc else [doc[key]]
    if not isinstance(grid, list) or not grid:
        raise ConfigError(f"{context}: grid must be a non-empty list")
    try:
        for g in grid:
            RegressorSpec(kind, g)
    except ModelError as exc:
        raise ConfigError(f"{context}: {exc}") from None
    return kind, [int(g) for g in grid]


# --------------------------------------------------------------------------
# persistence

def model_from_dict(doc: dict):
    if str(doc.get("version")) != FORMAT_VERSION:
        raise ModelError(f"unsupported model format version {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind == KNN:
        spec = RegressorSpec.knn(doc["k"])
        return KNNRegressor(
            spec,
            np.array(doc["inputs"], dtype=float).reshape(-1, doc["input_dim"]),
            np.array(doc["outputs"], dtype=float).reshape(-1, doc["output_dim"]),
        )
    if kind == POLYNOMIAL:
        spec = RegressorSpec.polynomial(doc["degree"])
        return PolynomialRegressor(
            spec,
            np.array(doc["exponents"], dtype=np.int64).reshape(-1, doc["input_dim"]),
            doc["mean"],
            doc["scale"],
            np.array(doc["coef"], dtype=float).reshape(-1, doc["output_dim"]),
        )
    raise ModelError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))

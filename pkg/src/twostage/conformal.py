"""Cross-validation conformal prediction intervals (CV+).

The evaluator is refit once per fold with that fold held out. Every training
sample gets a holdout residual from the fold model that never saw it; an
interval at a new point takes conformal quantiles of the fold-model
predictions shifted down / up by those residuals. Residuals are computed once
in ``calibrate`` and reused for every query.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import models
from .core import Dataset, PredictionInterval, TargetSpec, assign_folds
from .models import RegressorSpec

FORMAT_VERSION = "1"
LOWER = "lower"
UPPER = "upper"

# rank arithmetic treats alpha as a decimal: (1 - 0.2) * 5 must give 4, not 4 + ulp
_RANK_EPS = 1e-9
_CHUNK = 256


class ConformalError(ValueError):
    pass


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ConformalError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def conformal_ranks(n: int, alpha: float) -> tuple[int, int, bool]:
    """1-based order-statistic ranks ``(lower, upper)`` and a clamping flag.

    lower = floor(alpha (n+1)), upper = ceil((1-alpha)(n+1)), each clamped
    into [1, n]. The flag is set when either needed clamping.
    """
    alpha = _check_alpha(alpha)
    if n < 1:
        raise ConformalError("need at least one value")
    lo = math.floor(alpha * (n + 1) + _RANK_EPS)
    hi = math.ceil((1.0 - alpha) * (n + 1) - _RANK_EPS)
    clamped = lo < 1 or hi > n
    return min(max(lo, 1), n), min(max(hi, 1), n), clamped


def conformal_quantile(values, alpha: float, side: str) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ConformalError("conformal quantile of an empty list")
    lo, hi, _ = conformal_ranks(v.size, alpha)
    if side == LOWER:
        r = lo
    elif side == UPPER:
        r = hi
    else:
        raise ConformalError(f"side must be 'lower' or 'upper', got {side!r}")
    return float(np.partition(v, r - 1)[r - 1])


@dataclass(frozen=True)
class FoldAssignment:
    """``membership[i]`` is the 0-based fold holding sample i."""

    K: int
    membership: np.ndarray

    def __post_init__(self):
        mem = np.asarray(self.membership, dtype=np.int64)
        if mem.ndim != 1 or mem.size < self.K:
            raise ConformalError("membership must be a vector with at least K entries")
        if mem.min() < 0 or mem.max() >= self.K:
            raise ConformalError("fold labels must lie in [0, K)")
        sizes = np.bincount(mem, minlength=self.K)
        if sizes.min() < 1:
            raise ConformalError("every fold must be non-empty")
        mem.flags.writeable = False
        object.__setattr__(self, "membership", mem)

    @classmethod
    def random(cls, n: int, K: int, seed) -> "FoldAssignment":
        return cls(K, assign_folds(n, K, seed))

    @property
    def n(self) -> int:
        return self.membership.size

    def sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.K)


@dataclass(frozen=True)
class ConformalCalibration:
    folds: FoldAssignment
    fold_models: tuple
    residuals: np.ndarray
    alpha: float
    spec: RegressorSpec | None = None

    def __post_init__(self):
        res = np.asarray(self.residuals, dtype=float)
        if res.ndim == 1:
            res = res.reshape(-1, 1)
        if res.shape[0] != self.folds.n:
            raise ConformalError("one residual row per training sample is required")
        if (res < 0).any() or not np.isfinite(res).all():
            raise ConformalError("residuals must be finite and non-negative")
        if len(self.fold_models) != self.folds.K:
            raise ConformalError("one fitted model per fold is required")
        _check_alpha(self.alpha)
        res.flags.writeable = False
        object.__setattr__(self, "residuals", res)
        object.__setattr__(self, "fold_models", tuple(self.fold_models))

    @property
    def n(self) -> int:
        return self.folds.n

    @property
    def K(self) -> int:
        return self.folds.K

    @property
    def input_dim(self) -> int:
        return self.fold_models[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.residuals.shape[1]

    @property
    def clamped(self) -> bool:
        """True when alpha is too small for n and ranks were clamped to the extremes."""
        return conformal_ranks(self.n, self.alpha)[2]

    def with_alpha(self, alpha: float) -> "ConformalCalibration":
        return replace(self, alpha=_check_alpha(alpha))

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "alpha": self.alpha,
            "K": self.K,
            "spec": self.spec.to_dict() if self.spec else None,
            "membership": self.folds.membership.tolist(),
            "fold_models": [m.to_dict() for m in self.fold_models],
            "residuals": self.residuals.tolist(),
        }


def calibrate(spec: RegressorSpec, ds: Dataset, K: int, alpha: float, seed) -> ConformalCalibration:
    """Fit K held-out evaluators and record every sample's holdout residual."""
    alpha = _check_alpha(alpha)
    if not 2 <= K <= ds.n:
        raise ConformalError(f"K must be in [2, {ds.n}], got {K}")
    folds = FoldAssignment.random(ds.n, K, seed)
    fold_models = []
    residuals = np.empty((ds.n, ds.t))
    for k in range(K):
        held = folds.membership == k
        model = models.fit(spec, ds.subset(~held))
        residuals[held] = np.abs(ds.outputs[held] - model.predict(ds.inputs[held]))
        fold_models.append(model)
    return ConformalCalibration(folds, tuple(fold_models), residuals, alpha, spec)


def fold_predictions(cal: ConformalCalibration, x: np.ndarray) -> np.ndarray:
    """(K, m, t) predictions of every fold model at the m query rows."""
    return np.stack([m.predict(x) for m in cal.fold_models])


def intervals(cal: ConformalCalibration, x, alpha: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lower and upper interval bounds, each (m, t), for the rows of ``x``."""
    alpha = cal.alpha if alpha is None else _check_alpha(alpha)
    q = np.asarray(x, dtype=float)
    if q.ndim == 1:
        q = q.reshape(1, -1)
    if q.ndim != 2 or q.shape[1] != cal.input_dim:
        raise ConformalError(f"expected inputs with {cal.input_dim} columns, got shape {np.shape(x)}")
    lo_rank, hi_rank, _ = conformal_ranks(cal.n, alpha)
    lower = np.empty((q.shape[0], cal.output_dim))
    upper = np.empty_like(lower)
    res = cal.residuals[:, None, :]
    for s in range(0, q.shape[0], _CHUNK):
        preds = fold_predictions(cal, q[s: s + _CHUNK])[cal.folds.membership]
        lower[s: s + _CHUNK] = np.partition(preds - res, lo_rank - 1, axis=0)[lo_rank - 1]
        upper[s: s + _CHUNK] = np.partition(preds + res, hi_rank - 1, axis=0)[hi_rank - 1]
    return lower, upper


def interval(cal: ConformalCalibration, x, alpha: float | None = None) -> PredictionInterval:
    lower, upper = intervals(cal, np.asarray(x, dtype=float).reshape(1, -1), alpha)
    return PredictionInterval(lower[0], upper[0])


def contains(iv: PredictionInterval, target) -> bool:
    """Closed-interval membership of every target coordinate."""
    y = target.target if isinstance(target, TargetSpec) else np.atleast_1d(np.asarray(target, dtype=float))
    if y.shape != iv.lower.shape:
        raise ConformalError(f"target has {y.size} entries but the interval has {iv.lower.size}")
    return bool(((iv.lower <= y) & (y <= iv.upper)).all())


# --------------------------------------------------------------------------
# persistence

def calibration_from_dict(doc: dict) -> ConformalCalibration:
    if str(doc.get("version")) != FORMAT_VERSION:
        raise ConformalError(f"unsupported calibration format version {doc.get('version')!r}")
    fold_models = tuple(models.model_from_dict(m) for m in doc["fold_models"])
    spec = None
    if doc.get("spec"):
        s = doc["spec"]
        spec = RegressorSpec(s["kind"], s.get("k", s.get("degree")))
    t = fold_models[0].output_dim
    return ConformalCalibration(
        FoldAssignment(int(doc["K"]), doc["membership"]),
        fold_models,
        np.array(doc["residuals"], dtype=float).reshape(-1, t),
        float(doc["alpha"]),
        spec,
    )


def save_calibration(cal: ConformalCalibration, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cal.to_dict(), fh)
        fh.write("\n")


def load_calibration(path) -> ConformalCalibration:
    with open(path, encoding="utf-8") as fh:
        return calibration_from_dict(json.load(fh))

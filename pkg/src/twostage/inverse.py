"""Single-stage and two-stage inverse design over a finite search space."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import conformal
from .core import PredictionInterval, SearchSpace, TargetSpec


class Verdict(str, Enum):
    ACCEPTED = "Accepted"
    REJECTED = "RejectedByInterval"
    NOT_EVALUATED = "NotEvaluated"


class InverseError(ValueError):
    pass


@dataclass
class Candidate:
    index: int
    x: np.ndarray
    score: float
    predicted: np.ndarray
    interval: PredictionInterval | None = None
    verdict: Verdict = Verdict.NOT_EVALUATED

    def to_dict(self) -> dict:
        return {
            "index": int(self.index),
            "x": [float(v) for v in self.x],
            "score": float(self.score),
            "predicted": [float(v) for v in self.predicted],
            "interval": None
            if self.interval is None
            else {"lower": self.interval.lower.tolist(), "upper": self.interval.upper.tolist()},
            "verdict": self.verdict.value,
        }


@dataclass
class SolveReport:
    candidates: list[Candidate]
    target: np.ndarray
    chosen: int | None = None
    config: dict = field(default_factory=dict)

    @property
    def solution(self) -> Candidate | None:
        return None if self.chosen is None else self.candidates[self.chosen]

    def best_rejected(self) -> Candidate | None:
        for c in self.candidates:
            if c.verdict is Verdict.REJECTED:
                return c
        return None

    def to_dict(self) -> dict:
        return {
            "target": [float(v) for v in self.target],
            "chosen": self.chosen,
            "candidates": [c.to_dict() for c in self.candidates],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _target_vector(target, t: int) -> np.ndarray:
    if not isinstance(target, TargetSpec):
        target = TargetSpec(target)
    if target.t != t:
        raise InverseError(f"target has {target.t} entries but the model predicts {t} outputs")
    return target.target


def _check_space(model, omega: SearchSpace) -> None:
    if omega.m < 1:
        raise InverseError("search space is empty")
    if omega.p != model.input_dim:
        raise InverseError(f"search space has {omega.p} dims but the model expects {model.input_dim}")


def misfit(predicted: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance of each predicted row to the target."""
    diff = np.asarray(predicted, dtype=float).reshape(-1, target.size) - target
    return (diff * diff).sum(axis=1)


def score_space(learner, omega: SearchSpace, target) -> tuple[np.ndarray, np.ndarray]:
    """Learner predictions over the whole search space and their misfit scores."""
    _check_space(learner, omega)
    y = _target_vector(target, learner.output_dim)
    pred = learner.predict(omega.candidates)
    return pred, misfit(pred, y)


def _candidate(omega, pred, scores, i) -> Candidate:
    return Candidate(int(i), omega.candidates[i].copy(), float(scores[i]), pred[i].copy())


def solve_single_stage(learner, omega: SearchSpace, target, gamma: float = 0.0,
                       predictions: np.ndarray | None = None) -> Candidate:
    """Exhaustive minimizer of misfit + gamma * ||x||², lowest row index on ties.

    ``predictions`` lets callers reuse learner output already computed for
    ``omega``.
    """
    if gamma < 0 or not np.isfinite(gamma):
        raise InverseError(f"gamma must be finite and >= 0, got {gamma}")
    _check_space(learner, omega)
    y = _target_vector(target, learner.output_dim)
    pred = learner.predict(omega.candidates) if predictions is None else predictions
    scores = misfit(pred, y)
    objective = scores
    if gamma:
        objective = scores + gamma * (omega.candidates ** 2).sum(axis=1)
    return _candidate(omega, pred, scores, int(np.argmin(objective)))


def screen_top_b(learner, omega: SearchSpace, target, B: int,
                 predictions: np.ndarray | None = None) -> list[Candidate]:
    """The B lowest-misfit candidates, ascending, row index breaking ties."""
    _check_space(learner, omega)
    if not 1 <= B <= omega.m:
        raise InverseError(f"B must be in [1, {omega.m}], got {B}")
    y = _target_vector(target, learner.output_dim)
    pred = learner.predict(omega.candidates) if predictions is None else predictions
    scores = misfit(pred, y)
    if B < omega.m:
        # stable partial order: everything strictly below the B-th score, then ties by index
        kth = np.partition(scores, B - 1)[B - 1]
        pool = np.flatnonzero(scores <= kth)
    else:
        pool = np.arange(omega.m)
    order = pool[np.argsort(scores[pool], kind="stable")][:B]
    return [_candidate(omega, pred, scores, i) for i in order]


def filter_candidates(cal, candidates: list[Candidate], target, alpha: float | None = None,
                      lazy: bool = True) -> int | None:
    """Attach intervals in order and mark verdicts; return the first accepted position.

    With ``lazy`` the scan stops at the first acceptance and later candidates
    stay ``NotEvaluated``.
    """
    y = _target_vector(target, cal.output_dim)
    chosen = None
    for pos, c in enumerate(candidates):
        c.interval = conformal.interval(cal, c.x, alpha)
        if conformal.contains(c.interval, y):
            c.verdict = Verdict.ACCEPTED
            if chosen is None:
                chosen = pos
                if lazy:
                    break
        else:
            c.verdict = Verdict.REJECTED
    return chosen


def solve_two_stage(learner, cal, omega: SearchSpace, target, B: int,
                    alpha: float | None = None, lazy: bool = True,
                    predictions: np.ndarray | None = None) -> SolveReport:
    """Screen the top-B candidates with the learner, keep the first the evaluator accepts."""
    if learner.input_dim != cal.input_dim or learner.output_dim != cal.output_dim:
        raise InverseError("learner and evaluator calibration disagree on input/output dims")
    y = _target_vector(target, learner.output_dim)
    alpha = cal.alpha if alpha is None else alpha
    screened = screen_top_b(learner, omega, y, B, predictions=predictions)
    chosen = filter_candidates(cal, screened, y, alpha, lazy=lazy)
    config = {
        "method": "two_stage",
        "B": B,
        "alpha": alpha,
        "K": cal.K,
        "learner": learner.spec.to_dict(),
        "evaluator": cal.spec.to_dict() if cal.spec else None,
        "quantile_clamped": conformal.conformal_ranks(cal.n, alpha)[2],
    }
    return SolveReport(screened, y, chosen, config)

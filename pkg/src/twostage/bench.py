"""Benchmark forward models and the multi-trial inverse-design experiment."""

from __future__ import annotations

import csv
import math
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import conformal, models
from .core import (
    ConfigError,
    Dataset,
    Fixed,
    Range,
    check_fields,
    parse_number,
    read_matrix_csv,
    rng_stream,
    sample_search_space,
    write_matrix_csv,
)
from .inverse import screen_top_b, solve_single_stage, solve_two_stage
from .models import RegressorSpec

PI = math.pi


class ForwardModelError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# analytic test functions

def ishigami1(x, a: float = 7.0, b: float = 0.1):
    """sin(x1) + a sin²(x2) + b x3⁴ sin(x1); ``x`` is a 3-vector or (m, 3) array."""
    x = np.asarray(x, dtype=float)
    s1 = np.sin(x[..., 0])
    return s1 + a * np.sin(x[..., 1]) ** 2 + b * x[..., 2] ** 4 * s1


def ishigami2(x):
    """Two-output Ishigami variant; the second output is damped by 0.1."""
    x = np.asarray(x, dtype=float)
    s1 = np.sin(x[..., 0])
    s2 = np.sin(x[..., 1]) ** 2
    x34 = x[..., 2] ** 4
    f1 = s1 + 7.0 * s2 + 0.1 * x34 * s1
    f2 = 0.1 * (s1 + 7.0 * s2 + 0.05 * x34 * s1)
    return np.stack([f1, f2], axis=-1)


def cubic(x):
    x = np.asarray(x, dtype=float)
    return x**3 - 0.5 * x**2


class ForwardModel:
    """Maps an (m, p) input matrix to an (m, t) output matrix."""

    name = "forward"
    # observation-noise standard deviation used when a config leaves sigma unset
    default_sigma: float | tuple = 0.0

    def __init__(self, p: int, t: int, box: Sequence[tuple[float, float]]):
        self.p = p
        self.t = t
        self.box = tuple((float(lo), float(hi)) for lo, hi in box)
        if len(self.box) != p:
            raise ValueError("box needs one (min, max) pair per input")

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        arr = arr.reshape(-1, self.p) if single else arr
        if arr.ndim != 2 or arr.shape[1] != self.p:
            raise ValueError(f"{self.name} expects {self.p} inputs, got shape {np.shape(x)}")
        if not np.isfinite(arr).all():
            raise ValueError(f"{self.name}: non-finite input")
        out = np.asarray(self._evaluate(arr), dtype=float).reshape(arr.shape[0], self.t)
        return out[0] if single else out

    def describe(self) -> dict:
        return {"name": self.name}


class Ishigami1(ForwardModel):
    name = "ishigami1"
    default_sigma = 0.25

    def __init__(self, a: float = 7.0, b: float = 0.1):
        super().__init__(3, 1, [(-PI, PI)] * 3)
        self.a, self.b = a, b

    def _evaluate(self, x):
        return ishigami1(x, self.a, self.b)

    def describe(self):
        return {"name": self.name, "a": self.a, "b": self.b}


class Ishigami2(ForwardModel):
    name = "ishigami2"
    # same ~2% of range on each output; the second output is ten times smaller
    default_sigma = (0.25, 0.025)

    def __init__(self):
        super().__init__(3, 2, [(-PI, PI)] * 3)

    def _evaluate(self, x):
        return ishigami2(x)


class Cubic(ForwardModel):
    name = "cubic"
    default_sigma = 0.15

    def __init__(self, low: float = -1.0, high: float = 1.5):
        super().__init__(1, 1, [(low, high)])

    def _evaluate(self, x):
        return cubic(x[:, 0])

    def describe(self):
        lo, hi = self.box[0]
        return {"name": self.name, "low": lo, "high": hi}


class ExternalForwardModel(ForwardModel):
    """Drives an external program through CSV files.

    The inputs are written to ``<dir>/candidates.csv`` (header ``x1..xp``),
    the command is run with that path appended as its last argument, and it
    must write the outputs to the sibling ``<dir>/candidates_outputs.csv``
    (header row, one row of t values per input row). Nonzero exit status is
    an error.
    """

    name = "external"

    def __init__(self, command: Sequence[str], p: int, t: int, box, timeout: float | None = None):
        super().__init__(p, t, box)
        if isinstance(command, str) or not command:
            raise ValueError("command must be a non-empty list of arguments")
        self.command = [str(c) for c in command]
        self.timeout = timeout

    @staticmethod
    def output_path(input_path) -> Path:
        p = Path(input_path)
        return p.with_name(p.stem + "_outputs.csv")

    def _evaluate(self, x):
        with tempfile.TemporaryDirectory(prefix="twostage-") as tmp:
            in_path = Path(tmp) / "candidates.csv"
            write_matrix_csv(in_path, [f"x{j + 1}" for j in range(self.p)], x)
            proc = subprocess.run(
                self.command + [str(in_path)], capture_output=True, text=True, timeout=self.timeout
            )
            if proc.returncode != 0:
                raise ForwardModelError(
                    f"external command exited with status {proc.returncode}: {proc.stderr.strip()}"
                )
            out_path = self.output_path(in_path)
            if not out_path.exists():
                raise ForwardModelError(f"external command did not write {out_path.name}")
            _, y = read_matrix_csv(out_path)
        if y.shape != (x.shape[0], self.t):
            raise ForwardModelError(f"expected a {x.shape[0]}x{self.t} output table, got {y.shape[0]}x{y.shape[1]}")
        return y

    def describe(self):
        return {"name": self.name, "command": self.command, "p": self.p, "t": self.t,
                "box": [list(b) for b in self.box]}


def make_forward_model(spec) -> ForwardModel:
    """Build a forward model from a name or a config object."""
    if isinstance(spec, str):
        spec = {"name": spec}
    check_fields(spec, ("name", "a", "b", "low", "high", "command", "p", "t", "box", "timeout"),
                 ("name",), "forward_model")
    name = spec["name"]
    extra = set(spec) - {"name"}
    allowed = {
        "ishigami1": {"a", "b"},
        "ishigami2": set(),
        "cubic": {"low", "high"},
        "external": {"command", "p", "t", "box", "timeout"},
    }
    if name not in allowed:
        raise ConfigError(f"forward_model: unknown model {name!r}")
    if extra - allowed[name]:
        raise ConfigError(f"forward_model: unknown field {sorted(extra - allowed[name])[0]!r} for {name!r}")
    if name == "ishigami1":
        return Ishigami1(parse_number(spec.get("a", 7.0)), parse_number(spec.get("b", 0.1)))
    if name == "ishigami2":
        return Ishigami2()
    if name == "cubic":
        return Cubic(parse_number(spec.get("low", -1.0)), parse_number(spec.get("high", 1.5)))
    for key in ("command", "p", "t", "box"):
        if key not in spec:
            raise ConfigError(f"forward_model: missing required field {key!r}")
    box = [(parse_number(lo), parse_number(hi)) for lo, hi in spec["box"]]
    return ExternalForwardModel(spec["command"], int(spec["p"]), int(spec["t"]), box, spec.get("timeout"))


# --------------------------------------------------------------------------
# data generation

def generate_dataset(fm: ForwardModel, n: int, sigma, seed) -> Dataset:
    """Inputs uniform over the model box; outputs f(x) plus N(0, sigma²) noise per coordinate.

    ``sigma`` is a scalar shared by all outputs or one value per output.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim > 1 or (sigma.ndim == 1 and sigma.size != fm.t):
        raise ValueError(f"sigma must be a scalar or have {fm.t} entries")
    if not (np.isfinite(sigma).all() and (sigma >= 0).all()):
        raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(seed)
    lo = np.array([b[0] for b in fm.box])
    hi = np.array([b[1] for b in fm.box])
    x = rng.uniform(lo, hi, size=(n, fm.p))
    noise = rng.normal(0.0, 1.0, size=(n, fm.t))
    y = fm(x) + sigma * noise
    return Dataset(x, y)


# --------------------------------------------------------------------------
# coverage

@dataclass
class CoverageResult:
    alpha: float
    coverage: np.ndarray
    mean_width: np.ndarray
    n_test: int
    clamped: bool

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "coverage": self.coverage.tolist(),
            "mean_width": self.mean_width.tolist(),
            "n_test": self.n_test,
            "floor": 1.0 - 2.0 * self.alpha,
            "nominal": 1.0 - self.alpha,
            "quantile_clamped": self.clamped,
        }


def coverage_audit(cal, test: Dataset, alpha: float | None = None) -> CoverageResult:
    """Per-output fraction of test outputs inside their interval, plus mean width."""
    if test.p != cal.input_dim or test.t != cal.output_dim:
        raise ValueError("test set dimensions do not match the calibration")
    alpha = cal.alpha if alpha is None else alpha
    lower, upper = conformal.intervals(cal, test.inputs, alpha)
    inside = (lower <= test.outputs) & (test.outputs <= upper)
    return CoverageResult(
        alpha,
        inside.mean(axis=0),
        (upper - lower).mean(axis=0),
        test.n,
        conformal.conformal_ranks(cal.n, alpha)[2],
    )


# --------------------------------------------------------------------------
# experiments

SINGLE = "single_stage"
TWO_STAGE = "two_stage"

# spawn-key prefixes for the experiment's independent random streams
_TRAIN, _TEST, _LEARNER_CV, _EVAL_CV, _FOLDS, _OMEGA = range(6)

_EXPERIMENT_FIELDS = (
    "forward_model", "sigma", "n_train", "n_test", "fixed_dim", "fixed_values", "m", "B",
    "alphas", "K", "gamma", "learner", "evaluator", "grid_folds", "targets", "trials", "seed",
    "workers", "filter",
)


@dataclass
class ExperimentConfig:
    forward_model: object = "ishigami1"
    sigma: float | list | None = None
    n_train: int = 2000
    n_test: int = 1000
    fixed_dim: int = 0
    fixed_values: list = field(default_factory=lambda: [0.1 * PI, 0.2 * PI, 0.3 * PI, 0.4 * PI])
    m: int = 10000
    B: int = 10
    alphas: list = field(default_factory=lambda: [0.1, 0.2])
    K: int = 20
    gamma: float = 0.0
    learner: dict = field(default_factory=lambda: {"kind": "knn", "k": 6})
    evaluator: dict = field(default_factory=lambda: {"kind": "polynomial", "degree": 6})
    grid_folds: int = 5
    targets: list = field(default_factory=lambda: [[4.0], [8.0]])
    trials: int = 20
    seed: int = 0
    workers: int = 1
    # False keeps the top screened candidate without consulting the evaluator
    filter: bool = True

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        check_fields(doc, _EXPERIMENT_FIELDS, (), "experiment config")
        return cls(**doc)

    def validate(self) -> None:
        def positive(name):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")

        for name in ("n_train", "n_test", "m", "B", "K", "trials", "workers", "grid_folds"):
            positive(name)
        fm = make_forward_model(self.forward_model)
        if self.sigma is None:
            d = fm.default_sigma
            self.sigma = list(d) if isinstance(d, tuple) else d
        try:
            self.sigma = (
                [parse_number(v) for v in self.sigma] if isinstance(self.sigma, list)
                else parse_number(self.sigma)
            )
            self.gamma = parse_number(self.gamma)
            self.fixed_values = [parse_number(v) for v in self.fixed_values]
            self.alphas = [parse_number(a) for a in self.alphas]
            self.targets = [
                [parse_number(v) for v in (t if isinstance(t, list) else [t])] for t in self.targets
            ]
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        sig = self.sigma if isinstance(self.sigma, list) else [self.sigma]
        if not sig or any(not (math.isfinite(v) and v >= 0) for v in sig):
            raise ConfigError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0):
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not self.alphas or any(not 0 < a < 1 for a in self.alphas):
            raise ConfigError("alphas must be a non-empty list of values in (0, 1)")
        if not self.targets or not self.fixed_values:
            raise ConfigError("targets and fixed_values must be non-empty")
        if self.B > self.m:
            raise ConfigError(f"B={self.B} exceeds the search-space size m={self.m}")
        if self.K > self.n_train:
            raise ConfigError(f"K={self.K} exceeds n_train={self.n_train}")
        if not isinstance(self.filter, bool):
            raise ConfigError(f"filter must be true or false, got {self.filter!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not 0 <= self.fixed_dim < fm.p:
            raise ConfigError(f"fixed_dim must be in [0, {fm.p}), got {self.fixed_dim}")
        if isinstance(self.sigma, list) and len(self.sigma) != fm.t:
            raise ConfigError(f"sigma list needs {fm.t} entries, one per output")
        if any(len(t) != fm.t for t in self.targets):
            raise ConfigError(f"every target needs {fm.t} entries")
        models.parse_model_config(self.learner, "learner")
        models.parse_model_config(self.evaluator, "evaluator")

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in _EXPERIMENT_FIELDS}


@dataclass
class StatRow:
    method: str
    alpha: float | None
    x1: float
    target_index: int
    output_index: int
    target_value: float
    mean: float
    std: float
    n_solved: int
    n_trials: int


STATS_COLUMNS = ("method", "alpha", "x1", "target_index", "output_index", "target_value",
                 "mean", "std", "n_solved", "n_trials")


@dataclass
class TrialStats:
    rows: list[StatRow]
    metrics: dict = field(default_factory=dict)

    def select(self, method: str, alpha: float | None = None, **kw) -> list[StatRow]:
        out = []
        for r in self.rows:
            if r.method != method or (alpha is not None and r.alpha != alpha):
                continue
            if all(getattr(r, k) == v for k, v in kw.items()):
                out.append(r)
        return out

    def to_csv(self, path) -> None:
        def fmt(v):
            if v is None or (isinstance(v, float) and math.isnan(v)):
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(STATS_COLUMNS)
            for r in self.rows:
                w.writerow([fmt(getattr(r, c)) for c in STATS_COLUMNS])


@dataclass
class ExperimentSetup:
    """Everything fixed across trials: data, fitted learner and calibrated evaluator."""

    fm: ForwardModel
    train: Dataset
    test: Dataset
    learner: object
    calibration: conformal.ConformalCalibration
    metrics: dict


def prepare_experiment(cfg: ExperimentConfig) -> ExperimentSetup:
    fm = make_forward_model(cfg.forward_model)
    train = generate_dataset(fm, cfg.n_train, cfg.sigma, rng_stream(cfg.seed, _TRAIN))
    test = generate_dataset(fm, cfg.n_test, cfg.sigma, rng_stream(cfg.seed, _TEST))
    kind, grid = models.parse_model_config(cfg.learner, "learner")
    learner_spec = models.grid_search(kind, grid, train, cfg.grid_folds, rng_stream(cfg.seed, _LEARNER_CV))
    kind, grid = models.parse_model_config(cfg.evaluator, "evaluator")
    eval_spec = models.grid_search(kind, grid, train, cfg.grid_folds, rng_stream(cfg.seed, _EVAL_CV))
    learner = models.fit(learner_spec, train)
    evaluator = models.fit(eval_spec, train)
    cal = conformal.calibrate(eval_spec, train, cfg.K, cfg.alphas[0], rng_stream(cfg.seed, _FOLDS))
    metrics = {
        "learner": learner_spec.to_dict(),
        "evaluator": eval_spec.to_dict(),
        "learner_test_r2": models.r2_score(learner, test).tolist(),
        "evaluator_test_r2": models.r2_score(evaluator, test).tolist(),
    }
    return ExperimentSetup(fm, train, test, learner, cal, metrics)


def _search_dims(cfg: ExperimentConfig, fm: ForwardModel, fixed_value: float):
    return [
        Fixed(fixed_value) if j == cfg.fixed_dim else Range(*fm.box[j]) for j in range(fm.p)
    ]


def _run_trial(cfg: ExperimentConfig, setup: ExperimentSetup, r: int) -> dict:
    """Ground-truth outputs of every method's chosen solution in trial ``r``."""
    out = {}
    for j, v in enumerate(cfg.fixed_values):
        omega = sample_search_space(_search_dims(cfg, setup.fm, v), cfg.m, rng_stream(cfg.seed, _OMEGA, r, j))
        preds = setup.learner.predict(omega.candidates)
        for ti, target in enumerate(cfg.targets):
            best = solve_single_stage(setup.learner, omega, target, cfg.gamma, predictions=preds)
            out[(SINGLE, None, j, ti)] = setup.fm(best.x)
            for a in cfg.alphas:
                if not cfg.filter:
                    top = screen_top_b(setup.learner, omega, target, cfg.B, predictions=preds)[0]
                    out[(TWO_STAGE, a, j, ti)] = setup.fm(top.x)
                    continue
                report = solve_two_stage(setup.learner, setup.calibration, omega, target, cfg.B,
                                         alpha=a, predictions=preds)
                sol = report.solution
                out[(TWO_STAGE, a, j, ti)] = None if sol is None else setup.fm(sol.x)
    return out


def run_experiment(cfg: ExperimentConfig, setup: ExperimentSetup | None = None) -> TrialStats:
    """Resample the search space per trial and aggregate ground-truth outcomes.

    Data and fitted models stay fixed across trials; only the search space is
    redrawn, from stream ``(seed, trial, fixed-value index)``.
    """
    setup = setup or prepare_experiment(cfg)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(lambda r: _run_trial(cfg, setup, r), range(cfg.trials)))
    else:
        results = [_run_trial(cfg, setup, r) for r in range(cfg.trials)]

    methods = [(SINGLE, None)] + [(TWO_STAGE, a) for a in cfg.alphas]
    rows = []
    for method, a in methods:
        for j, v in enumerate(cfg.fixed_values):
            for ti, target in enumerate(cfg.targets):
                # trial order is fixed, so the reduction is schedule-independent
                solved = [res[(method, a, j, ti)] for res in results if res[(method, a, j, ti)] is not None]
                arr = np.array(solved, dtype=float).reshape(len(solved), -1)
                for oi, tv in enumerate(target):
                    if solved:
                        col = arr[:, oi]
                        mean = math.fsum(col) / col.size
                        std = math.sqrt(math.fsum((col - mean) ** 2) / col.size)
                    else:
                        mean = std = math.nan
                    rows.append(StatRow(method, a, v, ti, oi, tv, mean, std, len(solved), cfg.trials))
    return TrialStats(rows, dict(setup.metrics))


# --------------------------------------------------------------------------
# one-input illustration of the regularized baseline

@dataclass
class CubicDemo:
    data: Dataset
    learner: object
    minimizers: dict
    predicted: dict
    true_output: dict
    intervals: dict
    accepted: dict


def cubic_demo(seed: int, n: int = 30, sigma: float = 0.15, m: int = 1000, target: float = 1.0,
               gammas: Sequence[float] = (0.0, 1.0), alpha: float = 0.1, K: int = 10,
               evaluator_k: int = 4) -> CubicDemo:
    """Degree-2 learner on noisy cubic data, inverted for ``target`` at each gamma.

    A 4-NN evaluator with CV+ intervals audits each regularized solution.
    """
    fm = Cubic()
    data = generate_dataset(fm, n, sigma, rng_stream(seed, 0))
    learner = models.fit(RegressorSpec.polynomial(2), data)
    cal = conformal.calibrate(RegressorSpec.knn(evaluator_k), data, K, alpha, rng_stream(seed, 1))
    omega = sample_search_space([Range(*fm.box[0])], m, rng_stream(seed, 2))
    out = CubicDemo(data, learner, {}, {}, {}, {}, {})
    for g in gammas:
        c = solve_single_stage(learner, omega, [target], g)
        iv = conformal.interval(cal, c.x)
        out.minimizers[g] = float(c.x[0])
        out.predicted[g] = float(c.predicted[0])
        out.true_output[g] = float(fm(c.x)[0])
        out.intervals[g] = (float(iv.lower[0]), float(iv.upper[0]))
        out.accepted[g] = conformal.contains(iv, [target])
    return out

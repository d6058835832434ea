"""Two-stage surrogate modeling for inverse design.

A learner surrogate screens a finite search space for the candidates whose
predicted output best matches a target; an evaluator surrogate with
cross-validation conformal intervals rejects candidates whose interval
excludes the target.
"""

from .conformal import ConformalCalibration, calibrate, contains, interval, intervals
from .core import (
    Dataset,
    Fixed,
    PredictionInterval,
    Range,
    SearchSpace,
    TargetSpec,
    load_dataset_csv,
    sample_search_space,
    train_test_split,
    write_dataset_csv,
)
from .inverse import Candidate, SolveReport, Verdict, screen_top_b, solve_single_stage, solve_two_stage
from .models import RegressorSpec, fit, grid_search, predict, r2_score

__version__ = "0.1.0"

"""Slow, independent reference implementations used as test oracles.

Nothing here calls into the package's numerical code. Ranks use exact
rational arithmetic, neighbours and quantiles use explicit Python sorting.
"""

from __future__ import annotations

import math
from fractions import Fraction


def conformal_rank_lower(n: int, alpha: float) -> int:
    r = math.floor(Fraction(str(alpha)) * (n + 1))
    return min(max(r, 1), n)


def conformal_rank_upper(n: int, alpha: float) -> int:
    r = math.ceil((1 - Fraction(str(alpha))) * (n + 1))
    return min(max(r, 1), n)


def quantile_lower(values, alpha):
    s = sorted(float(v) for v in values)
    return s[conformal_rank_lower(len(s), alpha) - 1]


def quantile_upper(values, alpha):
    s = sorted(float(v) for v in values)
    return s[conformal_rank_upper(len(s), alpha) - 1]


def knn_predict(train_x, train_y, k, x):
    """Mean of the k nearest outputs, summed nearest first; ties go to the lower row."""
    d = []
    for i, row in enumerate(train_x):
        d.append((sum((float(a) - float(b)) ** 2 for a, b in zip(row, x)), i))
    d.sort()
    idx = [i for _, i in d[:k]]
    t = len(train_y[0])
    out = []
    for j in range(t):
        acc = 0.0
        for i in idx:
            acc += float(train_y[i][j])
        out.append(acc / k)
    return out


def knn_fold_fit(train_x, train_y, membership, fold, k):
    rows = [i for i, f in enumerate(membership) if f != fold]
    xs = [list(train_x[i]) for i in rows]
    ys = [list(train_y[i]) for i in rows]
    return lambda x: knn_predict(xs, ys, k, x)


def cv_residuals(predictors, membership, train_x, train_y):
    """h[i][j] = |y_ij - predictors[fold(i)](x_i)_j|."""
    res = []
    for i, x in enumerate(train_x):
        pred = predictors[membership[i]](list(x))
        res.append([abs(float(y) - p) for y, p in zip(train_y[i], pred)])
    return res


def cv_plus_interval(predictors, membership, residuals, x, alpha):
    """Per-output (lower, upper) via explicit enumeration of shifted values."""
    n = len(membership)
    preds = [predictors[membership[i]](list(x)) for i in range(n)]
    t = len(residuals[0])
    lower, upper = [], []
    for j in range(t):
        lower.append(quantile_lower([preds[i][j] - residuals[i][j] for i in range(n)], alpha))
        upper.append(quantile_upper([preds[i][j] + residuals[i][j] for i in range(n)], alpha))
    return lower, upper


def ranked_candidates(predictions, target):
    """Row indices of the search space sorted by (squared misfit, row index)."""
    scored = []
    for i, p in enumerate(predictions):
        scored.append((sum((float(a) - float(b)) ** 2 for a, b in zip(p, target)), i))
    scored.sort()
    return [i for _, i in scored]

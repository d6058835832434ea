"""Command-line front end.

Every subcommand reads a JSON config and writes its results under ``--out``.
Exit status: 0 success, 1 usage or config error, 2 runtime error,
3 no candidate passed the evaluator filter.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, conformal, inverse, models
from .core import (
    ConfigError,
    DataError,
    Fixed,
    Range,
    SearchSpace,
    check_fields,
    ensure_dir,
    load_dataset_csv,
    parse_dim,
    read_matrix_csv,
    rng_stream,
    sample_search_space,
    train_test_split,
    write_dataset_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_NO_SOLUTION = 3

log = logging.getLogger("twostage")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _int(doc, key, default=None, minimum=1, context="config"):
    v = doc.get(key, default)
    if v is None:
        raise ConfigError(f"{context}: missing required field {key!r}")
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{context}: {key!r} must be an integer >= {minimum}, got {v!r}")
    return v


def _seed(doc, override):
    seed = override if override is not None else doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise ConfigError(f"config: seed must be a 64-bit unsigned integer, got {seed!r}")
    return seed


# --------------------------------------------------------------------------
# gen

GEN_FIELDS = ("forward_model", "n", "sigma", "seed", "name")


def cmd_gen(cfg: dict, out: Path, seed=None, base: Path = Path(".")) -> int:
    check_fields(cfg, GEN_FIELDS, ("forward_model", "n"), "gen config")
    n = _int(cfg, "n", context="gen config")
    seed = _seed(cfg, seed)
    fm = bench.make_forward_model(cfg["forward_model"])
    sigma = cfg.get("sigma")
    if sigma is None:
        sigma = list(fm.default_sigma) if isinstance(fm.default_sigma, tuple) else fm.default_sigma
    try:
        ds = bench.generate_dataset(fm, n, sigma, rng_stream(seed))
    except ValueError as exc:
        raise ConfigError(f"gen config: {exc}") from None
    name = cfg.get("name", "dataset")
    ensure_dir(out)
    write_dataset_csv(ds, out / f"{name}.csv")
    _write_json(out / f"{name}.json", {
        "forward_model": fm.describe(), "n": n, "sigma": sigma, "seed": seed,
        "p": ds.p, "t": ds.t,
    })
    log.info("wrote %d samples to %s", n, out / f"{name}.csv")
    return EXIT_OK


# --------------------------------------------------------------------------
# fit

FIT_FIELDS = ("dataset", "model", "folds", "test_dataset", "n_test", "seed", "name")


def cmd_fit(cfg: dict, out: Path, seed=None, base: Path = Path(".")) -> int:
    check_fields(cfg, FIT_FIELDS, ("dataset", "model"), "fit config")
    if "test_dataset" in cfg and "n_test" in cfg:
        raise ConfigError("fit config: give at most one of 'test_dataset' or 'n_test'")
    seed = _seed(cfg, seed)
    kind, grid = models.parse_model_config(cfg["model"], "model")
    folds = _int(cfg, "folds", 5, minimum=2, context="fit config")
    ds = load_dataset_csv(_resolve(base, cfg["dataset"]))
    test = None
    if "test_dataset" in cfg:
        test = load_dataset_csv(_resolve(base, cfg["test_dataset"]))
    elif "n_test" in cfg:
        ds, test = train_test_split(ds, _int(cfg, "n_test", context="fit config"), rng_stream(seed, 1))
    spec = models.grid_search(kind, grid, ds, folds, rng_stream(seed, 0))
    model = models.fit(spec, ds)
    name = cfg.get("name", "model")
    ensure_dir(out)
    models.save_model(model, out / f"{name}.json")
    metrics = {
        "selected": spec.to_dict(),
        "grid": grid,
        "folds": folds,
        "seed": seed,
        "n_train": ds.n,
        "train_r2": models.r2_score(model, ds).tolist(),
        "test_r2": None if test is None else models.r2_score(model, test).tolist(),
    }
    _write_json(out / "metrics.json", metrics)
    log.info("selected %s", spec)
    return EXIT_OK


# --------------------------------------------------------------------------
# solve

SOLVE_FIELDS = ("method", "learner", "evaluator", "calibration", "dataset", "K", "alpha", "B",
                "gamma", "filter", "lazy", "search_space", "target", "seed", "grid_folds")


def _search_space(doc, base: Path, seed: int) -> SearchSpace:
    check_fields(doc, ("dims", "m", "csv"), (), "search_space")
    if "csv" in doc:
        if "dims" in doc or "m" in doc:
            raise ConfigError("search_space: 'csv' excludes 'dims' and 'm'")
        _, cand = read_matrix_csv(_resolve(base, doc["csv"]))
        lo, hi = cand.min(axis=0), cand.max(axis=0)
        dims = [Fixed(a) if a == b else Range(a, b) for a, b in zip(lo, hi)]
        return SearchSpace(dims, cand)
    if "dims" not in doc or "m" not in doc:
        raise ConfigError("search_space: need 'dims' and 'm', or 'csv'")
    try:
        dims = [parse_dim(d) for d in doc["dims"]]
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"search_space: {exc}") from None
    return sample_search_space(dims, _int(doc, "m", context="search_space"), rng_stream(seed, 2))


def _calibration(cfg, base: Path, seed: int):
    if "calibration" in cfg:
        if "evaluator" in cfg:
            raise ConfigError("solve config: give either 'calibration' or 'evaluator', not both")
        cal = conformal.load_calibration(_resolve(base, cfg["calibration"]))
        if "alpha" in cfg:
            cal = cal.with_alpha(cfg["alpha"])
        return cal, False
    if "evaluator" not in cfg or "dataset" not in cfg:
        raise ConfigError("solve config: two-stage solving needs 'calibration', or 'evaluator' plus 'dataset'")
    kind, grid = models.parse_model_config(cfg["evaluator"], "evaluator")
    ds = load_dataset_csv(_resolve(base, cfg["dataset"]))
    folds = _int(cfg, "grid_folds", 5, minimum=2, context="solve config")
    spec = models.grid_search(kind, grid, ds, folds, rng_stream(seed, 0))
    K = _int(cfg, "K", 20, minimum=2, context="solve config")
    return conformal.calibrate(spec, ds, K, cfg.get("alpha", 0.1), rng_stream(seed, 1)), True


def build_report(cfg: dict, base: Path, seed: int):
    """Run the configured solver; returns (report, calibration or None, search space)."""
    method = cfg.get("method", "two_stage")
    if method not in ("two_stage", "single_stage"):
        raise ConfigError(f"solve config: method must be 'two_stage' or 'single_stage', got {method!r}")
    learner = models.load_model(_resolve(base, cfg["learner"]))
    omega = _search_space(cfg["search_space"], base, seed)
    target = cfg["target"] if isinstance(cfg["target"], list) else [cfg["target"]]
    if method == "single_stage":
        gamma = float(cfg.get("gamma", 0.0))
        best = inverse.solve_single_stage(learner, omega, target, gamma)
        config = {"method": method, "gamma": gamma, "learner": learner.spec.to_dict(), "seed": seed}
        return inverse.SolveReport([best], np.asarray(target, dtype=float), 0, config), None, omega
    if "gamma" in cfg:
        raise ConfigError("solve config: 'gamma' only applies to method 'single_stage'")
    B = _int(cfg, "B", 10, context="solve config")
    if not cfg.get("filter", True):
        screened = inverse.screen_top_b(learner, omega, target, B)
        config = {"method": method, "filter": False, "B": B, "learner": learner.spec.to_dict(), "seed": seed}
        return inverse.SolveReport(screened, np.asarray(target, dtype=float), 0, config), None, omega
    cal, fresh = _calibration(cfg, base, seed)
    report = inverse.solve_two_stage(learner, cal, omega, target, B, lazy=cfg.get("lazy", True))
    report.config["seed"] = seed
    report.config["filter"] = True
    return report, (cal if fresh else None), omega


def cmd_solve(cfg: dict, out: Path, seed=None, base: Path = Path("."), show_best_rejected=False) -> int:
    check_fields(cfg, SOLVE_FIELDS, ("learner", "search_space", "target"), "solve config")
    seed = _seed(cfg, seed)
    report, cal, omega = build_report(cfg, base, seed)
    ensure_dir(out)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    omega.to_csv(out / "search_space.csv")
    if cal is not None:
        conformal.save_calibration(cal, out / "calibration.json")
    sol = report.solution
    if sol is not None:
        print(f"solution: x={sol.x.tolist()} predicted={sol.predicted.tolist()} score={sol.score:.6g}")
        return EXIT_OK
    print("no viable solution: every screened candidate's interval excludes the target")
    if show_best_rejected:
        c = report.best_rejected()
        if c is not None:
            print(f"best rejected candidate (NOT a solution): x={c.x.tolist()} "
                  f"predicted={c.predicted.tolist()} interval=[{c.interval.lower.tolist()}, "
                  f"{c.interval.upper.tolist()}]")
    return EXIT_NO_SOLUTION


# --------------------------------------------------------------------------
# experiment

def cmd_experiment(cfg: dict, out: Path, seed=None, base: Path = Path(".")) -> int:
    cfg = dict(cfg)
    if seed is not None:
        cfg["seed"] = seed
    exp = bench.ExperimentConfig.from_dict(cfg)
    stats = bench.run_experiment(exp)
    ensure_dir(out)
    stats.to_csv(out / "stats.csv")
    _write_json(out / "metrics.json", {"config": exp.to_dict(), **stats.metrics})
    log.info("wrote %d rows to %s", len(stats.rows), out / "stats.csv")
    return EXIT_OK


# --------------------------------------------------------------------------
# coverage

COVERAGE_FIELDS = ("dataset", "test_dataset", "n_test", "evaluator", "calibration", "K", "alphas",
                   "seed", "grid_folds")


def cmd_coverage(cfg: dict, out: Path, seed=None, base: Path = Path(".")) -> int:
    check_fields(cfg, COVERAGE_FIELDS, (), "coverage config")
    seed = _seed(cfg, seed)
    if ("test_dataset" in cfg) == ("n_test" in cfg):
        raise ConfigError("coverage config: give exactly one of 'test_dataset' or 'n_test'")
    alphas = cfg.get("alphas", [0.1, 0.2])
    if not isinstance(alphas, list) or not alphas:
        raise ConfigError("coverage config: 'alphas' must be a non-empty list")
    if "calibration" in cfg:
        if "evaluator" in cfg or "n_test" in cfg:
            raise ConfigError("coverage config: a stored calibration needs 'test_dataset' and no 'evaluator'")
        cal = conformal.load_calibration(_resolve(base, cfg["calibration"]))
        test = load_dataset_csv(_resolve(base, cfg["test_dataset"]))
    else:
        if "evaluator" not in cfg or "dataset" not in cfg:
            raise ConfigError("coverage config: need 'calibration', or 'evaluator' plus 'dataset'")
        kind, grid = models.parse_model_config(cfg["evaluator"], "evaluator")
        ds = load_dataset_csv(_resolve(base, cfg["dataset"]))
        if "n_test" in cfg:
            ds, test = train_test_split(ds, _int(cfg, "n_test", context="coverage config"), rng_stream(seed, 3))
        else:
            test = load_dataset_csv(_resolve(base, cfg["test_dataset"]))
        folds = _int(cfg, "grid_folds", 5, minimum=2, context="coverage config")
        spec = models.grid_search(kind, grid, ds, folds, rng_stream(seed, 0))
        K = _int(cfg, "K", 20, minimum=2, context="coverage config")
        cal = conformal.calibrate(spec, ds, K, alphas[0], rng_stream(seed, 1))
    results = [bench.coverage_audit(cal, test, a).to_dict() for a in alphas]
    ensure_dir(out)
    _write_json(out / "coverage.json", {"K": cal.K, "n_calibration": cal.n, "results": results})
    for r in results:
        print(f"alpha={r['alpha']}: coverage={r['coverage']} (floor {r['floor']:.2f}, "
              f"nominal {r['nominal']:.2f}) mean width={r['mean_width']}")
    return EXIT_OK


# --------------------------------------------------------------------------

COMMANDS = {
    "gen": cmd_gen,
    "fit": cmd_fit,
    "solve": cmd_solve,
    "experiment": cmd_experiment,
    "coverage": cmd_coverage,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twostage", description="Two-stage surrogate inverse design.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--verbose", action="store_true")
        if name == "solve":
            p.add_argument("--show-best-rejected", action="store_true",
                           help="print the best rejected candidate when none is accepted")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be a 64-bit unsigned integer")
        try:
            cfg = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        kwargs = {}
        if args.command == "solve":
            kwargs["show_best_rejected"] = args.show_best_rejected
        return COMMANDS[args.command](cfg, args.out, args.seed, args.config.parent, **kwargs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twostage import bench, conformal, models
from twostage.bench import ExperimentConfig, ForwardModelError
from twostage.conformal import ConformalCalibration, FoldAssignment
from twostage.core import ConfigError
from twostage.models import RegressorSpec

PI = math.pi
ECHO = Path(__file__).parent / "fixtures" / "echo_model.py"
angle = st.floats(-10, 10)


# --- analytic functions -----------------------------------------------------------

@pytest.mark.parametrize("x,y", [((PI / 2, 0, 0), 1.0), ((0, PI / 2, 5), 7.0), ((PI / 2, PI / 2, 1), 8.1)])
def test_ishigami1_examples(x, y):
    assert bench.ishigami1(x) == pytest.approx(y, abs=1e-12)


def test_ishigami2_examples():
    np.testing.assert_allclose(bench.ishigami2((PI / 2, PI / 2, 1)), [8.1, 0.805], rtol=0, atol=1e-12)
    np.testing.assert_allclose(bench.ishigami2((0, 0, 7)), [0, 0], rtol=0, atol=1e-12)


@settings(max_examples=100)
@given(angle, angle)
def test_ishigami1_odd_in_x1(x1, x3):
    assert bench.ishigami1((-x1, 0, x3)) == pytest.approx(-bench.ishigami1((x1, 0, x3)), abs=1e-9)


@settings(max_examples=100)
@given(angle, angle, angle)
def test_ishigami1_periodic_in_x2(x1, x2, x3):
    assert bench.ishigami1((x1, x2 + PI, x3)) == pytest.approx(bench.ishigami1((x1, x2, x3)), abs=1e-9)


@settings(max_examples=100)
@given(angle, angle, angle)
def test_ishigami2_first_output(x1, x2, x3):
    assert bench.ishigami2((x1, x2, x3))[0] == bench.ishigami1((x1, x2, x3), 7.0, 0.1)


@settings(max_examples=100)
@given(angle, angle)
def test_ishigami2_second_output_at_zero_x3(x1, x2):
    f1, f2 = bench.ishigami2((x1, x2, 0.0))
    assert f2 == pytest.approx(0.1 * f1, abs=1e-15)


@pytest.mark.parametrize("x,y", [(0.0, 0.0), (1.0, 0.5), (0.5, 0.0)])
def test_cubic(x, y):
    assert bench.cubic(x) == y


def test_forward_model_shapes_and_errors():
    fm = bench.Ishigami2()
    assert fm(np.zeros(3)).shape == (2,)
    assert fm(np.zeros((5, 3))).shape == (5, 2)
    with pytest.raises(ValueError):
        fm(np.zeros(2))
    with pytest.raises(ValueError):
        fm([np.nan, 0, 0])


def test_make_forward_model():
    assert isinstance(bench.make_forward_model("ishigami1"), bench.Ishigami1)
    assert bench.make_forward_model({"name": "ishigami1", "a": 5}).a == 5.0
    assert bench.make_forward_model({"name": "cubic", "low": "-pi"}).box == ((-PI, 1.5),)
    with pytest.raises(ConfigError, match="'a'"):
        bench.make_forward_model({"name": "ishigami2", "a": 1})
    with pytest.raises(ConfigError):
        bench.make_forward_model("rosenbrock")
    with pytest.raises(ConfigError, match="'command'"):
        bench.make_forward_model({"name": "external", "p": 1, "t": 1, "box": [[0, 1]]})


# --- data generation -------------------------------------------------------------

def test_noiseless_dataset_matches_model():
    ds = bench.generate_dataset(bench.Ishigami1(), 500, 0.0, seed=3)
    np.testing.assert_array_equal(ds.outputs[:, 0], bench.ishigami1(ds.inputs))
    assert np.all(np.abs(ds.inputs) <= PI)


def test_unit_noise_std():
    fm = bench.Ishigami2()
    ds = bench.generate_dataset(fm, 10000, 1.0, seed=4)
    std = (ds.outputs - fm(ds.inputs)).std(axis=0)
    assert np.all(np.abs(std - 1.0) <= 0.05)


def test_per_output_sigma():
    fm = bench.Ishigami2()
    ds = bench.generate_dataset(fm, 10000, [0.5, 0.05], seed=4)
    std = (ds.outputs - fm(ds.inputs)).std(axis=0)
    np.testing.assert_allclose(std, [0.5, 0.05], rtol=0.05)


def test_generation_is_seeded():
    a = bench.generate_dataset(bench.Cubic(), 30, 0.15, seed=1)
    b = bench.generate_dataset(bench.Cubic(), 30, 0.15, seed=1)
    np.testing.assert_array_equal(a.outputs, b.outputs)
    assert a.n == 30 and np.all((a.inputs >= -1) & (a.inputs <= 1.5))


@pytest.mark.parametrize("sigma", [-0.1, [0.1, -0.1], [0.1, 0.1, 0.1], np.nan])
def test_generation_rejects_bad_sigma(sigma):
    with pytest.raises(ValueError):
        bench.generate_dataset(bench.Ishigami2(), 10, sigma, seed=0)


# --- external adapter -------------------------------------------------------------

def _echo(p=3):
    return bench.ExternalForwardModel([sys.executable, str(ECHO)], p, p, [(-1, 1)] * p, timeout=60)


def test_external_echo_round_trip():
    x = np.random.default_rng(0).uniform(-1, 1, (25, 3))
    x[0] = [1 / 3, -0.1, 2.0**-40]
    np.testing.assert_array_equal(_echo()(x), x)


def test_external_via_config():
    fm = bench.make_forward_model({"name": "external", "command": [sys.executable, str(ECHO)],
                                   "p": 2, "t": 2, "box": [[0, 1], ["-pi", "pi"]]})
    ds = bench.generate_dataset(fm, 12, 0.0, seed=0)
    np.testing.assert_array_equal(ds.inputs, ds.outputs)


def test_external_nonzero_exit(monkeypatch):
    monkeypatch.setenv("ECHO_MODEL_FAIL", "1")
    with pytest.raises(ForwardModelError, match="status 3"):
        _echo()(np.zeros((2, 3)))


def test_external_missing_output(monkeypatch):
    monkeypatch.setenv("ECHO_MODEL_SKIP", "1")
    with pytest.raises(ForwardModelError, match="did not write"):
        _echo()(np.zeros((2, 3)))


def test_external_wrong_output_width():
    fm = bench.ExternalForwardModel([sys.executable, str(ECHO)], 2, 1, [(0, 1)] * 2)
    with pytest.raises(ForwardModelError):
        fm(np.zeros((2, 2)))


def test_external_output_path_convention():
    assert bench.ExternalForwardModel.output_path("/a/b/candidates.csv") == Path("/a/b/candidates_outputs.csv")


# --- coverage ----------------------------------------------------------------------

def test_zero_residual_coverage_is_one():
    ds = bench.generate_dataset(bench.Ishigami1(), 50, 0.25, seed=0)
    full = models.fit(RegressorSpec.knn(1), ds)
    cal = ConformalCalibration(FoldAssignment.random(50, 5, 0), (full,) * 5, np.zeros((50, 1)), 0.1)
    res = bench.coverage_audit(cal, ds)
    assert res.coverage.tolist() == [1.0]
    assert res.mean_width.tolist() == [0.0]


def test_coverage_monotone_in_alpha():
    fm = bench.Ishigami1()
    train = bench.generate_dataset(fm, 400, 0.25, seed=1)
    test = bench.generate_dataset(fm, 400, 0.25, seed=2)
    cal = conformal.calibrate(RegressorSpec.knn(6), train, 10, 0.1, seed=3)
    wide, narrow = bench.coverage_audit(cal, test, 0.1), bench.coverage_audit(cal, test, 0.5)
    assert wide.coverage[0] >= narrow.coverage[0]
    assert wide.mean_width[0] > narrow.mean_width[0]
    assert wide.to_dict()["floor"] == pytest.approx(0.8)


def test_coverage_dimension_check():
    cal = conformal.calibrate(RegressorSpec.knn(1), bench.generate_dataset(bench.Ishigami1(), 20, 0.1, seed=0),
                              2, 0.1, seed=0)
    with pytest.raises(ValueError):
        bench.coverage_audit(cal, bench.generate_dataset(bench.Ishigami2(), 20, 0.1, seed=0))


# --- experiments ---------------------------------------------------------------------

def _small(**kw):
    base = dict(n_train=300, n_test=100, m=500, B=5, K=5, trials=3, evaluator={"kind": "polynomial", "degree": 4})
    base.update(kw)
    return ExperimentConfig(**base)


def test_experiment_table_structure():
    stats = bench.run_experiment(_small())
    assert len(stats.rows) == 3 * 4 * 2
    assert {(r.method, r.alpha) for r in stats.rows} == {("single_stage", None), ("two_stage", 0.1), ("two_stage", 0.2)}
    for r in stats.rows:
        assert r.std >= 0 or math.isnan(r.std)
        assert 0 <= r.n_solved <= r.n_trials == 3
    single = stats.select("single_stage")
    assert all(r.n_solved == 3 for r in single)
    assert set(stats.metrics) >= {"learner", "evaluator", "learner_test_r2", "evaluator_test_r2"}


def test_single_trial_std_is_zero():
    stats = bench.run_experiment(_small(trials=1))
    assert all(r.std == 0.0 for r in stats.rows if r.n_solved)


def test_unfiltered_b1_matches_single_stage():
    stats = bench.run_experiment(_small(trials=1, B=1, filter=False))
    for r in stats.select("two_stage"):
        s = stats.select("single_stage", x1=r.x1, target_index=r.target_index, output_index=r.output_index)[0]
        assert (r.mean, r.std, r.n_solved) == (s.mean, s.std, s.n_solved)


def test_exact_recovery():
    cfg = ExperimentConfig(forward_model="cubic", sigma=0.0, n_train=40, n_test=10, fixed_values=[1.0],
                           m=50, B=5, K=4, targets=[[0.5]], trials=3,
                           learner={"kind": "polynomial", "degree": 3},
                           evaluator={"kind": "polynomial", "degree": 3})
    stats = bench.run_experiment(cfg)
    assert stats.metrics["learner_test_r2"][0] == pytest.approx(1.0, abs=1e-12)
    single = stats.select("single_stage")[0]
    assert (single.mean, single.std, single.n_solved) == (0.5, 0.0, 3)
    for r in stats.select("two_stage"):
        assert r.n_solved == 0 or (r.mean, r.std) == (0.5, 0.0)


def test_experiment_deterministic_across_workers(tmp_path):
    a = bench.run_experiment(_small(workers=1))
    b = bench.run_experiment(_small(workers=3))
    a.to_csv(tmp_path / "a.csv")
    b.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_two_output_experiment_rows():
    cfg = _small(forward_model="ishigami2", targets=[[2, 0.2], [8, 0.65]], trials=2)
    assert cfg.sigma == [0.25, 0.025]
    stats = bench.run_experiment(cfg)
    assert {r.target_index for r in stats.rows} == {0, 1}
    assert {r.output_index for r in stats.rows} == {0, 1}


def test_stats_csv_format(tmp_path):
    stats = bench.run_experiment(_small(trials=1))
    stats.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(bench.STATS_COLUMNS)
    first = lines[1].split(",")
    assert first[0] == "single_stage" and first[1] == ""


@pytest.mark.parametrize("bad,field", [
    ({"sigmaa": 0.1}, "sigmaa"),
    ({"trials": 0}, "trials"),
    ({"alphas": [1.5]}, "alphas"),
    ({"B": 20000}, "B"),
    ({"sigma": -1}, "sigma"),
    ({"targets": [[1, 2]]}, "target"),
    ({"learner": {"kind": "knn", "k": 6, "p": 2}}, "'p'"),
])
def test_config_validation(bad, field):
    with pytest.raises(ConfigError, match=field):
        ExperimentConfig.from_dict(bad)


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict({"fixed_values": ["0.1pi", "0.2pi"], "trials": 2})
    assert cfg.fixed_values == [0.1 * PI, 0.2 * PI]
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


# --- cubic illustration -----------------------------------------------------------------

def test_cubic_demo_fields():
    demo = bench.cubic_demo(0)
    assert set(demo.minimizers) == {0.0, 1.0}
    assert demo.data.n == 30
    for g in (0.0, 1.0):
        lo, hi = demo.intervals[g]
        assert lo <= hi
        assert demo.true_output[g] == bench.cubic(demo.minimizers[g])

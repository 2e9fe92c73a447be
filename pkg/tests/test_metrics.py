import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsdiff.src.data import RATIO_SCHEME, TimeSeriesDataset, split_dataset, synth_quadratic
from nsdiff.src.errors import ConfigurationError, ShapeError
from nsdiff.src.metrics import (EvalReport, crps, evaluate_ensemble, interval_coverage, pearson, plot_frame,
                                point_metrics, qice, uncertainty_variation)


def crps_by_integration(samples, x):
    """∫ (F(y) − 1{y ≥ x})² dy for the empirical CDF, exact on its breakpoints."""
    samples = np.sort(np.asarray(samples, dtype=np.float64))
    points = np.sort(np.append(samples, x))
    total = 0.0
    for left, right in zip(points[:-1], points[1:]):
        F = np.searchsorted(samples, left, side="right") / samples.size
        H = 1.0 if left >= x else 0.0
        total += (F - H) ** 2 * (right - left)
    return total


########
# CRPS #
########

def test_point_mass_is_absolute_error():
    assert crps(np.full(7, 2.0), 5.5) == pytest.approx(3.5)


@pytest.mark.parametrize("x", [0.0, 0.5, 1.0])
def test_two_point_ensemble(x):
    assert crps(np.array([0.0, 1.0]), x) == pytest.approx(0.25)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=40), st.floats(-150, 150))
def test_crps_matches_integrated_form(samples, x):
    assert crps(np.array(samples), x) == pytest.approx(crps_by_integration(samples, x), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-1e3, 1e3))
def test_crps_is_non_negative(samples, x):
    assert crps(np.array(samples), x) >= -1e-9


def test_crps_per_cell_and_errors():
    samples = np.random.default_rng(0).normal(size=(50, 3, 2))
    obs = np.zeros((3, 2))
    per_cell = crps(samples, obs)
    assert per_cell.shape == (3, 2)
    assert per_cell[1, 1] == pytest.approx(crps(samples[:, 1, 1], 0.0))
    with pytest.raises(ConfigurationError):
        crps(np.empty(0), 1.0)
    with pytest.raises(ShapeError):
        crps(samples, np.zeros(3))


########
# QICE #
########

def test_all_observations_in_one_interval():
    samples = np.tile(np.arange(100.0)[:, None], (1, 25))
    assert qice(samples, np.full(25, -1.0)) == pytest.approx(0.18)
    np.testing.assert_allclose(interval_coverage(samples, np.full(25, 1e6)), [0] * 9 + [1])


def test_calibrated_ensemble_has_small_qice():
    rng = np.random.default_rng(1)
    samples = rng.standard_normal((1000, 2000))
    observations = rng.standard_normal(2000)
    assert qice(samples, observations) < 0.02
    assert interval_coverage(samples, observations).sum() == pytest.approx(1.0)


def test_qice_needs_enough_samples():
    with pytest.raises(ConfigurationError, match="at least 10"):
        qice(np.zeros((5, 3)), np.zeros(3))


def test_qice_invariant_under_increasing_transform():
    rng = np.random.default_rng(2)
    samples = rng.integers(-20, 20, size=(40, 300)).astype(np.float64)
    observations = rng.integers(-25, 25, size=300).astype(np.float64)
    plain = qice(samples, observations, method="lower")
    assert qice(np.exp(samples / 4), np.exp(observations / 4), method="lower") == plain
    assert qice(3 * samples + 1, 3 * observations + 1, method="lower") == plain


#########################
# Point and data scores #
#########################

def test_point_metrics():
    mae, mse = point_metrics(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 6.0]))
    assert mae == pytest.approx(5 / 3)
    assert mse == pytest.approx(13 / 3)


def test_uncertainty_variation():
    noise = TimeSeriesDataset(np.random.default_rng(3).standard_normal((5000, 2)), ("a", "b"))
    assert 0.8 < uncertainty_variation(split_dataset(noise, RATIO_SCHEME)) < 1.25
    assert uncertainty_variation(split_dataset(synth_quadratic(7588, seed=1), RATIO_SCHEME)) > 5


def test_pearson():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert pearson(x, -x) == pytest.approx(-1.0)


###########
# Reports #
###########

@pytest.fixture
def ensemble():
    rng = np.random.default_rng(4)
    return rng.normal(size=(20, 6, 4, 2)), rng.normal(size=(6, 4, 2))


def test_evaluate_ensemble(ensemble, tmp_path):
    samples, observations = ensemble
    report = evaluate_ensemble(samples, observations, ("x", "y"))
    assert report.n_windows == 6 and report.n_samples == 20
    assert [f.feature for f in report.per_feature] == ["x", "y"]
    assert report.crps == pytest.approx(np.mean(crps(samples, observations)))
    assert report.qice_percent == pytest.approx(100 * report.qice)

    payload = json.loads(report.to_json(tmp_path / "report.json").read_text())
    assert payload["qice_percent"] == pytest.approx(report.qice_percent)
    assert payload["per_feature"][1]["feature"] == "y"
    assert payload["variance_tracking_r"] is None


def test_evaluate_ensemble_shape_checks(ensemble):
    samples, observations = ensemble
    with pytest.raises(ShapeError):
        evaluate_ensemble(samples[..., :1], observations, ("x", "y"))
    with pytest.raises(ConfigurationError):
        evaluate_ensemble(samples[:1], observations, ("x", "y"))


def test_summary_rows_append_under_one_header(tmp_path):
    path = tmp_path / "summary.csv"
    for seed in (1, 2):
        report = EvalReport(crps=0.1 * seed, qice=0.01, mae=0.2, mse=0.3, tags={"seed": str(seed)})
        report.to_csv_row(path, append=True)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[0].startswith("seed,crps,qice,qice_percent")
    assert pd.read_csv(path)["crps"].tolist() == pytest.approx([0.1, 0.2])


def test_plot_frame(ensemble):
    samples, observations = ensemble
    prior_mean, prior_variance = np.zeros((6, 4, 2)), np.full((6, 4, 2), 4.0)
    frame = plot_frame(samples, observations, ("x", "y"), prior_mean, prior_variance)
    assert len(frame) == 6 * 4 * 2
    assert list(frame.columns) == ["window", "step", "feature", "observation", "mean", "q025", "q975", "std",
                                   "prior_mean", "prior_std"]
    row = frame.iloc[2 * 4 * 2 + 3 * 2 + 1]
    assert (row["window"], row["step"], row["feature"]) == (2, 3, "y")
    assert row["observation"] == observations[2, 3, 1]
    assert np.all(frame["q025"] <= frame["q975"])
    assert np.all(frame["prior_std"] == 2.0)

"""Desk-scale experiments. Run with `pytest -m slow`."""
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from nsdiff.src.data import load_csv, synth_linear, take_rows
from nsdiff.src.diffusion import VariantMode
from nsdiff.src.pipeline import (TrainConfig, evaluate_model, load_checkpoint, prepare_data, pretrain_prior,
                                 sample_forecast, save_checkpoint, train_nsdiff)
from nsdiff.src.schedule import schedule_from_betas

pytestmark = pytest.mark.slow

ETTH1 = Path(__file__).resolve().parents[1] / "data" / "ETTh1.csv"


@pytest.fixture(scope="module")
def synthetic_runs():
    """Full model and the unit-endpoint ablation per seed, sharing each seed's pretrained prior."""
    results = {}
    for seed in (1, 2, 3):
        config = TrainConfig(seed=seed, eval_stride=4)
        prepared = prepare_data(synth_linear(7588, seed=1), config)
        prior = pretrain_prior(config, prepared.train, prepared.val)
        for variant in (VariantMode.FULL, VariantMode.NO_LSNM):
            variant_config = replace(config, variant=variant.value)
            model = train_nsdiff(variant_config, prepared.train, prepared.val, *prior, scaler=prepared.scaler,
                                 feature_names=prepared.raw.feature_names)
            report, *_ = evaluate_model(model, prepared, synth_kind="linear")
            results[seed, variant] = report
    return results


def test_full_model_is_calibrated_and_beats_unit_endpoint(synthetic_runs):
    full = [synthetic_runs[seed, VariantMode.FULL] for seed in (1, 2, 3)]
    ablation = [synthetic_runs[seed, VariantMode.NO_LSNM] for seed in (1, 2, 3)]
    assert all(r.qice_percent <= 2.5 for r in full)
    assert sum(f.qice < a.qice for f, a in zip(full, ablation)) >= 2


def test_ensemble_spread_tracks_generator_std(synthetic_runs):
    r = [synthetic_runs[seed, VariantMode.FULL].variance_tracking_r for seed in (1, 2, 3)]
    assert sum(value > 0.8 for value in r) >= 2


@pytest.mark.skipif(not ETTH1.is_file(), reason="data/ETTh1.csv not present")
def test_etth1_smoke_run(tmp_path):
    config = TrainConfig(M=192, epochs=1, pretrain_epochs=1, samples=20, eval_stride=24)
    prepared = prepare_data(take_rows(load_csv(ETTH1), 4000), config)
    model = train_nsdiff(config, prepared.train, prepared.val, *pretrain_prior(config, prepared.train, prepared.val),
                         scaler=prepared.scaler, feature_names=prepared.raw.feature_names)
    report, *_ = evaluate_model(model, prepared)
    assert np.isfinite(report.crps) and np.isfinite(report.qice)

    path = save_checkpoint(tmp_path / "etth1.nsdf", model)
    reloaded = load_checkpoint(path)
    x = prepared.test.x[:2]
    assert np.array_equal(sample_forecast(model, x, S=5, seed=9, standardized=True).samples,
                          sample_forecast(reloaded, x, S=5, seed=9, standardized=True).samples)
    assert save_checkpoint(tmp_path / "again.nsdf", reloaded).read_bytes() == path.read_bytes()


def test_random_schedules_match_direct_summation():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        betas = rng.uniform(1e-4, 0.5, size=rng.integers(1, 101))
        s = schedule_from_betas(betas)
        alpha = 1.0 - betas
        tilde, hat = np.zeros(s.T + 1), np.zeros(s.T + 1)
        for t in range(1, s.T + 1):
            prods = np.array([np.prod(alpha[k - 1:t]) for k in range(1, t + 1)])
            tilde[t] = prods.sum()
            hat[t] = (alpha[:t] * prods).sum()
        np.testing.assert_allclose(s.alpha_tilde, tilde, rtol=0, atol=1e-10)
        np.testing.assert_allclose(s.alpha_hat, hat, rtol=0, atol=1e-10)
        np.testing.assert_allclose(s.beta_gap, s.beta_bar - s.beta_tilde, rtol=0, atol=1e-10)
        assert s.beta_gap[1] >= betas[0] ** 2

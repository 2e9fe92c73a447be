from pathlib import Path

import numpy as np
import pytest

from nsdiff.src.data import synth_linear
from nsdiff.src.estimators import EndpointPrior
from nsdiff.src.pipeline import TrainConfig, prepare_data, pretrain_prior, train_nsdiff
from nsdiff.src.schedule import build_linear_schedule, schedule_from_betas

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

# Overrides that shrink every network and window so a CLI run takes seconds.
TINY_OVERRIDES = [
    "dataset.synth.length=400",
    "dataset.N=12",
    "dataset.M=4",
    "dataset.variance_window=6",
    "model.T=5",
    "model.mean_hidden=16",
    "model.mean_layers=2",
    "model.variance_hidden=16",
    "model.variance_layers=2",
    "model.denoiser_hidden=16",
    "model.denoiser_layers=2",
    "model.embed_width=8",
    "train.epochs=1",
    "train.pretrain_epochs=1",
    "train.samples=20",
    "train.sample_chunk=16",
]


@pytest.fixture
def default_schedule():
    return build_linear_schedule(20, 1e-4, 0.02)


@pytest.fixture
def toy_schedule():
    return schedule_from_betas([0.1, 0.2, 0.3, 0.4, 0.5])


@pytest.fixture(scope="session")
def tiny_config():
    return TrainConfig(
        T=5, N=12, M=4, variance_window=6,
        epochs=2, pretrain_epochs=2, batch_size=16, seed=7,
        mean_hidden=16, mean_layers=2,
        variance_hidden=16, variance_layers=2,
        denoiser_hidden=16, denoiser_layers=2, embed_width=8,
        samples=20, sample_chunk=8,
    )


@pytest.fixture(scope="session")
def tiny_prepared(tiny_config):
    return prepare_data(synth_linear(400, seed=3), tiny_config)


@pytest.fixture(scope="session")
def tiny_prior(tiny_config, tiny_prepared):
    return pretrain_prior(tiny_config, tiny_prepared.train, tiny_prepared.val)


@pytest.fixture(scope="session")
def tiny_model(tiny_config, tiny_prepared, tiny_prior):
    mean_model, variance_model = tiny_prior
    return train_nsdiff(tiny_config, tiny_prepared.train, tiny_prepared.val, mean_model, variance_model,
                        scaler=tiny_prepared.scaler, feature_names=tiny_prepared.raw.feature_names)


def scalar_prior(mean: float, variance: float) -> EndpointPrior:
    return EndpointPrior(mean=np.array(mean, dtype=np.float64), variance=np.array(variance, dtype=np.float64))


def write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path

"""Probabilistic and point forecast evaluation."""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .data import TimeSeriesDataset
from .errors import ConfigurationError, ShapeError

log = logging.getLogger(__name__)

QICE_BINS = 10


def crps(samples, observation):
    """
    Sample-based CRPS of the empirical predictive CDF.

    mean|X_i − x| − (1 / 2S²) ΣΣ|X_i − X_j|, with the double sum evaluated
    in O(S log S) from the sorted samples.

    Args:
        samples: S values along the first axis; further axes are cells
        observation: scalar or array matching the cell axes
    Returns:
        float for a single cell, otherwise the per-cell array
    """
    samples = np.asarray(samples, dtype=np.float64)
    observation = np.asarray(observation, dtype=np.float64)
    if samples.ndim == 0 or samples.shape[0] == 0:
        raise ConfigurationError("CRPS needs at least one sample")
    if samples.shape[1:] != observation.shape:
        raise ShapeError(f"samples cells {samples.shape[1:]} != observation shape {observation.shape}")
    S = samples.shape[0]
    spread_to_obs = np.mean(np.abs(samples - observation), axis=0)
    ordered = np.sort(samples, axis=0, kind="stable")
    weights = (2.0 * np.arange(1, S + 1) - S - 1).reshape((S,) + (1,) * (samples.ndim - 1))
    spread = np.sum(weights * ordered, axis=0) / (S * S)
    value = spread_to_obs - spread
    return float(value) if value.ndim == 0 else value


def quantile_boundaries(samples: np.ndarray, n_bins: int = QICE_BINS, method: str = "linear") -> np.ndarray:
    """Equal-probability interval boundaries per cell, shape (n_bins + 1, ...)."""
    levels = np.linspace(0.0, 1.0, n_bins + 1)
    return np.quantile(samples, levels, axis=0, method=method)


def interval_coverage(samples, observations, n_bins: int = QICE_BINS, method: str = "linear") -> np.ndarray:
    """
    Fraction of observations falling in each of the n_bins quantile intervals.

    Observations below the lowest boundary count toward the first interval and
    above the highest toward the last, so the fractions sum to one.
    """
    samples = np.asarray(samples, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64)
    if samples.shape[0] < n_bins:
        raise ConfigurationError(f"QICE with {n_bins} bins needs at least {n_bins} samples per cell, got {samples.shape[0]}")
    if samples.shape[1:] != observations.shape:
        raise ShapeError(f"samples cells {samples.shape[1:]} != observations shape {observations.shape}")
    bounds = quantile_boundaries(samples, n_bins, method)
    interior = bounds[1:-1]
    bins = np.sum(observations[None, ...] >= interior, axis=0).reshape(-1)
    return np.bincount(bins, minlength=n_bins) / bins.size


def qice(samples, observations, n_bins: int = QICE_BINS, method: str = "linear") -> float:
    """Mean absolute deviation of per-interval coverage from 1 / n_bins."""
    coverage = interval_coverage(samples, observations, n_bins, method)
    return float(np.mean(np.abs(coverage - 1.0 / n_bins)))


def point_metrics(mean, observations):
    diff = np.asarray(mean, dtype=np.float64) - np.asarray(observations, dtype=np.float64)
    return float(np.mean(np.abs(diff))), float(np.mean(diff * diff))


def uncertainty_variation(ds: TimeSeriesDataset) -> float:
    """Largest per-feature ratio of test-split variance to train-split variance."""
    train = ds.split("train").var(axis=0)
    test = ds.split("test").var(axis=0)
    return float(np.max(test / np.maximum(train, 1e-12)))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(np.corrcoef(a, b)[0, 1])


@dataclass
class FeatureScores:
    feature: str
    crps: float
    qice: float
    mae: float
    mse: float


@dataclass
class EvalReport:
    crps: float
    qice: float
    mae: float
    mse: float
    per_feature: List[FeatureScores] = field(default_factory=list)
    n_windows: int = 0
    n_samples: int = 0
    uncertainty_variation: Optional[float] = None
    variance_tracking_r: Optional[float] = None
    tags: Dict[str, str] = field(default_factory=dict)

    @property
    def qice_percent(self) -> float:
        return 100.0 * self.qice

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload["qice_percent"] = self.qice_percent
        return payload

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def row(self) -> Dict:
        """Flat record for table assembly."""
        record = dict(self.tags)
        record.update(crps=self.crps, qice=self.qice, qice_percent=self.qice_percent, mae=self.mae, mse=self.mse,
                      n_windows=self.n_windows, n_samples=self.n_samples,
                      uncertainty_variation=self.uncertainty_variation,
                      variance_tracking_r=self.variance_tracking_r)
        return record

    def to_csv_row(self, path, append: bool = False) -> Path:
        path = Path(path)
        frame = pd.DataFrame([self.row()])
        write_header = not (append and path.exists())
        frame.to_csv(path, mode="a" if append else "w", header=write_header, index=False, lineterminator="\n")
        return path


def evaluate_ensemble(samples: np.ndarray, observations: np.ndarray,
                      feature_names: Sequence[str], n_bins: int = QICE_BINS) -> EvalReport:
    """
    Score an S×W×M×D ensemble against W×M×D observations, both in data units.

    Every metric is a uniform average over all (window, step, feature) cells.
    """
    if samples.ndim != 4 or samples.shape[1:] != observations.shape:
        raise ShapeError(f"expected S×W×M×D samples matching observations, got {samples.shape} vs {observations.shape}")
    if samples.shape[0] < 2:
        raise ConfigurationError("distributional metrics need at least 2 samples")
    mean = samples.mean(axis=0)
    mae, mse = point_metrics(mean, observations)
    per_feature = []
    for d, name in enumerate(feature_names):
        f_mae, f_mse = point_metrics(mean[..., d], observations[..., d])
        per_feature.append(FeatureScores(
            feature=str(name),
            crps=float(np.mean(crps(samples[..., d], observations[..., d]))),
            qice=qice(samples[..., d], observations[..., d], n_bins),
            mae=f_mae,
            mse=f_mse,
        ))
    report = EvalReport(
        crps=float(np.mean(crps(samples, observations))),
        qice=qice(samples, observations, n_bins),
        mae=mae,
        mse=mse,
        per_feature=per_feature,
        n_windows=int(samples.shape[1]),
        n_samples=int(samples.shape[0]),
    )
    log.info(f"CRPS {report.crps:.4f} QICE {report.qice:.4f} MAE {report.mae:.4f} MSE {report.mse:.4f}")
    return report


def plot_frame(samples: np.ndarray, observations: np.ndarray, feature_names: Sequence[str],
               prior_mean: Optional[np.ndarray] = None, prior_variance: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Long-format rows (window, step, feature) with the 95% interval band."""
    W, M, D = observations.shape
    window, step, feature = np.meshgrid(np.arange(W), np.arange(M), np.arange(D), indexing="ij")
    q = np.quantile(samples, [0.025, 0.975], axis=0)
    frame = pd.DataFrame({
        "window": window.reshape(-1),
        "step": step.reshape(-1),
        "feature": np.asarray(feature_names, dtype=object)[feature.reshape(-1)],
        "observation": observations.reshape(-1),
        "mean": samples.mean(axis=0).reshape(-1),
        "q025": q[0].reshape(-1),
        "q975": q[1].reshape(-1),
        "std": samples.std(axis=0).reshape(-1),
    })
    if prior_mean is not None:
        frame["prior_mean"] = prior_mean.reshape(-1)
    if prior_variance is not None:
        frame["prior_std"] = np.sqrt(prior_variance).reshape(-1)
    return frame

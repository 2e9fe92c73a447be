"""Dataset ingestion, splitting, window extraction and synthetic data."""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataFormatError, InsufficientDataError, ShapeError
from . import rng

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
STD_VARIANCE_FLOOR = 1e-8

RATIO_SCHEME = "ratio-7:1:2"
MONTHS_SCHEME = "ett-months-12/4/4"
SPLITS = ("train", "val", "test")

LINEAR = "linear"
QUADRATIC = "quadratic"


@dataclass(frozen=True)
class TimeSeriesDataset:
    values: np.ndarray
    feature_names: Tuple[str, ...]
    split_bounds: Optional[Tuple[int, int]] = None

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def split(self, name: str, borrow_history: int = 0) -> np.ndarray:
        """
        Rows of one split.

        Args:
            name: 'train', 'val' or 'test'
            borrow_history: number of rows taken from the end of the preceding
                split, so that the first window of a split can still see a full
                history. Ignored for the train split.
        Returns:
            Array view of the split rows
        """
        if self.split_bounds is None:
            raise ConfigurationError("dataset has no split bounds; call split_dataset first")
        train_end, val_end = self.split_bounds
        if name == "train":
            return self.values[:train_end]
        if name == "val":
            return self.values[max(train_end - borrow_history, 0):val_end]
        if name == "test":
            return self.values[max(val_end - borrow_history, 0):]
        raise ConfigurationError(f"unknown split '{name}', expected one of {SPLITS}")


@dataclass(frozen=True)
class WindowPair:
    x: np.ndarray
    y0: np.ndarray
    sigma_y0: np.ndarray


@dataclass(frozen=True)
class WindowSet(Sequence):
    """Batched windows: x is W×N×D, y0 and sigma_y0 are W×M×D."""
    x: np.ndarray
    y0: np.ndarray
    sigma_y0: np.ndarray
    starts: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, index):
        if isinstance(index, slice) or isinstance(index, np.ndarray):
            return WindowSet(self.x[index], self.y0[index], self.sigma_y0[index],
                             None if self.starts is None else self.starts[index])
        return WindowPair(self.x[index], self.y0[index], self.sigma_y0[index])

    def take(self, index: np.ndarray) -> "WindowSet":
        return self[np.asarray(index)]


def load_csv(path, has_date_column: bool = True) -> TimeSeriesDataset:
    """
    Load a chronological CSV with one header row.

    Args:
        path: CSV file path
        has_date_column: drop the leading column (dates) when set
    Returns:
        TimeSeriesDataset without split bounds
    """
    path = Path(path)
    if not path.is_file():
        raise DataFormatError(f"file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(f"{path}: no header row") from e
    except pd.errors.ParserError as e:
        raise DataFormatError(f"{path}: ragged rows ({e})") from e

    if has_date_column:
        frame = frame.iloc[:, 1:]
    if frame.shape[1] == 0:
        raise DataFormatError(f"{path}: no feature columns")
    if frame.shape[0] == 0:
        raise DataFormatError(f"{path}: empty dataset (header only)")

    # keep_default_na=False leaves NaN only where a row ran out of fields
    missing = frame.isna().to_numpy()
    if missing.any():
        row = int(np.argwhere(missing)[0][0])
        raise DataFormatError(f"{path}: ragged rows (row {row + 2} has too few fields)")

    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy() | ~np.isfinite(numeric.to_numpy(dtype=np.float64))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        # +2: one for the header, one for 1-based numbering
        raise DataFormatError(
            f"{path}: non-numeric cell at row {row + 2}, column '{frame.columns[col]}': "
            f"{frame.iat[row, col]!r}"
        )
    # to_numeric is not correctly rounded; astype parses each cell exactly
    values = frame.astype(np.float64).to_numpy()
    log.info(f"Loaded {path}: L={values.shape[0]}, D={values.shape[1]}")
    return TimeSeriesDataset(values=values, feature_names=tuple(str(c) for c in frame.columns))


def write_csv(ds: TimeSeriesDataset, path) -> Path:
    """Write a dataset in the ingestion format (no date column)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(ds.values, columns=list(ds.feature_names))
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def split_dataset(ds: TimeSeriesDataset, scheme: str = RATIO_SCHEME,
                  steps_per_month: int = 720, min_split: int = 1) -> TimeSeriesDataset:
    """Chronological train/val/test bounds; leftover rows go to the test split."""
    L = ds.length
    if scheme == RATIO_SCHEME:
        train_end = int(np.floor(0.7 * L))
        val_end = int(np.floor(0.8 * L))
    elif scheme == MONTHS_SCHEME:
        train_end = 12 * steps_per_month
        val_end = 16 * steps_per_month
    else:
        raise ConfigurationError(f"unknown split scheme '{scheme}'")

    sizes = (train_end, val_end - train_end, L - val_end)
    if min(sizes) < max(min_split, 1):
        raise InsufficientDataError(
            f"dataset of length {L} too short for scheme '{scheme}': "
            f"split sizes {sizes}, need at least {max(min_split, 1)} each"
        )
    return replace(ds, split_bounds=(train_end, val_end))


def sliding_window_variance(x: np.ndarray, y0: np.ndarray, window: int) -> np.ndarray:
    """
    Ground-truth variance field of the target window.

    History and target are joined along time; each target step gets the
    population variance of the trailing `window` points ending at it. When
    the joined series is too short for a full trailing window, the variance
    is taken over every point available up to that step.

    Args:
        x: N×D history
        y0: M×D target
        window: trailing window size (>= 2)
    Returns:
        M×D variance field, unfloored
    """
    if window < 2:
        raise ConfigurationError(f"variance window must be >= 2, got {window}")
    if x.ndim != 2 or y0.ndim != 2 or x.shape[1] != y0.shape[1]:
        raise ShapeError(f"incompatible shapes x{x.shape}, y0{y0.shape}")
    N, M = x.shape[0], y0.shape[0]
    if N + M < window:
        raise InsufficientDataError(f"variance window {window} larger than N+M={N + M}")

    joined = np.concatenate([x, y0], axis=0)
    out = np.empty_like(y0, dtype=np.float64)
    for m in range(M):
        end = N + m + 1
        out[m] = joined[max(end - window, 0):end].var(axis=0)
    return out


def _rolling_variance(series: np.ndarray, window: int) -> np.ndarray:
    """Population variance of every full trailing window; row p ends at index p + window - 1."""
    views = sliding_window_view(series, window, axis=0)
    return views.var(axis=-1)


def make_windows(ds: TimeSeriesDataset, split: str, N: int, M: int,
                 variance_window: int = 96, stride: int = 1,
                 borrow_history: bool = False) -> WindowSet:
    """
    Dense supervised windows over one split.

    Args:
        ds: dataset with split bounds
        split: 'train', 'val' or 'test'
        N: history length
        M: horizon
        variance_window: size of the trailing window for the variance field
        stride: step between window starts
        borrow_history: let val/test windows take history from the preceding split
    Returns:
        WindowSet with floored variance targets
    """
    if N < 1 or M < 1 or stride < 1:
        raise ConfigurationError(f"N, M and stride must be positive, got N={N}, M={M}, stride={stride}")
    series = ds.split(split, borrow_history=N if borrow_history else 0)
    length = series.shape[0]
    if length < N + M:
        raise InsufficientDataError(f"horizon N+M={N + M} exceeds {split} split length {length}")
    if N + M < variance_window:
        raise InsufficientDataError(f"variance window {variance_window} larger than N+M={N + M}")

    starts = np.arange(0, length - N - M + 1, stride)
    x = np.stack([series[s:s + N] for s in starts])
    y0 = np.stack([series[s + N:s + N + M] for s in starts])

    if variance_window <= N + 1:
        # every target step has a full trailing window inside its own sample
        rolled = _rolling_variance(series, variance_window)
        offset = variance_window - 1
        sigma = np.stack([rolled[s + N - offset:s + N + M - offset] for s in starts])
    else:
        sigma = np.stack([sliding_window_variance(xi, yi, variance_window) for xi, yi in zip(x, y0)])
    sigma = np.maximum(sigma, VARIANCE_FLOOR)
    log.debug(f"{split}: {len(starts)} windows (N={N}, M={M}, stride={stride})")
    return WindowSet(x=x, y0=y0, sigma_y0=sigma, starts=starts)


def window_count(length: int, N: int, M: int, stride: int = 1) -> int:
    if length < N + M:
        return 0
    return (length - N - M) // stride + 1


###################
# Standardization #
###################

@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def inverse_variance(self, variance: np.ndarray) -> np.ndarray:
        return variance * self.std ** 2


def fit_standardizer(train_values: np.ndarray) -> Standardizer:
    mean = train_values.mean(axis=0)
    var = train_values.var(axis=0)
    flat = var < STD_VARIANCE_FLOOR
    if flat.any():
        log.warning(f"zero-variance features {np.flatnonzero(flat).tolist()}: variance floored at {STD_VARIANCE_FLOOR}")
        var = np.maximum(var, STD_VARIANCE_FLOOR)
    return Standardizer(mean=mean, std=np.sqrt(var))


def standardize(ds: TimeSeriesDataset) -> Tuple[TimeSeriesDataset, Standardizer]:
    """Per-feature affine transform fitted on the train split only."""
    scaler = fit_standardizer(ds.split("train"))
    return replace(ds, values=scaler.transform(ds.values)), scaler


#############
# Synthetic #
#############

def synth_ramps(length: int, kind: str) -> Tuple[np.ndarray, np.ndarray]:
    """Generator mean m[t] and standard deviation v[t]."""
    if length < 2:
        raise ConfigurationError(f"synthetic length must be >= 2, got {length}")
    means = np.linspace(1, 10, length)
    stddev = np.linspace(1, 10, length)
    if kind == QUADRATIC:
        stddev = stddev * stddev
    elif kind != LINEAR:
        raise ConfigurationError(f"unknown synthetic kind '{kind}'")
    return means, stddev


def _synth(length: int, seed: int, kind: str) -> TimeSeriesDataset:
    means, stddev = synth_ramps(length, kind)
    generator = rng.substream(seed, rng.SYNTH)
    data = generator.normal(loc=means, scale=stddev)
    return TimeSeriesDataset(values=data.reshape(-1, 1), feature_names=("value",))


def synth_linear(length: int, seed: int) -> TimeSeriesDataset:
    return _synth(length, seed, LINEAR)


def synth_quadratic(length: int, seed: int) -> TimeSeriesDataset:
    return _synth(length, seed, QUADRATIC)


def synthesize(kind: str, length: int, seed: int) -> TimeSeriesDataset:
    if kind == LINEAR:
        return synth_linear(length, seed)
    if kind == QUADRATIC:
        return synth_quadratic(length, seed)
    raise ConfigurationError(f"unknown synthetic kind '{kind}'")


def take_rows(ds: TimeSeriesDataset, max_rows: Optional[int]) -> TimeSeriesDataset:
    """Leading subset of the rows, e.g. a smoke-sized slice of a large dataset."""
    if max_rows is None or max_rows >= ds.length:
        return ds
    return replace(ds, values=ds.values[:max_rows], split_bounds=None)


"""Endpoint prior: conditional mean f_phi(X) and conditional variance g_psi(X).

Both estimators work channel-independently: one MLP with weights shared
across features maps the N-length history of a feature to its M-length
forecast (mean) or variance.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Tuple

import numpy as np

from . import rng
from .data import VARIANCE_FLOOR, WindowSet
from .errors import ConfigurationError, ShapeError, TrainingError
from .learner import (DEFAULT_ADAM, IDENTITY, SOFTPLUS, AdamSettings, MlpSpec, ParameterStore, adam_step,
                      init_mlp, mlp_backward, mlp_forward)

log = logging.getLogger(__name__)

F_PHI = "f_phi"
G_PSI = "g_psi"
EVAL_CHUNK = 4096


@dataclass(frozen=True)
class EndpointPrior:
    """Endpoint N(mean, variance); both arrays are M×D (or W×M×D for a batch)."""
    mean: np.ndarray
    variance: np.ndarray


class MeanEstimator(Protocol):
    """Anything that maps a W×N×D history batch to a W×M×D conditional mean."""
    frozen: bool

    def predict(self, x: np.ndarray) -> np.ndarray: ...


def _to_rows(x: np.ndarray) -> np.ndarray:
    """W×L×D -> (W·D)×L, one row per (window, feature)."""
    return np.ascontiguousarray(np.transpose(x, (0, 2, 1))).reshape(-1, x.shape[1])


def _from_rows(rows: np.ndarray, W: int, D: int) -> np.ndarray:
    return np.transpose(rows.reshape(W, D, -1), (0, 2, 1))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class ChannelMlp:
    """Per-feature MLP estimator with weights shared across features."""
    spec: MlpSpec
    store: ParameterStore
    frozen: bool = False
    history: List[EpochRecord] = field(default_factory=list)
    best_val_loss: float = float("inf")

    @property
    def input_length(self) -> int:
        return self.spec.widths[0]

    @property
    def horizon(self) -> int:
        return self.spec.widths[-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.ndim != 3 or x.shape[1] != self.input_length:
            raise ShapeError(f"{self.spec.name}: expected history length {self.input_length}, got shape {x.shape}")
        W, _, D = x.shape
        rows = _to_rows(x)
        out = np.concatenate([
            mlp_forward(self.store, self.spec, rows[i:i + EVAL_CHUNK])[0]
            for i in range(0, rows.shape[0], EVAL_CHUNK)
        ], axis=0)
        out = _from_rows(out, W, D)
        return out[0] if single else out

    def supervised_step(self, x: np.ndarray, target: np.ndarray, lr: float,
                        adam: AdamSettings = DEFAULT_ADAM) -> float:
        """One MSE gradient step on a W×N×D batch; returns the batch loss."""
        if self.frozen:
            raise ConfigurationError(f"{self.spec.name} is frozen")
        rows = _to_rows(x)
        target_rows = _to_rows(target)
        self.store.zero_grad()
        pred, cache = mlp_forward(self.store, self.spec, rows)
        diff = pred - target_rows
        loss = float(np.mean(diff * diff))
        if not np.isfinite(loss):
            raise TrainingError(f"{self.spec.name}: non-finite loss at optimizer step {self.store.step + 1}")
        mlp_backward(self.store, self.spec, cache, 2.0 * diff / diff.size)
        adam_step(self.store, lr, *adam)
        return loss

    def mse(self, x: np.ndarray, target: np.ndarray) -> float:
        diff = self.predict(x) - target
        return float(np.mean(diff * diff))


def build_mean_model(N: int, M: int, hidden: int, layers: int, seed: int) -> ChannelMlp:
    """Default f_phi: `layers`-layer MLP N -> hidden -> ... -> M, identity head."""
    spec = MlpSpec(F_PHI, (N,) + (hidden,) * (layers - 1) + (M,), IDENTITY)
    store = ParameterStore()
    init_mlp(store, spec, rng.substream(seed, rng.INIT, rng.F_PHI))
    return ChannelMlp(spec, store)


def build_variance_model(N: int, M: int, hidden: int, layers: int, seed: int) -> ChannelMlp:
    """g_psi: MLP over the raw history channel with a softplus head."""
    spec = MlpSpec(G_PSI, (N,) + (hidden,) * (layers - 1) + (M,), SOFTPLUS)
    store = ParameterStore()
    init_mlp(store, spec, rng.substream(seed, rng.INIT, rng.G_PSI))
    return ChannelMlp(spec, store)


def _fit(model: ChannelMlp, train: WindowSet, val: WindowSet, targets: Tuple[np.ndarray, np.ndarray],
         epochs: int, lr: float, batch_size: int, seed: int, stream: int,
         adam: AdamSettings = DEFAULT_ADAM) -> ChannelMlp:
    if len(train) == 0 or len(val) == 0:
        raise TrainingError(f"{model.spec.name}: empty window set (train={len(train)}, val={len(val)})")
    train_target, val_target = targets
    shuffle = rng.substream(seed, rng.SHUFFLE, stream)

    best = model.store.snapshot()
    model.best_val_loss = model.mse(val.x, val_target)
    log.info(f"{model.spec.name}: initial val loss {model.best_val_loss:.6f}")
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            try:
                losses.append(model.supervised_step(train.x[idx], train_target[idx], lr, adam))
            except TrainingError as e:
                raise TrainingError(f"{e} (epoch {epoch}, batch {start // batch_size})") from e
        val_loss = model.mse(val.x, val_target)
        if not np.isfinite(val_loss):
            raise TrainingError(f"{model.spec.name}: non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss)
        model.history.append(record)
        log.info(f"{model.spec.name}: epoch {epoch}/{epochs} train {record.train_loss:.6f} val {val_loss:.6f}")
        if val_loss < model.best_val_loss:
            model.best_val_loss = val_loss
            best = model.store.snapshot()

    model.store.restore(best)
    model.frozen = True
    log.info(f"{model.spec.name}: retained checkpoint with val loss {model.best_val_loss:.6f}")
    return model


def pretrain_mean(model: ChannelMlp, train: WindowSet, val: WindowSet, epochs: int = 10,
                  lr: float = 1e-3, seed: int = 1, batch_size: int = 32,
                  adam: AdamSettings = DEFAULT_ADAM) -> ChannelMlp:
    """Supervised MSE fit of f_phi(X) to Y0; best-validation weights kept, then frozen."""
    return _fit(model, train, val, (train.y0, val.y0), epochs, lr, batch_size, seed, rng.F_PHI, adam)


def pretrain_variance(model: ChannelMlp, train: WindowSet, val: WindowSet, epochs: int = 10,
                      lr: float = 1e-3, seed: int = 1, batch_size: int = 32,
                      adam: AdamSettings = DEFAULT_ADAM) -> ChannelMlp:
    """Supervised MSE fit of g_psi(X) to the sliding-window variance targets."""
    return _fit(model, train, val, (train.sigma_y0, val.sigma_y0), epochs, lr, batch_size, seed, rng.G_PSI, adam)


def predict_prior(mean_model: MeanEstimator, variance_model: ChannelMlp, x: np.ndarray,
                  floor: Optional[float] = VARIANCE_FLOOR) -> EndpointPrior:
    if not (mean_model.frozen and variance_model.frozen):
        raise ConfigurationError("endpoint estimators must be frozen before serving the prior")
    mean = mean_model.predict(x)
    variance = variance_model.predict(x)
    if mean.shape != variance.shape:
        raise ShapeError(f"mean shape {mean.shape} != variance shape {variance.shape}")
    if floor is not None:
        hits = int(np.count_nonzero(variance < floor))
        if hits:
            log.warning(f"g_psi below floor in {hits} cells; clamped to {floor}")
        variance = np.maximum(variance, floor)
    return EndpointPrior(mean=mean, variance=variance)

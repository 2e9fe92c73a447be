"""Denoiser training, reverse-process sampling and checkpoints."""
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from . import rng
from .data import (RATIO_SCHEME, SPLITS, VARIANCE_FLOOR, Standardizer, TimeSeriesDataset, WindowSet,
                   make_windows, split_dataset, standardize, synth_ramps)
from .diffusion import (VariantMode, endpoint_variance, forward_marginal, nsdiff_loss, parse_variant,
                        perfect_estimator_posterior_variance, posterior_params, reconstruct_y0,
                        solve_sigma_y0)
from .errors import (CheckpointFormatError, ConfigurationError, ShapeError, TrainingError)
from .estimators import (F_PHI, G_PSI, ChannelMlp, EndpointPrior, build_mean_model,
                         build_variance_model, predict_prior, pretrain_mean, pretrain_variance)
from .learner import (IDENTITY, AdamSettings, MlpSpec, ParameterStore, adam_step, embedding_backward,
                      embedding_forward, init_embedding, init_mlp, mlp_backward, mlp_forward,
                      sigmoid, softplus)
from .metrics import evaluate_ensemble, pearson, uncertainty_variation
from .schedule import NoiseSchedule, build_schedule

log = logging.getLogger(__name__)

XI_THETA = "xi_theta"
SCALER = "scaler"
LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class TrainConfig:
    # diffusion
    T: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"
    variant: str = VariantMode.FULL.value
    # windows
    N: int = 168
    M: int = 36
    variance_window: int = 96
    # optimisation
    epochs: int = 10
    pretrain_epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 1
    end_to_end: bool = False
    # architectures
    mean_hidden: int = 512
    mean_layers: int = 3
    variance_hidden: int = 512
    variance_layers: int = 3
    denoiser_hidden: int = 128
    denoiser_layers: int = 3
    embed_width: int = 64
    # sampling
    samples: int = 100
    sample_chunk: int = 32
    eval_stride: int = 1

    def __post_init__(self):
        positive = ("T", "N", "M", "variance_window", "batch_size", "samples", "sample_chunk", "eval_stride",
                    "mean_hidden", "mean_layers", "variance_hidden", "variance_layers",
                    "denoiser_hidden", "denoiser_layers", "embed_width")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0 and self.adam_eps > 0):
            raise ConfigurationError("Adam betas must lie in [0, 1) and eps must be positive")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        parse_variant(self.variant)

    @classmethod
    def from_mapping(cls, values: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**dict(values))

    @property
    def mode(self) -> VariantMode:
        return parse_variant(self.variant)

    @property
    def adam_settings(self) -> AdamSettings:
        return (self.adam_beta1, self.adam_beta2, self.adam_eps)

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(self.schedule, self.T, self.beta_start, self.beta_end)


@dataclass
class ForecastEnsemble:
    """S sampled paths in data units: S×M×D for one window, S×W×M×D for a batch."""
    samples: np.ndarray

    def __post_init__(self):
        if self.samples.shape[0] < 1:
            raise ShapeError("ensemble needs at least one path")

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def std(self) -> np.ndarray:
        return self.samples.std(axis=0)

    def quantile(self, q) -> np.ndarray:
        return np.quantile(self.samples, q, axis=0)

    def interval(self, coverage: float = 0.95) -> Tuple[np.ndarray, np.ndarray]:
        tail = (1.0 - coverage) / 2.0
        low, high = self.quantile([tail, 1.0 - tail])
        return low, high


############
# Denoiser #
############

@dataclass
class DenoiserCache:
    mlp: object
    raw_sigma: np.ndarray
    reference: np.ndarray
    steps: np.ndarray
    shape: Tuple[int, int, int]


@dataclass
class Denoiser:
    """
    ξ_θ(Y_t, f, g, t) -> (η_θ, σ_θ).

    Channel-independent MLP over [Y_t, f, log g, e_t] with a learned step
    embedding e_t. σ_θ is a softplus head scaled by the posterior variance
    expected when σ_Y0 equals g, so training starts at the right magnitude.
    """
    spec: MlpSpec
    store: ParameterStore
    horizon: int
    embed_width: int

    @property
    def embedding(self) -> str:
        return f"{self.spec.name}/embedding"

    def _rows(self, *arrays: np.ndarray) -> List[np.ndarray]:
        return [np.ascontiguousarray(np.transpose(a, (0, 2, 1))).reshape(-1, a.shape[1]) for a in arrays]

    def _unrows(self, rows: np.ndarray, W: int, D: int) -> np.ndarray:
        return np.transpose(rows.reshape(W, D, -1), (0, 2, 1))

    def forward(self, schedule: NoiseSchedule, t, y_t: np.ndarray, prior: EndpointPrior,
                mode: VariantMode) -> Tuple[np.ndarray, np.ndarray, DenoiserCache]:
        W, M, D = y_t.shape
        if M != self.horizon:
            raise ShapeError(f"{self.spec.name}: horizon {M} != {self.horizon}")
        steps = np.full(W, int(t)) if np.ndim(t) == 0 else np.asarray(t)
        g = endpoint_variance(mode, prior.variance)
        y_rows, f_rows, g_rows = self._rows(y_t, prior.mean, g)
        step_rows = np.repeat(steps, D)
        inputs = np.concatenate([y_rows, f_rows, np.log(g_rows),
                                 embedding_forward(self.store, self.embedding, step_rows - 1)], axis=1)
        out, cache = mlp_forward(self.store, self.spec, inputs)
        eta_rows, raw = out[:, :M], out[:, M:]
        reference = perfect_estimator_posterior_variance(schedule, step_rows, g_rows)
        sigma_rows = softplus(raw) / LOG2 * reference
        eta = self._unrows(eta_rows, W, D)
        sigma = self._unrows(sigma_rows, W, D)
        return eta, sigma, DenoiserCache(cache, raw, reference, step_rows, (W, M, D))

    def backward(self, cache: DenoiserCache, grad_eta: np.ndarray, grad_sigma: np.ndarray) -> None:
        W, M, D = cache.shape
        g_eta, g_sigma = self._rows(grad_eta, grad_sigma)
        g_raw = g_sigma * sigmoid(cache.raw_sigma) / LOG2 * cache.reference
        grad_in = mlp_backward(self.store, self.spec, cache.mlp, np.concatenate([g_eta, g_raw], axis=1))
        embedding_backward(self.store, self.embedding, cache.steps - 1, grad_in[:, 3 * M:])


def build_denoiser(T: int, M: int, hidden: int, layers: int, embed_width: int, seed: int) -> Denoiser:
    spec = MlpSpec(XI_THETA, (3 * M + embed_width,) + (hidden,) * (layers - 1) + (2 * M,), IDENTITY)
    store = ParameterStore()
    generator = rng.substream(seed, rng.INIT, rng.XI_THETA)
    init_mlp(store, spec, generator)
    denoiser = Denoiser(spec, store, M, embed_width)
    init_embedding(store, denoiser.embedding, T, embed_width, generator)
    return denoiser


#########
# Model #
#########

@dataclass
class NsDiffModel:
    """Everything needed to sample: schedule, the three networks and the data scaler."""
    config: TrainConfig
    schedule: NoiseSchedule
    mean_model: ChannelMlp
    variance_model: ChannelMlp
    denoiser: Optional[Denoiser] = None
    scaler: Optional[Standardizer] = None
    feature_names: Tuple[str, ...] = ()
    history: List[Dict] = field(default_factory=list)
    best_val_loss: float = float("inf")

    @property
    def mode(self) -> VariantMode:
        return self.config.mode

    def prior(self, x: np.ndarray) -> EndpointPrior:
        return predict_prior(self.mean_model, self.variance_model, x)


def build_prior_models(config: TrainConfig) -> Tuple[ChannelMlp, ChannelMlp]:
    mean_model = build_mean_model(config.N, config.M, config.mean_hidden, config.mean_layers, config.seed)
    variance_model = build_variance_model(config.N, config.M, config.variance_hidden, config.variance_layers,
                                          config.seed)
    return mean_model, variance_model


def batch_loss(model: NsDiffModel, windows: WindowSet, prior: EndpointPrior, steps: np.ndarray,
               noise: np.ndarray, backward: bool) -> float:
    """Diffusion loss of one batch at the given steps and noise; accumulates ξ_θ gradients when `backward`."""
    s, mode = model.schedule, model.mode
    y_t = forward_marginal(s, steps, windows.y0, prior, windows.sigma_y0, noise, mode)
    sigma_tilde = posterior_params(s, steps, y_t, windows.y0, prior, windows.sigma_y0, mode).sigma_tilde
    eta_theta, sigma_theta, cache = model.denoiser.forward(s, steps, y_t, prior, mode)
    # σ̃ is exactly zero at t = 1 and the last reverse step never uses σ_θ
    value = nsdiff_loss(noise, eta_theta, sigma_tilde, sigma_theta, variance_mask=steps > 1)
    if not np.isfinite(value.loss):
        raise TrainingError(f"non-finite diffusion loss at optimizer step {model.denoiser.store.step + 1}")
    if backward:
        model.denoiser.backward(cache, value.grad_eta_theta, value.grad_sigma_theta)
    return value.loss


def validation_loss(model: NsDiffModel, val: WindowSet, prior: EndpointPrior, seed: int) -> float:
    """Diffusion loss on the validation windows with fixed step and noise draws."""
    generator = rng.substream(seed, rng.NOISE, 1)
    steps = generator.integers(1, model.schedule.T + 1, size=len(val))
    noise = generator.standard_normal(val.y0.shape)
    total = 0.0
    for start in range(0, len(val), 1024):
        part = slice(start, start + 1024)
        prior_part = EndpointPrior(prior.mean[part], prior.variance[part])
        total += batch_loss(model, val[part], prior_part, steps[part], noise[part], backward=False) * len(val[part])
    return total / len(val)


def pretrain_prior(config: TrainConfig, train: WindowSet, val: WindowSet) -> Tuple[ChannelMlp, ChannelMlp]:
    """Fit and freeze f_phi and g_psi."""
    mean_model, variance_model = build_prior_models(config)
    pretrain_mean(mean_model, train, val, config.pretrain_epochs, config.lr, config.seed, config.batch_size,
                  config.adam_settings)
    pretrain_variance(variance_model, train, val, config.pretrain_epochs, config.lr, config.seed, config.batch_size,
                      config.adam_settings)
    return mean_model, variance_model


def train_nsdiff(config: TrainConfig, train: WindowSet, val: WindowSet,
                 mean_model: Optional[ChannelMlp] = None, variance_model: Optional[ChannelMlp] = None,
                 scaler: Optional[Standardizer] = None, feature_names: Iterable[str] = ()) -> NsDiffModel:
    """
    Train ξ_θ on noised targets drawn from the closed-form forward marginal.

    With `config.end_to_end` the estimators are built here (when not given)
    and updated with their supervised losses on the same batches; otherwise
    they must arrive frozen.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError(f"empty window set (train={len(train)}, val={len(val)})")
    if mean_model is None or variance_model is None:
        if not config.end_to_end:
            raise ConfigurationError("pretrained f_phi and g_psi are required unless end_to_end is set")
        mean_model, variance_model = build_prior_models(config)
    if config.end_to_end:
        mean_model.frozen = variance_model.frozen = False
    elif not (mean_model.frozen and variance_model.frozen):
        raise ConfigurationError("f_phi and g_psi must be frozen before diffusion training")

    schedule = config.build_schedule()
    denoiser = build_denoiser(config.T, config.M, config.denoiser_hidden, config.denoiser_layers,
                              config.embed_width, config.seed)
    model = NsDiffModel(config, schedule, mean_model, variance_model, denoiser, scaler, tuple(feature_names))

    shuffle = rng.substream(config.seed, rng.SHUFFLE, rng.XI_THETA)
    timestep = rng.substream(config.seed, rng.TIMESTEP)
    noise_stream = rng.substream(config.seed, rng.NOISE, 0)

    def current_prior(x: np.ndarray) -> EndpointPrior:
        if config.end_to_end:
            return EndpointPrior(mean_model.predict(x), np.maximum(variance_model.predict(x), VARIANCE_FLOOR))
        return predict_prior(mean_model, variance_model, x)

    train_prior = None if config.end_to_end else current_prior(train.x)
    val_prior = current_prior(val.x)
    best = denoiser.store.snapshot()
    model.best_val_loss = validation_loss(model, val, val_prior, config.seed)
    log.info(f"{XI_THETA}: initial val loss {model.best_val_loss:.4f}")

    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = train.take(idx)
            if config.end_to_end:
                mean_model.supervised_step(batch.x, batch.y0, config.lr, config.adam_settings)
                variance_model.supervised_step(batch.x, batch.sigma_y0, config.lr, config.adam_settings)
                prior = current_prior(batch.x)
            else:
                prior = EndpointPrior(train_prior.mean[idx], train_prior.variance[idx])
            steps = timestep.integers(1, config.T + 1, size=len(idx))
            noise = noise_stream.standard_normal(batch.y0.shape)
            denoiser.store.zero_grad()
            try:
                loss = batch_loss(model, batch, prior, steps, noise, backward=True)
                adam_step(denoiser.store, config.lr, *config.adam_settings)
            except TrainingError as e:
                raise TrainingError(f"{e} (epoch {epoch}, batch {start // config.batch_size})") from e
            losses.append(loss)
            log.debug(f"epoch {epoch} batch {start // config.batch_size}: loss {loss:.4f}")

        if config.end_to_end:
            val_prior = current_prior(val.x)
        val_loss = validation_loss(model, val, val_prior, config.seed)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss}
        model.history.append(record)
        log.info(f"{XI_THETA}: epoch {epoch}/{config.epochs} train {record['train_loss']:.4f} val {val_loss:.4f}")
        if val_loss < model.best_val_loss:
            model.best_val_loss = val_loss
            best = denoiser.store.snapshot()

    denoiser.store.restore(best)
    mean_model.frozen = True
    variance_model.frozen = True
    log.info(f"{XI_THETA}: retained checkpoint with val loss {model.best_val_loss:.4f}")
    return model


############
# Sampling #
############

def _reverse_chain(model: NsDiffModel, prior: EndpointPrior, generators) -> np.ndarray:
    """Run the reverse process for all paths at once; returns S×W×M×D in model space."""
    s, mode = model.schedule, model.mode
    S = len(generators)
    W, M, D = prior.mean.shape
    stacked = EndpointPrior(np.tile(prior.mean, (S, 1, 1)), np.tile(prior.variance, (S, 1, 1)))
    g = stacked.variance if mode != VariantMode.NO_LSNM else np.ones_like(stacked.variance)

    def draw() -> np.ndarray:
        return np.concatenate([gen.standard_normal((W, M, D)) for gen in generators], axis=0)

    y = stacked.mean + np.sqrt(endpoint_variance(mode, stacked.variance)) * draw()
    sigma_y0_hat = g
    for t in range(s.T, 0, -1):
        z = draw() if t > 1 else None
        eta_theta, sigma_theta, _ = model.denoiser.forward(s, t, y, stacked, mode)
        if mode == VariantMode.FULL and t > 1:
            sigma_y0_hat = solve_sigma_y0(s, t, g, sigma_theta)
        y0_hat = reconstruct_y0(s, t, y, stacked, sigma_y0_hat, eta_theta, mode)
        if t > 1:
            post = posterior_params(s, t, y, y0_hat, stacked, sigma_y0_hat, mode)
            y = post.mu_tilde + np.sqrt(sigma_theta) * z
        else:
            y = y0_hat
    return y.reshape(S, W, M, D)


def sample_forecast(model: NsDiffModel, x: np.ndarray, S: Optional[int] = None, seed: Optional[int] = None,
                    standardized: bool = False, chunk_size: Optional[int] = None,
                    return_prior: bool = False):
    """
    Draw S forecast paths for one history (N×D) or a batch (W×N×D).

    Args:
        model: trained model with all three networks
        x: history in data units (or model space with `standardized=True`)
        S: number of paths (defaults to the configured sample count)
        seed: master seed of the sampling substreams (defaults to the run seed)
    Returns:
        ForecastEnsemble in data units, optionally with the endpoint prior (data units)
    """
    if model.denoiser is None:
        raise CheckpointFormatError(f"model has no '{XI_THETA}' section")
    S = model.config.samples if S is None else int(S)
    seed = model.config.seed if seed is None else int(seed)
    chunk_size = model.config.sample_chunk if chunk_size is None else int(chunk_size)
    if S < 1:
        raise ConfigurationError(f"sample count must be positive, got {S}")

    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if not standardized and model.scaler is not None:
        x = model.scaler.transform(x)

    outputs, means, variances = [], [], []
    for chunk, start in enumerate(range(0, x.shape[0], chunk_size)):
        part = x[start:start + chunk_size]
        prior = model.prior(part)
        outputs.append(_reverse_chain(model, prior, rng.path_streams(seed, chunk, S)))
        means.append(prior.mean)
        variances.append(prior.variance)
        log.debug(f"sampled windows {start}..{start + part.shape[0]} ({S} paths)")
    samples = np.concatenate(outputs, axis=1)
    prior_mean = np.concatenate(means, axis=0)
    prior_variance = np.concatenate(variances, axis=0)
    if model.scaler is not None:
        samples = model.scaler.inverse(samples)
        prior_mean = model.scaler.inverse(prior_mean)
        prior_variance = model.scaler.inverse_variance(prior_variance)
    if single:
        samples, prior_mean, prior_variance = samples[:, 0], prior_mean[0], prior_variance[0]
    ensemble = ForecastEnsemble(samples)
    if return_prior:
        return ensemble, EndpointPrior(prior_mean, prior_variance)
    return ensemble


##############
# Experiment #
##############

@dataclass
class PreparedData:
    """Split, standardized dataset with its train/val/test windows (model space)."""
    raw: TimeSeriesDataset
    dataset: TimeSeriesDataset
    scaler: Standardizer
    train: WindowSet
    val: WindowSet
    test: WindowSet
    test_offset: int


def prepare_data(raw: TimeSeriesDataset, config: TrainConfig, scheme: str = RATIO_SCHEME,
                 steps_per_month: int = 720, borrow_history: bool = False) -> PreparedData:
    """
    Split chronologically, standardize on train and cut windows.

    Test windows advance by `config.eval_stride`; train and val windows are dense.
    """
    raw = split_dataset(raw, scheme, steps_per_month)
    dataset, scaler = standardize(raw)
    windows = {
        split: make_windows(dataset, split, config.N, config.M, config.variance_window,
                            stride=config.eval_stride if split == "test" else 1,
                            borrow_history=borrow_history)
        for split in SPLITS
    }
    test_offset = raw.split_bounds[1] - (config.N if borrow_history else 0)
    log.info(f"windows: train {len(windows['train'])}, val {len(windows['val'])}, test {len(windows['test'])}")
    return PreparedData(raw, dataset, scaler, windows["train"], windows["val"], windows["test"], max(test_offset, 0))


def variance_tracking(samples: np.ndarray, prepared: PreparedData, M: int, N: int, kind: str) -> float:
    """
    Correlation between the ensemble std and the synthetic generator's std v[t].

    Overlapping test windows forecast the same time index several times; the
    per-cell stds are averaged per time index before correlating.
    """
    _, stddev = synth_ramps(prepared.raw.length, kind)
    rows = prepared.test_offset + prepared.test.starts[:, None] + N + np.arange(M)[None, :]
    ensemble_std = samples.std(axis=0)[..., 0]
    per_step = pd.Series(ensemble_std.reshape(-1)).groupby(rows.reshape(-1)).mean()
    return pearson(per_step.to_numpy(), stddev[per_step.index.to_numpy()])


def evaluate_model(model: NsDiffModel, prepared: PreparedData, S: Optional[int] = None,
                   seed: Optional[int] = None, synth_kind: Optional[str] = None):
    """
    Sample the test windows and score them in data units.

    Returns:
        (EvalReport, samples S×W×M×D, observations W×M×D, EndpointPrior in data units)
    """
    ensemble, prior = sample_forecast(model, prepared.test.x, S=S, seed=seed, standardized=True,
                                      return_prior=True)
    observations = prepared.scaler.inverse(prepared.test.y0)
    report = evaluate_ensemble(ensemble.samples, observations, prepared.raw.feature_names)
    report.uncertainty_variation = uncertainty_variation(prepared.raw)
    if synth_kind is not None:
        report.variance_tracking_r = variance_tracking(ensemble.samples, prepared, model.config.M,
                                                       model.config.N, synth_kind)
        log.info(f"variance tracking r = {report.variance_tracking_r:.3f}")
    return report, ensemble.samples, observations, prior


###############
# Checkpoints #
###############

MAGIC = b"NSDF"
VERSION = 1
# top-level trailer objects and the keys each must carry
TRAILER_KEYS = {"config": (), "schedule": ("kind", "T", "beta_start", "beta_end")}


def _pack_entries(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(value.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def read(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise CheckpointFormatError(f"{self.path}: truncated checkpoint at byte {self.offset}")
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def checkpoint_arrays(model: NsDiffModel) -> Dict[str, np.ndarray]:
    arrays = dict(model.mean_model.store.params)
    arrays.update(model.variance_model.store.params)
    if model.denoiser is not None:
        arrays.update(model.denoiser.store.params)
    if model.scaler is not None:
        arrays[f"{SCALER}/mean"] = model.scaler.mean
        arrays[f"{SCALER}/std"] = model.scaler.std
    return arrays


def save_checkpoint(path, model: NsDiffModel) -> Path:
    """Binary layout: magic, u32 version, named float64 arrays, JSON config trailer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trailer = {
        "config": asdict(model.config),
        "schedule": model.schedule.params(),
        "feature_names": list(model.feature_names),
        "best_val_loss": model.best_val_loss if np.isfinite(model.best_val_loss) else None,
    }
    encoded = json.dumps(trailer, sort_keys=True).encode("utf-8")
    payload = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        _pack_entries(checkpoint_arrays(model)),
        struct.pack("<Q", len(encoded)),
        encoded,
    ])
    path.write_bytes(payload)
    log.info(f"Checkpoint saved to {path}")
    return path


def _check_trailer(trailer, path: Path) -> None:
    if not isinstance(trailer, dict):
        raise CheckpointFormatError(f"{path}: config trailer is not a JSON object")
    for key, required in TRAILER_KEYS.items():
        section = trailer.get(key)
        if not isinstance(section, dict):
            raise CheckpointFormatError(f"{path}: config trailer has no '{key}' object")
        missing = sorted(set(required) - set(section))
        if missing:
            raise CheckpointFormatError(f"{path}: trailer '{key}' is missing {missing}")


def read_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict]:
    """Decode a checkpoint file into its named arrays and trailer."""
    path = Path(path)
    payload = path.read_bytes()
    reader = _Reader(payload, path)
    if len(payload) < len(MAGIC) or reader.read(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}")
    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.read(name_length).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(reader.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    (trailer_length,) = reader.unpack("<Q")
    try:
        trailer = json.loads(reader.read(trailer_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt config trailer ({e})") from e
    if reader.offset != len(payload):
        raise CheckpointFormatError(f"{path}: {len(payload) - reader.offset} trailing bytes after the trailer")
    _check_trailer(trailer, path)
    return arrays, trailer


def _section(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name: value for name, value in arrays.items() if name.startswith(prefix + "/")}


def load_checkpoint(path, require_denoiser: bool = True) -> NsDiffModel:
    arrays, trailer = read_checkpoint(path)
    config = TrainConfig.from_mapping(trailer["config"])
    schedule = build_schedule(trailer["schedule"]["kind"], trailer["schedule"]["T"],
                              trailer["schedule"]["beta_start"], trailer["schedule"]["beta_end"])

    for prefix in (F_PHI, G_PSI) + ((XI_THETA,) if require_denoiser else ()):
        if not _section(arrays, prefix):
            raise CheckpointFormatError(f"{path}: missing model section '{prefix}'")

    mean_model, variance_model = build_prior_models(config)
    for model_part in (mean_model, variance_model):
        model_part.store.restore(_section(arrays, model_part.spec.name))
        model_part.frozen = True

    denoiser = None
    if _section(arrays, XI_THETA):
        denoiser = build_denoiser(config.T, config.M, config.denoiser_hidden, config.denoiser_layers,
                                  config.embed_width, config.seed)
        denoiser.store.restore(_section(arrays, XI_THETA))

    scaler = None
    if f"{SCALER}/mean" in arrays:
        scaler = Standardizer(mean=arrays[f"{SCALER}/mean"], std=arrays[f"{SCALER}/std"])
    best = trailer.get("best_val_loss")
    return NsDiffModel(config, schedule, mean_model, variance_model, denoiser, scaler,
                       tuple(trailer.get("feature_names", ())),
                       best_val_loss=float("inf") if best is None else float(best))

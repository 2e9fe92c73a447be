import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Tuple
from dotenv import load_dotenv

import hydra
import numpy as np
from omegaconf import DictConfig, OmegaConf

from .data import TimeSeriesDataset, load_csv, synthesize, take_rows, write_csv
from .errors import ConfigurationError, MissingArtifactError, NsDiffError
from .metrics import plot_frame
from .pipeline import (NsDiffModel, PreparedData, TrainConfig, evaluate_model, load_checkpoint,
                       prepare_data, pretrain_prior, sample_forecast, save_checkpoint, train_nsdiff)

log = logging.getLogger(__name__)

# NSDIFF_OUTPUT_ROOT feeds the run directory, which Hydra resolves before main runs
load_dotenv()

PRIOR_FILE = "prior.nsdf"
MODEL_FILE = "model.nsdf"
ENSEMBLE_FILE = "ensemble.npz"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
PLOT_DATA = "plot_data.csv"


def train_config(cfg: DictConfig) -> TrainConfig:
    """Flatten the model and train groups plus the window sizes of the dataset."""
    values = OmegaConf.to_container(cfg.model, resolve=True)
    values.update(OmegaConf.to_container(cfg.train, resolve=True))
    values.update(N=cfg.dataset.N, M=cfg.dataset.M, variance_window=cfg.dataset.variance_window)
    return TrainConfig.from_mapping(values)


def run_dir(cfg: DictConfig) -> Path:
    path = Path(cfg.app.run_dir)
    path.mkdir(parents=True, exist_ok=True)
    OmegaConf.save(cfg, path / "config.yaml", resolve=True)
    return path


def load_dataset(cfg: DictConfig) -> TimeSeriesDataset:
    """
    Load the configured CSV. Synthetic datasets are generated to their path on first use.
    """
    path = Path(cfg.dataset.path)
    synth = cfg.dataset.get("synth")
    if not path.is_file() and synth is not None:
        log.info(f"Generating {synth.kind} synthetic dataset at {path}")
        write_csv(synthesize(synth.kind, synth.length, synth.seed), path)
    ds = load_csv(path, has_date_column=cfg.dataset.has_date_column)
    return take_rows(ds, cfg.dataset.max_rows)


def prepare(cfg: DictConfig, config: TrainConfig) -> PreparedData:
    return prepare_data(load_dataset(cfg), config, scheme=cfg.dataset.split_scheme,
                        steps_per_month=cfg.dataset.steps_per_month,
                        borrow_history=cfg.dataset.borrow_history)


def load_artifact(path: Path, require_denoiser: bool = True) -> NsDiffModel:
    if not path.is_file():
        raise MissingArtifactError(f"{path} not found; run the preceding command first")
    return load_checkpoint(path, require_denoiser=require_denoiser)


def check_compatible(model: NsDiffModel, config: TrainConfig, path: Path) -> None:
    if (model.config.N, model.config.M) != (config.N, config.M):
        raise ConfigurationError(
            f"{path} was trained with N={model.config.N}, M={model.config.M}, "
            f"but the current config has N={config.N}, M={config.M}"
        )


def synth_kind(cfg: DictConfig) -> Optional[str]:
    """Generator kind when the evaluated data is an untruncated synthetic series."""
    synth = cfg.dataset.get("synth")
    if synth is None or cfg.dataset.max_rows is not None:
        return None
    return synth.kind


############
# Commands #
############

def cmd_synth(cfg: DictConfig) -> Path:
    params = cfg.app.synth
    path = write_csv(synthesize(params.kind, int(params.length), int(params.seed)), params.out)
    log.info(f"Wrote {params.length} rows of {params.kind} synthetic data to {path}")
    return path


def _pretrain(config: TrainConfig, prepared: PreparedData, path: Path) -> NsDiffModel:
    mean_model, variance_model = pretrain_prior(config, prepared.train, prepared.val)
    model = NsDiffModel(config, config.build_schedule(), mean_model, variance_model,
                        scaler=prepared.scaler, feature_names=prepared.raw.feature_names)
    save_checkpoint(path, model)
    return model


def cmd_pretrain(cfg: DictConfig) -> Path:
    config = train_config(cfg)
    path = run_dir(cfg) / PRIOR_FILE
    _pretrain(config, prepare(cfg, config), path)
    return path


def cmd_train(cfg: DictConfig) -> Path:
    config = train_config(cfg)
    out = run_dir(cfg)
    prepared = prepare(cfg, config)

    mean_model = variance_model = None
    if not config.end_to_end:
        prior_path = out / PRIOR_FILE
        if prior_path.is_file():
            log.info(f"Reusing pretrained estimators from {prior_path}")
            prior = load_artifact(prior_path, require_denoiser=False)
            check_compatible(prior, config, prior_path)
        else:
            prior = _pretrain(config, prepared, prior_path)
        mean_model, variance_model = prior.mean_model, prior.variance_model

    model = train_nsdiff(config, prepared.train, prepared.val, mean_model, variance_model,
                         scaler=prepared.scaler, feature_names=prepared.raw.feature_names)
    return save_checkpoint(out / MODEL_FILE, model)


def _trained(cfg: DictConfig) -> Tuple[NsDiffModel, TrainConfig, PreparedData, Path]:
    config = train_config(cfg)
    out = run_dir(cfg)
    model = load_artifact(out / MODEL_FILE)
    check_compatible(model, config, out / MODEL_FILE)
    model.config = replace(model.config, samples=config.samples, sample_chunk=config.sample_chunk,
                           eval_stride=config.eval_stride)
    return model, config, prepare(cfg, config), out


def cmd_sample(cfg: DictConfig) -> Path:
    model, config, prepared, out = _trained(cfg)
    ensemble = sample_forecast(model, prepared.test.x, S=config.samples, seed=config.seed,
                               standardized=True, chunk_size=config.sample_chunk)
    path = out / ENSEMBLE_FILE
    np.savez(path, samples=ensemble.samples, observations=prepared.scaler.inverse(prepared.test.y0))
    log.info(f"Saved {ensemble.size} paths over {prepared.test.x.shape[0]} windows to {path}")
    return path


def cmd_evaluate(cfg: DictConfig) -> Path:
    model, config, prepared, out = _trained(cfg)
    report, samples, observations, prior = evaluate_model(model, prepared, S=config.samples, seed=config.seed,
                                                          synth_kind=synth_kind(cfg))
    report.tags = {"dataset": cfg.dataset.name, "variant": config.variant, "seed": str(config.seed)}

    report.to_json(out / REPORT_JSON)
    report.to_csv_row(out / REPORT_CSV)
    plot_frame(samples, observations, prepared.raw.feature_names, prior.mean, prior.variance) \
        .to_csv(out / PLOT_DATA, index=False, lineterminator="\n")
    summary = Path(cfg.app.summary)
    summary.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv_row(summary, append=True)
    log.info(f"Report written to {out / REPORT_JSON}; summary row appended to {summary}")
    return out / REPORT_JSON


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
}


def run_command(cfg: DictConfig) -> Path:
    command = cfg.get("command")
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command '{command}', expected one of {sorted(COMMANDS)}")
    log.info(f"Running '{command}'")
    return COMMANDS[command](cfg)


@hydra.main(config_path="../../configs", config_name="default", version_base=None)
def main(cfg: DictConfig) -> None:
    """
    CLI entry point: `python -m nsdiff command=<name> [key=value ...]`.

    Exit codes: 0 on success, 1 for expected failures (one `<class>: <detail>`
    line on stderr), 2 for internal errors.

    Args:
        cfg: Hydra configuration
    """
    try:
        run_command(cfg)
    except NsDiffError as e:
        log.error(e.line())
        print(e.line(), file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        log.exception("Unhandled error")
        print(f"internal-error: {' '.join(str(e).split())}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()

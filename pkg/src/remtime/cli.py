"""Command line interface.

Every command writes its artifacts into a fresh run directory together with
a `manifest.json` recording the command, its status, the configuration hash,
the seed, the input run directories and a checksum per artifact. A command
that fails still leaves a manifest with status `failed`.

Configuration is layered: defaults, then a key=value file (`--config`), then
`--set key=value` flags, then the dedicated flags (`--seed`, `--mc-samples`,
`--threads`, `--variant`).
"""
import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy
import pandas
from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError, validator

from remtime import __version__
from remtime.baseline_ts import build_ats, predict_prefixes
from remtime.calibration import (
    DEFAULT_LEVELS,
    DEFAULT_STRIDE,
    DEFAULT_WINDOW,
    build_intervals,
    rolling_calibrate,
)
from remtime.eventlog import (
    EncodedLog,
    EncodingManifest,
    chronological_subset,
    make_prefixes,
    parse_log,
    temporal_split,
    validation_split,
    write_log,
)
from remtime.evaluation import (
    DEFAULT_DAY_EDGES,
    DEFAULT_PREFIX_CAP,
    DEFAULT_SHARES,
    compare_models,
    heatmap_frame,
    plot_calibration,
    plot_heatmap,
    plot_retention,
    retention_curve,
    retention_frame,
    threshold_for_share,
    triage,
    uncertainty_heatmap,
)
from remtime.inference import DEFAULT_SAMPLES, mc_predict, predict_point, prediction_frame
from remtime.layers import MC_VARIANTS, VARIANTS, Network, variant_spec
from remtime.models import ModelSpec, SchemaSpec, SynthSpec, TrainConfig
from remtime.synthdata import SYNTH_SCHEMA, gen_eventlog, gen_regression1d
from remtime.training import train
from remtime.utils import (
    DEFAULT_THREADS,
    RUNS_ROOT,
    RemtimeError,
    config_hash,
    configure_logging,
    file_checksum,
)

logger = logging.getLogger(__name__)

COMMANDS = ["prepare", "train", "predict", "calibrate", "evaluate", "baseline", "synth"]


class ConfigError(RemtimeError):
    """Error thrown when the run configuration is invalid."""


class _Section(BaseModel):
    class Config:  # noqa: D106
        extra = "forbid"


class SplitConfig(_Section):
    """Chronological split settings."""

    test_fraction: float = 0.15
    validation_fraction: float = 0.2
    training_share: float = 1.0


class InferenceConfig(_Section):
    """Prediction settings. `mc_samples` of 0 gives point predictions only."""

    mc_samples: int = DEFAULT_SAMPLES
    threads: int = DEFAULT_THREADS
    batch_size: int = 1024
    keep_draws: bool = False


class CalibrationConfig(_Section):
    """Rolling calibration settings."""

    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    levels: List[float] = DEFAULT_LEVELS


class EvaluationConfig(_Section):
    """Analysis settings."""

    shares: List[float] = DEFAULT_SHARES
    prefix_cap: int = DEFAULT_PREFIX_CAP
    day_edges: List[float] = DEFAULT_DAY_EDGES
    runs: int = 3
    plots: bool = False
    triage_share: float = 0.5


class BaselineConfig(_Section):
    """Transition system settings."""

    abstraction: str = "sequence"
    horizon: Optional[int] = 2
    statistic: str = "mean"


class PathsConfig(_Section):
    """Output locations."""

    runs_root: Path = RUNS_ROOT


class RunConfig(_Section):
    """Complete configuration of one command.

    The top-level `seed` drives training, Monte-Carlo sampling and synthetic
    data. `variant` selects a named model variant on top of `model`.
    """

    seed: int = 0
    variant: Optional[str] = None
    eventlog: SchemaSpec = SchemaSpec()
    split: SplitConfig = SplitConfig()
    model: ModelSpec = ModelSpec()
    training: TrainConfig = TrainConfig()
    inference: InferenceConfig = InferenceConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    baseline: BaselineConfig = BaselineConfig()
    synth: SynthSpec = SynthSpec()
    paths: PathsConfig = PathsConfig()

    @validator("variant")
    def _variant(cls, value):
        if value is not None and value not in VARIANTS:
            raise ValueError(f"unknown variant '{value}', choose from {VARIANTS}")
        return value


SECTIONS = {
    name: field.type_
    for name, field in RunConfig.__fields__.items()
    if isinstance(field.type_, type) and issubclass(field.type_, BaseModel)
}
TOP_LEVEL = [name for name in RunConfig.__fields__ if name not in SECTIONS]
# Seeds come from the top-level key only
RESERVED = {"training.seed", "synth.seed"}


def _parse_value(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _assign(raw: Dict[str, Any], key: str, value: Any):
    if key in RESERVED:
        raise ConfigError(f"Config key '{key}' is set through the top-level 'seed'.")
    if "." in key:
        section, field = key.split(".", 1)
        if section not in SECTIONS or field not in SECTIONS[section].__fields__:
            raise ConfigError(f"Unknown config key '{key}'.")
    elif key in TOP_LEVEL:
        raw[key] = value
        return
    else:
        owners = [s for s, model in SECTIONS.items() if key in model.__fields__]
        if not owners:
            raise ConfigError(f"Unknown config key '{key}'.")
        elif len(owners) > 1:
            raise ConfigError(
                f"Config key '{key}' is ambiguous, use one of "
                + ", ".join(f"{s}.{key}" for s in owners)
                + "."
            )
        section, field = owners[0], key
    raw.setdefault(section, {})[field] = value


def load_config(
    path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    flags: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Merge defaults, a config file, `key=value` overrides and flags.

    Raises:
        ConfigError: Unknown or ambiguous keys, malformed entries or values
            failing validation.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"Config file {path} does not exist.")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigError(f"Config entry '{key}' has no value.")
            _assign(raw, key, _parse_value(value))

    for entry in overrides:
        if "=" not in entry:
            raise ConfigError(f"Override '{entry}' is not of the form key=value.")
        key, value = entry.split("=", 1)
        _assign(raw, key.strip(), _parse_value(value.strip()))

    for key, value in (flags or {}).items():
        if value is not None:
            _assign(raw, key, value)

    try:
        return RunConfig.parse_obj(raw)
    except ValidationError as error:
        raise ConfigError(str(error))


class RunDirectory:
    """A fresh output directory plus its manifest."""

    def __init__(self, command: str, config: RunConfig):
        self.command = command
        self.config = config
        self.hash = config_hash(json.loads(config.json()))
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        root = Path(config.paths.runs_root)
        path = root / f"{stamp}-{command}-{self.hash[:8]}"
        counter = 1
        while path.exists():
            path = root / f"{stamp}-{command}-{self.hash[:8]}-{counter}"
            counter += 1
        path.mkdir(parents=True)
        self.path = path
        self.inputs: Dict[str, Any] = {}
        self.extra: Dict[str, Any] = {}

    def __truediv__(self, name: str) -> Path:  # noqa
        return self.path / name

    def close(self, status: str = "completed") -> Path:
        """Write the manifest with a checksum of every artifact."""
        artifacts = {
            p.name: file_checksum(p)
            for p in sorted(self.path.iterdir())
            if p.is_file() and p.name != "manifest.json"
        }
        manifest = {
            "command": self.command,
            "status": status,
            "version": __version__,
            "config_hash": self.hash,
            "seed": self.config.seed,
            "config": json.loads(self.config.json()),
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "artifacts": artifacts,
            **self.extra,
        }
        with open(self.path / "manifest.json", "w") as fw:
            json.dump(manifest, fw, indent=2)
        logger.info(f"Wrote {len(artifacts)} artifacts to {self.path}")
        return self.path


def read_manifest(run_dir: Path) -> dict:
    """Manifest of an earlier run.

    Raises:
        ConfigError: The directory has no manifest or holds a failed run.
    """
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"{run_dir} is not a run directory.")
    with open(path) as fr:
        manifest = json.load(fr)
    if manifest.get("status") == "failed":
        raise ConfigError(f"{run_dir} is a failed run.")
    return manifest


def _require(inputs: Dict[str, Any], name: str, command: str) -> Any:
    if inputs.get(name) is None:
        raise ConfigError(f"'{command}' needs --{name}.")
    return inputs[name]


def _load_split(data_dir: Path, split: str) -> EncodedLog:
    manifest = EncodingManifest.load(Path(data_dir) / "encoding.json")
    return EncodedLog.load(Path(data_dir) / f"{split}.npz", manifest)


def _read_predictions(path: Path) -> pandas.DataFrame:
    return pandas.read_csv(path, dtype={"case_id": str})


def _synth(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    spec = config.synth.copy(update={"seed": config.seed})
    if spec.kind == "regression1d":
        sample = gen_regression1d(spec)
        pandas.DataFrame(
            {"x": sample.x, "y": sample.y, "f": sample.f, "sigma": sample.sigma}
        ).to_csv(out / "regression.csv", index=False)
    else:
        gen_eventlog(spec).save(out.path, SYNTH_SCHEMA)
        out.extra["schema"] = json.loads(SYNTH_SCHEMA.json())


def _prepare(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    log_path = Path(_require(inputs, "log", "prepare"))
    out.inputs["log"] = log_path
    schema = config.eventlog

    cases = parse_log(log_path, schema)
    train_cases, test_cases = temporal_split(cases, config.split.test_fraction)
    if config.split.training_share < 1:
        train_cases = chronological_subset(train_cases, config.split.training_share)
    fit_cases, val_cases = validation_split(train_cases, config.split.validation_fraction)
    logger.info(
        f"{len(cases)} cases: {len(fit_cases)} train, {len(val_cases)} validation, "
        + f"{len(test_cases)} test."
    )

    fit_log = make_prefixes(fit_cases, schema, fit_vocab=True)
    fit_log.manifest().save(out / "encoding.json")
    fit_log.save(out / "train.npz")
    for split, split_cases in (
        ("validation", val_cases),
        ("test", test_cases),
    ):
        make_prefixes(split_cases, schema, fit_vocab=False, existing=fit_log).save(
            out / f"{split}.npz"
        )
    for split, split_cases in (
        ("train", fit_cases),
        ("validation", val_cases),
        ("test", test_cases),
    ):
        write_log(split_cases, out / f"{split}_events.csv", schema)


def _train(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    data_dir = Path(_require(inputs, "data", "train"))
    out.inputs["data"] = data_dir
    train_log = _load_split(data_dir, "train")
    val_log = _load_split(data_dir, "validation")

    spec = config.model.copy(update={"sequence_length": train_log.sequence_length})
    if config.variant is not None:
        spec = variant_spec(config.variant, spec)
    out.extra["variant"] = config.variant or "custom"

    network = Network.build(
        spec,
        train_log.vocab_sizes,
        train_log.n_numeric,
        seed=config.seed,
        target_mean=float(train_log.targets.mean()),
        target_var=float(train_log.targets.var()),
    )
    cfg = config.training.copy(update={"seed": config.seed})
    report = train(network, train_log, val_log, cfg, log_path=out / "training_log.csv")
    network.save(out / "model.npz")
    with open(out / "train_report.json", "w") as fw:
        fw.write(report.json(indent=2))
    logger.info(
        f"Best epoch {report.best_epoch} with validation MAE {report.best_val_mae:.4f}"
    )


def _predict(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    model_dir = Path(_require(inputs, "model", "predict"))
    model_manifest = read_manifest(model_dir)
    data_dir = Path(model_manifest["inputs"]["data"])
    out.inputs.update({"model": model_dir, "data": data_dir})
    variant = model_manifest.get("variant", "custom")
    out.extra["variant"] = variant

    network = Network.load(model_dir / "model.npz")
    settings = config.inference
    # Named variants outside MC_VARIANTS are point predictors
    sample = settings.mc_samples > 0 and (
        variant in MC_VARIANTS or variant == "custom"
    )
    if settings.mc_samples > 0 and not sample:
        logger.info(f"Variant {variant} gives point predictions, not sampling.")
    for split in ("train", "test"):
        log = _load_split(data_dir, split)
        batch = log.batch()
        if sample:
            dist = mc_predict(
                network,
                batch,
                T=settings.mc_samples,
                seed=config.seed,
                threads=settings.threads,
                allow_single=settings.mc_samples == 1,
                keep_draws=settings.keep_draws,
                batch_size=settings.batch_size,
            )
            frame = prediction_frame(log, dist.mean, dist)
            if settings.keep_draws:
                numpy.savez_compressed(
                    out / f"draws_{split}.npz",
                    mean=dist.mean_draws,
                    log_variance=(
                        dist.log_variance_draws
                        if dist.log_variance_draws is not None
                        else numpy.zeros((0,))
                    ),
                )
        else:
            frame = prediction_frame(
                log, predict_point(network, batch, settings.batch_size)
            )
        frame.to_csv(out / f"predictions_{split}.csv", index=False)


def _calibrate(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    predictions = _require(inputs, "predictions", "calibrate")
    pred_dir = Path(predictions[0])
    out.inputs["predictions"] = pred_dir

    def ordered(name: str) -> pandas.DataFrame:
        frame = _read_predictions(pred_dir / name)
        if frame["total_std"].isna().any():
            raise ConfigError(
                f"{pred_dir / name} has no uncertainty columns, predict with --mc-samples."
            )
        return frame.sort_values("event_timestamp", kind="mergesort").reset_index(
            drop=True
        )

    history = ordered("predictions_train.csv")
    stream = ordered("predictions_test.csv")
    settings = config.calibration

    def columns(frame: pandas.DataFrame):
        return tuple(frame[c].to_numpy(dtype=float) for c in ("target", "mean", "total_std"))

    series = rolling_calibrate(
        *columns(stream),
        window=settings.window,
        stride=settings.stride,
        levels=settings.levels,
        history=columns(history),
    )
    series.to_frame().to_csv(out / "calibration.csv", index=False)

    # Each test sample uses the latest table fitted before it
    as_of = numpy.array([t.as_of for t in series.tables])
    table_index = numpy.maximum(
        numpy.searchsorted(as_of, numpy.arange(len(stream)), side="right") - 1, 0
    )
    rows = []
    for i, (mean, std) in enumerate(zip(stream["mean"], stream["total_std"])):
        interval = build_intervals([mean], [std], series.tables[table_index[i]])[0]
        row = {"case_id": stream["case_id"][i], "prefix_length": stream["prefix_length"][i]}
        row.update({"target": stream["target"][i], "mean": mean, "clamped": interval.clamped})
        for level, (lower, upper) in interval.bounds.items():
            row[f"lower_{level}"] = lower
            row[f"upper_{level}"] = upper
        rows.append(row)
    pandas.DataFrame(rows).to_csv(out / "intervals_test.csv", index=False)

    if config.evaluation.plots:
        plot_calibration(series, out / "calibration.svg")


def _evaluate(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    pred_dirs = [Path(p) for p in _require(inputs, "predictions", "evaluate")]
    settings = config.evaluation
    grouped: Dict[str, List[pandas.DataFrame]] = {}
    for i, pred_dir in enumerate(pred_dirs):
        out.inputs[f"predictions_{i}"] = pred_dir
        variant = read_manifest(pred_dir).get("variant", "custom")
        frame = _read_predictions(pred_dir / "predictions_test.csv")
        if len(grouped.get(variant, [])) < settings.runs:
            grouped.setdefault(variant, []).append(frame)
        if frame["total_std"].isna().any():
            continue

        targets = frame["target"].to_numpy(dtype=float)
        means = frame["mean"].to_numpy(dtype=float)
        std = frame["total_std"].to_numpy(dtype=float)
        curve = retention_curve(targets, means, std**2, settings.shares)
        retention_frame(curve).to_csv(out / f"retention_{i}.csv", index=False)

        heatmap = uncertainty_heatmap(
            frame["prefix_length"], targets, std, settings.prefix_cap, settings.day_edges
        )
        heatmap_frame(heatmap).to_csv(out / f"heatmap_{i}.csv", index=False)

        threshold = threshold_for_share(std, settings.triage_share)
        report = triage(targets, means, std, threshold)
        pandas.DataFrame([report.dict()]).to_csv(out / f"triage_{i}.csv", index=False)

        if settings.plots:
            plot_retention(curve, out / f"retention_{i}.svg")
            plot_heatmap(heatmap, out / f"heatmap_{i}.svg")

    compare_models(grouped).to_csv(out / "comparison.csv", index=False)


def _baseline(config: RunConfig, out: RunDirectory, inputs: Dict[str, Any]):
    data_dir = Path(_require(inputs, "data", "baseline"))
    out.inputs["data"] = data_dir
    out.extra["variant"] = "baseline"
    manifest = EncodingManifest.load(data_dir / "encoding.json")
    schema = manifest.schema_spec or config.eventlog

    train_cases = parse_log(data_dir / "train_events.csv", schema) + parse_log(
        data_dir / "validation_events.csv", schema
    )
    test_cases = parse_log(data_dir / "test_events.csv", schema)
    settings = config.baseline
    ats = build_ats(train_cases, settings.abstraction, settings.horizon, settings.statistic)

    test_log = _load_split(data_dir, "test")
    prediction_frame(test_log, predict_prefixes(ats, test_cases)).to_csv(
        out / "predictions_test.csv", index=False
    )


HANDLERS = {
    "synth": _synth,
    "prepare": _prepare,
    "train": _train,
    "predict": _predict,
    "calibrate": _calibrate,
    "evaluate": _evaluate,
    "baseline": _baseline,
}


def run(command: str, config: RunConfig, inputs: Optional[Dict[str, Any]] = None) -> Path:
    """Execute a command and return its run directory.

    Args:
        command: One of `COMMANDS`.
        config: Merged configuration.
        inputs: Input paths: `log` (prepare), `data` (train, baseline),
            `model` (predict) or a list of `predictions` directories
            (calibrate, evaluate).

    Raises:
        ConfigError: Unknown command or missing inputs.
    """
    if command not in HANDLERS:
        raise ConfigError(f"Unknown command '{command}'.")
    out = RunDirectory(command, config)
    status = "failed"
    try:
        HANDLERS[command](config, out, inputs or {})
        status = "completed"
    finally:
        out.close(status)
    return out.path


def build_parser() -> argparse.ArgumentParser:
    """Argument parser of the `remtime` command."""
    parser = argparse.ArgumentParser(
        prog="remtime",
        description="Uncertainty-aware remaining time prediction for event logs.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default=None, help="Logging level.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument("--config", type=Path, help="key=value configuration file.")
        sub.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="Override a configuration key.",
        )
        sub.add_argument("--seed", type=int)
        if command == "prepare":
            sub.add_argument("--log", type=Path, required=True, help="CSV event log.")
        if command in ("train", "baseline"):
            sub.add_argument("--data", type=Path, required=True, help="prepare run.")
        if command == "train":
            sub.add_argument("--variant", choices=VARIANTS)
        if command == "predict":
            sub.add_argument("--model", type=Path, required=True, help="train run.")
            sub.add_argument("--mc-samples", type=int)
            sub.add_argument("--threads", type=int)
        if command in ("calibrate", "evaluate"):
            sub.add_argument(
                "--predictions",
                type=Path,
                nargs="+" if command == "evaluate" else 1,
                required=True,
                help="predict or baseline runs.",
            )

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit:
        return int(exit.code or 0)

    configure_logging(args.log_level)
    flags = {
        "seed": args.seed,
        "variant": getattr(args, "variant", None),
        "inference.mc_samples": getattr(args, "mc_samples", None),
        "inference.threads": getattr(args, "threads", None),
    }
    inputs = {
        name: getattr(args, name, None) for name in ("log", "data", "model", "predictions")
    }
    try:
        config = load_config(args.config, args.set, flags)
        run(args.command, config, inputs)
    except ConfigError as error:
        logger.error(f"{__name__}: {error}")
        return 1
    except RemtimeError as error:
        logger.error(f"{type(error).__module__}: {error}")
        return 1
    except ValidationError as error:
        logger.error(f"remtime.models: {error}")
        return 1
    except OSError as error:
        logger.error(f"{__name__}: {error}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

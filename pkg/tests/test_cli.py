import json
import logging
from pathlib import Path

import numpy
import pandas
import pytest

from remtime.cli import ConfigError, load_config, main, read_manifest, run
from remtime.eventlog import EncodedLog, EncodingManifest
from remtime.inference import PREDICTION_COLUMNS, predict_point
from remtime.layers import Network
from remtime.utils import file_checksum

SMALL = [
    "synth.n=100",
    'eventlog.categorical_features=["channel"]',
    'eventlog.numeric_features=["amount"]',
    "eventlog.sequence_length=4",
    "model.embedding_dim=2",
    "model.conv_channels=[4]",
    "model.kernel_size=2",
    "model.dense_width=4",
    "training.max_epochs=2",
    "training.batch_size=32",
    "inference.mc_samples=4",
    "inference.threads=2",
    "calibration.window=10",
    "calibration.stride=10",
]


def small_config(root: Path, *extra: str, **flags):
    return load_config(
        overrides=SMALL + [f"paths.runs_root={root}", *extra], flags=flags
    )


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    config = small_config(root, seed=0)
    bnn = small_config(root, seed=0, variant="bnn")

    dirs = {"synth": run("synth", config)}
    dirs["prepare"] = run("prepare", config, {"log": dirs["synth"] / "events.csv"})
    dirs["train"] = run("train", bnn, {"data": dirs["prepare"]})
    dirs["predict"] = run("predict", config, {"model": dirs["train"]})
    dirs["calibrate"] = run("calibrate", config, {"predictions": [dirs["predict"]]})
    dirs["baseline"] = run("baseline", config, {"data": dirs["prepare"]})
    dirs["evaluate"] = run(
        "evaluate", config, {"predictions": [dirs["predict"], dirs["baseline"]]}
    )
    return dirs


def test_load_config_layers(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("seed=3\ncalibration.window=100\nmodel.architecture=lstm\n")

    config = load_config(
        path, ["calibration.window=200", "stride=50"], {"seed": 7, "variant": None}
    )

    assert config.seed == 7
    assert config.calibration.window == 200
    assert config.calibration.stride == 50
    assert config.model.architecture == "lstm"
    assert config.training.max_epochs == 100


def test_load_config_parses_lists():
    config = load_config(overrides=['evaluation.shares=[1.0, 0.5]'])

    assert config.evaluation.shares == [1.0, 0.5]


@pytest.mark.parametrize("key", ["model.dropuot", "dropuot", "nosection.window"])
def test_load_config_unknown_key(key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        load_config(overrides=[f"{key}=0.1"])


@pytest.mark.parametrize("key", ["batch_size", "sequence_length"])
def test_load_config_ambiguous_key(key):
    with pytest.raises(ConfigError, match="ambiguous"):
        load_config(overrides=[f"{key}=8"])


def test_load_config_seed_keys_are_top_level():
    with pytest.raises(ConfigError, match="top-level"):
        load_config(overrides=["training.seed=1"])


@pytest.mark.parametrize(
    "override", ["model.dropout=weird", "training.max_epochs=0", "variant=huge", "seed"]
)
def test_load_config_rejects_bad_values(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.env")


def test_run_unknown_command(tmp_path):
    with pytest.raises(ConfigError):
        run("deploy", small_config(tmp_path))


def test_run_missing_input(tmp_path):
    with pytest.raises(ConfigError, match="--data"):
        run("train", small_config(tmp_path))

    (run_dir,) = list(tmp_path.iterdir())
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["artifacts"] == {}
    with pytest.raises(ConfigError, match="failed"):
        read_manifest(run_dir)


def test_main_usage_error():
    assert main(["deploy"]) == 2
    assert main(["predict"]) == 2


def test_main_missing_log(tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        status = main(
            [
                "prepare",
                "--log",
                str(tmp_path / "missing.csv"),
                "--set",
                f"paths.runs_root={tmp_path / 'runs'}",
            ]
        )
    (run_dir,) = list((tmp_path / "runs").iterdir())

    assert status == 1
    assert "missing.csv" in caplog.text
    assert json.loads((run_dir / "manifest.json").read_text())["status"] == "failed"


def test_main_config_error(tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        status = main(["train", "--data", str(tmp_path), "--set", "model.dropuot=0.1"])

    assert status == 1
    assert "remtime.cli" in caplog.text
    assert "dropuot" in caplog.text


def test_main_synth(tmp_path):
    status = main(
        [
            "synth",
            "--seed",
            "3",
            "--set",
            f"paths.runs_root={tmp_path}",
            "--set",
            "synth.n=5",
        ]
    )
    (run_dir,) = list(tmp_path.iterdir())
    manifest = read_manifest(run_dir)

    assert status == 0
    assert run_dir.name.split("-")[2] == "synth"
    assert manifest["seed"] == 3
    assert manifest["schema"]["categorical_features"] == ["channel"]
    assert set(manifest["artifacts"]) == {"events.csv", "truth.csv"}


def test_main_synth_regression(tmp_path):
    status = main(
        ["synth", "--set", f"paths.runs_root={tmp_path}", "--set", "synth.kind=regression1d"]
    )
    (run_dir,) = list(tmp_path.iterdir())

    assert status == 0
    assert list(pandas.read_csv(run_dir / "regression.csv").columns) == [
        "x",
        "y",
        "f",
        "sigma",
    ]


def test_read_manifest_of_plain_directory(tmp_path):
    with pytest.raises(ConfigError):
        read_manifest(tmp_path)


def test_manifests_list_every_artifact(pipeline):
    for run_dir in pipeline.values():
        manifest = read_manifest(run_dir)
        files = {p.name for p in run_dir.iterdir()} - {"manifest.json"}

        assert set(manifest["artifacts"]) == files
        for name, checksum in manifest["artifacts"].items():
            assert file_checksum(run_dir / name) == checksum


def test_prepare_outputs(pipeline):
    files = {p.name for p in pipeline["prepare"].iterdir()}

    assert {
        "encoding.json",
        "train.npz",
        "validation.npz",
        "test.npz",
        "train_events.csv",
        "validation_events.csv",
        "test_events.csv",
    } <= files


def test_train_outputs(pipeline):
    manifest = read_manifest(pipeline["train"])
    training_log = pandas.read_csv(pipeline["train"] / "training_log.csv")

    assert manifest["variant"] == "bnn"
    assert manifest["inputs"]["data"] == str(pipeline["prepare"])
    assert training_log["epoch"].max() <= 2
    assert set(training_log["split"]) == {"train", "validation"}
    assert json.loads((pipeline["train"] / "train_report.json").read_text())


def test_predict_outputs(pipeline):
    manifest = read_manifest(pipeline["predict"])
    frame = pandas.read_csv(pipeline["predict"] / "predictions_test.csv")

    assert manifest["variant"] == "bnn"
    assert list(frame.columns) == PREDICTION_COLUMNS
    assert frame["total_std"].notna().all()
    assert (frame["epistemic_var"] >= 0).all()
    assert (frame["aleatoric_var"] > 0).all()
    assert (pipeline["predict"] / "predictions_train.csv").exists()


def test_calibrate_outputs(pipeline):
    predictions = pandas.read_csv(pipeline["predict"] / "predictions_test.csv")
    intervals = pandas.read_csv(pipeline["calibrate"] / "intervals_test.csv")
    calibration = pandas.read_csv(pipeline["calibrate"] / "calibration.csv")

    assert len(intervals) == len(predictions)
    assert (intervals["lower_0.9"] >= 0).all()
    assert intervals["clamped"].isin([True, False]).all()
    assert (intervals["upper_0.99"] >= intervals["upper_0.5"]).all()
    assert calibration["as_of"].iloc[0] == 0
    assert set(calibration["level"]) == {0.5, 0.75, 0.9, 0.95, 0.99}


def test_baseline_outputs(pipeline):
    baseline = pandas.read_csv(pipeline["baseline"] / "predictions_test.csv")
    bnn = pandas.read_csv(pipeline["predict"] / "predictions_test.csv")

    assert read_manifest(pipeline["baseline"])["variant"] == "baseline"
    assert baseline["total_std"].isna().all()
    pandas.testing.assert_series_equal(baseline["target"], bnn["target"])


def test_evaluate_outputs(pipeline):
    comparison = pandas.read_csv(pipeline["evaluate"] / "comparison.csv")
    files = {p.name for p in pipeline["evaluate"].iterdir()}

    assert set(comparison["variant"]) == {"bnn", "baseline"}
    assert comparison.loc[comparison["variant"] == "baseline", "normalized"].iloc[0] == 1.0
    assert {"retention_0.csv", "heatmap_0.csv", "triage_0.csv"} <= files
    assert "retention_1.csv" not in files


def test_train_and_predict_are_reproducible(pipeline, tmp_path):
    config = small_config(tmp_path, seed=0)
    train_dir = run(
        "train",
        small_config(tmp_path, seed=0, variant="bnn"),
        {"data": pipeline["prepare"]},
    )
    predict_dir = run("predict", config, {"model": train_dir})

    for name in ("predictions_train.csv", "predictions_test.csv"):
        assert (predict_dir / name).read_bytes() == (
            pipeline["predict"] / name
        ).read_bytes()


def test_point_predictions_cannot_be_calibrated(pipeline, tmp_path):
    config = small_config(tmp_path, "inference.mc_samples=0")
    predict_dir = run("predict", config, {"model": pipeline["train"]})

    assert pandas.read_csv(predict_dir / "predictions_test.csv")["total_std"].isna().all()
    with pytest.raises(ConfigError, match="mc-samples"):
        run("calibrate", config, {"predictions": [predict_dir]})


def test_point_variants_are_not_sampled(pipeline, tmp_path):
    train_dir = run(
        "train",
        small_config(tmp_path, seed=0, variant="cdo"),
        {"data": pipeline["prepare"]},
    )
    predict_dir = run("predict", small_config(tmp_path, seed=0), {"model": train_dir})
    frame = pandas.read_csv(predict_dir / "predictions_test.csv")

    manifest = EncodingManifest.load(pipeline["prepare"] / "encoding.json")
    log = EncodedLog.load(pipeline["prepare"] / "test.npz", manifest)
    expected = predict_point(Network.load(train_dir / "model.npz"), log.batch())

    assert read_manifest(predict_dir)["variant"] == "cdo"
    numpy.testing.assert_allclose(frame["mean"], expected, rtol=1e-12)
    assert frame[["epistemic_var", "aleatoric_var", "total_std"]].isna().all().all()
    assert not (predict_dir / "draws_test.npz").exists()

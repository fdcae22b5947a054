import json
import pathlib

import jsonschema
import pytest
from typer.testing import CliRunner

from gaze_world.checkpoint import load_checkpoint, load_decoder, restore
from gaze_world.cli import app
from gaze_world.gazedata import Scanpath, split_dataset
from gaze_world.scanpath import predict_scanpaths
from gaze_world.serialize_data import load_dataset, read_scanpath_file, write_scanpath_file

runner = CliRunner()

SCHEMA = json.loads(
    (pathlib.Path(__file__).parents[1] / "src" / "gaze_world" / "schemas" / "report.schema.json").read_text()
)

SMALL = [
    "data.n_images=60",
    "data.split=[0.5, 0.25, 0.25]",
    "model.embed_dim=8",
    "model.encoder_layers=1",
    "model.encoder_heads=2",
    "model.predictor_layers=1",
    "model.predictor_heads=2",
    "model.completion_layers=1",
    "model.completion_heads=2",
    "model.dtype=float64",
    "train.epochs=1",
    "train.batch_size=10",
    "probe.label_fractions=[0.5, 1.0]",
]


def _invoke(command, workdir, *extra, overrides=SMALL):
    args = [command, "--workdir", str(workdir)]
    for item in overrides:
        args += ["--set", item]
    return runner.invoke(app, args + list(extra))


def _report(workdir, command):
    report = json.loads((workdir / "reports" / f"{command}.json").read_text())
    jsonschema.validate(report, SCHEMA)
    return report


def _error(result):
    assert result.exit_code == 1
    return json.loads(result.output.strip().splitlines()[-1])


def test_synth_pretrain_probe(tmp_path):
    result = _invoke("synth", tmp_path)
    assert result.exit_code == 0, result.output
    synth = _report(tmp_path, "synth")
    assert synth["results"]["n_images"] == 60
    assert synth["seed"] == 0
    assert (tmp_path / "data" / "manifest.json").exists()

    result = _invoke("pretrain", tmp_path)
    assert result.exit_code == 0, result.output
    pretrain = _report(tmp_path, "pretrain")
    assert pretrain["results"]["checkpoint"] == "checkpoints/final.ckpt"
    assert pretrain["config"]["train"]["epochs"] == 1
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()
    assert (tmp_path / "reports" / "train_log.jsonl").read_text().strip()
    assert (tmp_path / "reports" / "loss_curve.svg").read_text().startswith("<svg")

    result = _invoke("probe", tmp_path)
    assert result.exit_code == 0, result.output
    probe = _report(tmp_path, "probe")
    for curve in ("trained", "random_init"):
        assert [row["label_fraction"] for row in probe["results"][curve]] == [0.5, 1.0]
        assert all(0.0 <= row["auroc"] <= 1.0 for row in probe["results"][curve])


def test_metrics_of_a_file_against_itself(tmp_path):
    rows = [
        ("img-0", 0, Scanpath(((0.1, 0.1, 0.2), (0.6, 0.4, 0.3), (0.9, 0.9, 0.1)))),
        ("img-0", 1, Scanpath(((0.5, 0.5, 0.2), (0.1, 0.9, 0.3)))),
        ("img-1", 0, Scanpath(((0.3, 0.8, 0.2),))),
    ]
    write_scanpath_file(tmp_path / "paths.jsonl", rows)
    result = _invoke(
        "metrics", tmp_path, "--pred", "paths.jsonl", "--truth", "paths.jsonl", overrides=()
    )
    assert result.exit_code == 0, result.output
    report = _report(tmp_path, "metrics")["results"]
    assert report["count"] == 3
    assert report["means"]["sed"] == 0.0
    assert report["means"]["scanmatch"] == 1.0
    assert report["means"]["stde"] == 1.0
    assert report["means"]["mm_position"] == 1.0
    assert [(p["image_id"], p["task"]) for p in report["pairs"]] == [
        ("img-0", 0),
        ("img-0", 1),
        ("img-1", 0),
    ]

    write_scanpath_file(tmp_path / "fewer.jsonl", rows[:2])
    error = _error(
        _invoke("metrics", tmp_path, "--pred", "fewer.jsonl", "--truth", "paths.jsonl", overrides=())
    )
    assert error["error"] == "LengthMismatchError"


def test_unknown_config_key_fails_with_json(tmp_path):
    result = _invoke("synth", tmp_path, overrides=["train.epoch=2", "data.colour=1"])
    error = _error(result)
    assert error["error"] == "ConfigError"
    assert error["details"] == ["data.colour", "train.epoch"]
    assert not (tmp_path / "reports").exists()


def test_missing_files_are_named(tmp_path):
    error = _error(_invoke("probe", tmp_path))
    assert error["error"] == "FileNotFoundError"
    assert error["details"][0].endswith("manifest.json")

    assert _invoke("synth", tmp_path).exit_code == 0
    error = _error(_invoke("probe", tmp_path, "--checkpoint", "missing.ckpt"))
    assert error["details"][0].endswith("missing.ckpt")

    error = _error(_invoke("pretrain", tmp_path, "--config", "none.json"))
    assert error["details"][0].endswith("none.json")


def test_config_file_and_grid_check(tmp_path):
    (tmp_path / "experiment.json").write_text(json.dumps({"data": {"n_images": 20}}))
    result = _invoke("synth", tmp_path, "--config", "experiment.json", overrides=())
    assert result.exit_code == 0, result.output
    assert _report(tmp_path, "synth")["results"]["n_images"] == 20

    mismatched = ["data.grid_rows=2", "model.grid_rows=2"]
    error = _error(_invoke("pretrain", tmp_path, overrides=mismatched))
    assert error["error"] == "GridMismatchError"


def test_scanpath_saves_a_reloadable_decoder(tmp_path):
    decoder_overrides = list(SMALL) + [
        "scanpath.model_dim=8",
        "scanpath.heads=2",
        "scanpath.layers=1",
        "scanpath.epochs=1",
        "scanpath.batch_size=10",
        "scanpath.dtype=float64",
    ]
    assert _invoke("synth", tmp_path).exit_code == 0
    assert _invoke("pretrain", tmp_path).exit_code == 0
    result = _invoke("scanpath", tmp_path, overrides=decoder_overrides)
    assert result.exit_code == 0, result.output
    report = _report(tmp_path, "scanpath")["results"]
    assert report["decoder"] == "checkpoints/scanpath_decoder.ckpt"

    decoder = load_decoder(tmp_path / report["decoder"])
    assert decoder.config.model_dim == 8 and decoder.config.epochs == 1
    model, _ = restore(load_checkpoint(tmp_path / "checkpoints" / "final.ckpt"))
    _, _, test = split_dataset(load_dataset(tmp_path / "data"), (0.5, 0.25, 0.25))
    predictions, _ = predict_scanpaths(model, decoder, test)
    written = read_scanpath_file(tmp_path / report["predictions"])
    assert [(i, t, p.fixations) for i, t, p in predictions] == [
        (i, t, p.fixations) for i, t, p in written
    ]


@pytest.mark.slow
def test_gaze_order_beats_random_order(tmp_path):
    overrides = [
        "train.epochs=10",
        "train.batch_size=16",
        "train.learning_rate=0.001",
        "model.embed_dim=32",
        "model.dtype=float64",
    ]
    assert _invoke("synth", tmp_path, overrides=overrides).exit_code == 0
    result = _invoke("ablate", tmp_path, overrides=overrides)
    assert result.exit_code == 0, result.output
    mean_auroc = _report(tmp_path, "ablate")["results"]["mean_auroc"]
    assert mean_auroc["gaze"] >= mean_auroc["random"] + 0.05
    assert mean_auroc["raster"] <= mean_auroc["gaze"]

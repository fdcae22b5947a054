"""The ``gaze-world`` command line.

Every command reads one experiment config (``--config`` plus ``--set``
overrides), resolves paths against ``--workdir``, and writes
``reports/<command>.json``. Failures print a JSON error object as the last
line on stderr and exit with status 1.
"""

from dataclasses import replace
import errno
import json
import logging
import pathlib
import time
from typing import Annotated, Callable, Dict, List, Optional, Tuple

import numpy as np
import typer

from gaze_world import __version__
from gaze_world.checkpoint import load_checkpoint, restore, save_decoder
from gaze_world.config import ConfigError, ExperimentConfig, load_config
from gaze_world.gazedata import GridMismatchError, SyntheticDataset, split_dataset, synth_world
from gaze_world.metrics import LengthMismatchError, compare_scanpaths
from gaze_world.model import GazeWorldModel, init_model
from gaze_world.plotting import write_loss_curve
from gaze_world.probes import run_linear_probe
from gaze_world.scanpath import predict_scanpaths, train_scanpath_decoder
from gaze_world.serialize_data import (
    load_dataset,
    read_scanpath_file,
    save_dataset,
    write_scanpath_file,
)
from gaze_world.train import run_pretrain

_logger = logging.getLogger(__name__)

app = typer.Typer()

DEFAULT_CHECKPOINT = "checkpoints/final.ckpt"
DECODER_CHECKPOINT = "checkpoints/scanpath_decoder.ckpt"

WorkdirOption = Annotated[
    pathlib.Path, typer.Option(help="root directory every other path is relative to")
]
ConfigOption = Annotated[
    Optional[pathlib.Path], typer.Option("--config", help="experiment config (JSON)")
]
SetOption = Annotated[
    Optional[List[str]],
    typer.Option("--set", help="override one config value, e.g. train.epochs=3"),
]
VerboseOption = Annotated[bool, typer.Option("--verbose")]
DebugOption = Annotated[bool, typer.Option("--debug")]


# =============================================================================
# Plumbing
# =============================================================================


def _configure_logging(verbose: bool, debug: bool) -> None:
    if debug:
        logging.basicConfig(level=logging.DEBUG)
    elif verbose:
        logging.basicConfig(level=logging.INFO)
    else:
        logging.basicConfig()


def _error_details(error: Exception) -> List[str]:
    if isinstance(error, ConfigError):
        return list(error.keys)
    if isinstance(error, FileNotFoundError) and error.filename:
        return [str(error.filename)]
    return []


def write_report(
    workdir: pathlib.Path,
    command: str,
    config: ExperimentConfig,
    results: dict,
    wall_clock_seconds: float,
) -> pathlib.Path:
    report = {
        "command": command,
        "version": __version__,
        "seed": config.data.seed,
        "config": config.to_dict(),
        "wall_clock_seconds": wall_clock_seconds,
        "results": results,
    }
    path = workdir / "reports" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _logger.info("wrote %s report to %s", command, path)
    return path


def _run(
    command: str,
    workdir: pathlib.Path,
    config_file: Optional[pathlib.Path],
    overrides: Optional[List[str]],
    verbose: bool,
    debug: bool,
    body: Callable[[ExperimentConfig, pathlib.Path], dict],
) -> None:
    _configure_logging(verbose, debug)
    try:
        config = load_config(
            None if config_file is None else workdir / config_file, overrides or ()
        )
        start = time.perf_counter()
        results = body(config, workdir)
        path = write_report(workdir, command, config, results, time.perf_counter() - start)
    except Exception as e:
        _logger.debug("%s failed", command, exc_info=True)
        error = {"error": type(e).__name__, "message": str(e), "details": _error_details(e)}
        typer.echo(json.dumps(error), err=True)
        raise typer.Exit(code=1)
    typer.echo(str(path))


def _dataset(config: ExperimentConfig, workdir: pathlib.Path) -> SyntheticDataset:
    ds = load_dataset(workdir / config.data.directory)
    if ds.grid is not None and ds.grid != config.model.grid:
        raise GridMismatchError(
            f"dataset grid {ds.grid.rows}x{ds.grid.cols} does not match the model grid "
            f"{config.model.grid_rows}x{config.model.grid_cols}"
        )
    return ds


def _splits(
    config: ExperimentConfig, workdir: pathlib.Path
) -> Tuple[SyntheticDataset, SyntheticDataset, SyntheticDataset]:
    return split_dataset(_dataset(config, workdir), config.data.split)


def _trained_model(workdir: pathlib.Path, checkpoint: pathlib.Path) -> GazeWorldModel:
    model, _ = restore(load_checkpoint(workdir / checkpoint))
    return model


def _probe_curve(
    model: GazeWorldModel,
    train: SyntheticDataset,
    test: SyntheticDataset,
    config: ExperimentConfig,
) -> List[dict]:
    return [
        run_linear_probe(model, train, test, fraction, config.train.seed, config.probe)
        for fraction in config.probe.label_fractions
    ]


# =============================================================================
# Commands
# =============================================================================


@app.command()
def synth(
    workdir: WorkdirOption = pathlib.Path("."),
    config: ConfigOption = None,
    set_: SetOption = None,
    verbose: VerboseOption = False,
    debug: DebugOption = False,
):
    """Generate the synthetic gaze world (PGM images, fixations, labels)."""

    def body(cfg: ExperimentConfig, root: pathlib.Path) -> dict:
        data = cfg.data
        ds = synth_world(
            data.seed,
            data.n_images,
            data.grid,
            rule=data.rule,
            patch_size=data.patch_size,
            fixations_per_image=data.fixations_per_image or None,
            n_blobs=data.n_blobs,
            revisit_probability=data.revisit_probability,
        )
        save_dataset(ds, root / data.directory)
        return {
            "directory": data.directory,
            "n_images": len(ds),
            "n_fixations": sum(len(r.fixations) for r in ds.records),
            "positive_fraction": float(np.mean(ds.labels)),
        }

    _run("synth", workdir, config, set_, verbose, debug, body)


@app.command()
def pretrain(
    workdir: WorkdirOption = pathlib.Path("."),
    config: ConfigOption = None,
    set_: SetOption = None,
    resume: Annotated[
        Optional[pathlib.Path], typer.Option(help="checkpoint to continue training from")
    ] = None,
    verbose: VerboseOption = False,
    debug: DebugOption = False,
):
    """Pretrain the gaze world model on the training split."""

    def body(cfg: ExperimentConfig, root: pathlib.Path) -> dict:
        train, _, _ = _splits(cfg, root)
        resume_from = None if resume is None else load_checkpoint(root / resume)
        result = run_pretrain(cfg.train, cfg.model, train, resume_from, root / "checkpoints")
        reports = root / "reports"
        reports.mkdir(parents=True, exist_ok=True)
        result.report.write_jsonl(reports / "train_log.jsonl")
        steps = [r.step for r in result.report.records]
        write_loss_curve(
            reports / "loss_curve.svg",
            steps,
            {key: result.report.losses(key) for key in ("l_total", "l_ar", "l_sc")},
        )
        return {
            "checkpoint": DEFAULT_CHECKPOINT,
            "resumed_from": None if resume is None else str(resume),
            "training": result.report.summary(),
        }

    _run("pretrain", workdir, config, set_, verbose, debug, body)


@app.command()
def probe(
    workdir: WorkdirOption = pathlib.Path("."),
    config: ConfigOption = None,
    set_: SetOption = None,
    checkpoint: Annotated[
        pathlib.Path, typer.Option(help="pretrained checkpoint")
    ] = pathlib.Path(DEFAULT_CHECKPOINT),
    verbose: VerboseOption = False,
    debug: DebugOption = False,
):
    """Linear-probe frozen features of a checkpoint against a random-init baseline."""

    def body(cfg: ExperimentConfig, root: pathlib.Path) -> dict:
        train, _, test = _splits(cfg, root)
        model = _trained_model(root, checkpoint)
        baseline = init_model(model.config, cfg.train.seed)
        return {
            "checkpoint": str(checkpoint),
            "trained": _probe_curve(model, train, test, cfg),
            "random_init": _probe_curve(baseline, train, test, cfg),
        }

    _run("probe", workdir, config, set_, verbose, debug, body)


@app.command()
def scanpath(
    workdir: WorkdirOption = pathlib.Path("."),
    config: ConfigOption = None,
    set_: SetOption = None,
    checkpoint: Annotated[
        pathlib.Path, typer.Option(help="pretrained checkpoint")
    ] = pathlib.Path(DEFAULT_CHECKPOINT),
    verbose: VerboseOption = False,
    debug: DebugOption = False,
):
    """Train the scanpath decoder on a frozen backbone and score its test predictions."""

    def body(cfg: ExperimentConfig, root: pathlib.Path) -> dict:
        train, val, test = _splits(cfg, root)
        model = _trained_model(root, checkpoint)
        trained = train_scanpath_decoder(model, train, val, cfg.scanpath)
        save_decoder(trained.decoder, root / DECODER_CHECKPOINT)
        predictions, references = predict_scanpaths(model, trained.decoder, test)
        out = root / "scanpaths"
        out.mkdir(parents=True, exist_ok=True)
        write_scanpath_file(out / "predictions.jsonl", predictions)
        write_scanpath_file(out / "references.jsonl", references)
        scores = compare_scanpaths(
            [p for _, _, p in predictions],
            [r for _, _, r in references],
            model.config.grid,
            cfg.metrics.stde_k_max,
        )
        return {
            "checkpoint": str(checkpoint),
            "decoder": DECODER_CHECKPOINT,
            "best_epoch": trained.best_epoch,
            "best_val_distance": trained.best_val_distance,
            "history": trained.history,
            "predictions": "scanpaths/predictions.jsonl",
            "references": "scanpaths/references.jsonl",
            "means": scores["means"],
            "count": scores["count"],
        }

    _run("scanpath", workdir, config, set_, verbose, debug, body)


@app.command()
def metrics(
    pred: Annotated[pathlib.Path, typer.Option(help="predicted scanpaths (JSONL)")],
    truth: Annotated[pathlib.Path, typer.Option(help="reference scanpaths (JSONL)")],
    workdir: WorkdirOption = pathlib.Path("."),
    config: ConfigOption = None,
    set_: SetOption = None,
    verbose: VerboseOption = False,
    debug: DebugOption = False,
):
    """Compare two scanpath files row by row, matched on (image_id, task)."""

    def body(cfg: ExperimentConfig, root: pathlib.Path) -> dict:
        for path in (pred, truth):
            if not (root / path).exists():
                raise FileNotFoundError(errno.ENOENT, "scanpath file does not exist", str(path))
        predicted = {(i, t): s for i, t, s in read_scanpath_file(root / pred)}
        reference = {(i, t): s for i, t, s in read_scanpath_file(root / truth)}
        if predicted.keys() != reference.keys():
            unmatched = sorted(predicted.keys() ^ reference.keys(), key=str)
            raise LengthMismatchError(
                f"{len(unmatched)} scanpaths have no partner, e.g. {unmatched[:3]}"
            )
        keys = sorted(reference, key=lambda k: (k[0], -1 if k[1] is None else k[1]))
        scores = compare_scanpaths(
            [predicted[k] for k in keys],
            [reference[k] for k in keys],
            cfg.data.grid,
            cfg.metrics.stde_k_max,
        )
        for (image_id, task), pair in zip(keys, scores["pairs"]):
            pair.update(image_id=image_id, task=task)
        return scores

    _run("metrics", workdir, config, set_, verbose, debug, body)


@app.command()
def ablate(
    workdir: WorkdirOption = pathlib.Path("."),
    config: ConfigOption = None,
    set_: SetOption = None,
    verbose: VerboseOption = False,
    debug: DebugOption = False,
):
    """Pretrain under each visiting order and seed, then probe every run."""

    def body(cfg: ExperimentConfig, root: pathlib.Path) -> dict:
        train, _, test = _splits(cfg, root)
        runs: Dict[str, List[dict]] = {}
        for ordering in cfg.ablate.orderings:
            runs[ordering] = []
            for seed in cfg.ablate.seeds:
                _logger.info("ablation: ordering=%s seed=%d", ordering, seed)
                train_config = replace(cfg.train, ordering=ordering, seed=seed)
                model = run_pretrain(train_config, cfg.model, train).model
                result = run_linear_probe(
                    model, train, test, cfg.ablate.label_fraction, seed, cfg.probe
                )
                runs[ordering].append(dict(result, seed=seed))
        return {
            "label_fraction": cfg.ablate.label_fraction,
            "runs": runs,
            "mean_auroc": {o: float(np.mean([r["auroc"] for r in rs])) for o, rs in runs.items()},
        }

    _run("ablate", workdir, config, set_, verbose, debug, body)


if __name__ == "__main__":
    app()

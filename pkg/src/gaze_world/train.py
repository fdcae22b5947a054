"""Pretraining loop: per-sample forward passes, gradient accumulation, AdamW, EMA."""

from dataclasses import asdict, dataclass, field
import json
import logging
import math
import pathlib
import time
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from gaze_world import numcore as nc
from gaze_world.checkpoint import Checkpoint, capture, restore, save_checkpoint
from gaze_world.gazedata import (
    ORDERINGS,
    FixationSequence,
    ImageGray,
    SyntheticDataset,
    build_sequence,
    reorder_sequence,
)
from gaze_world.model import GazeWorldModel, ModelConfig, init_model
from gaze_world.optim import OptimizerState, adamw_step, ema_schedule, ema_update

_logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """
    Examples:
        >>> TrainConfig(epochs=0)
        Traceback (most recent call last):
        ...
        ValueError: epochs must be >= 1, got 0
    """

    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 3e-4
    weight_decay: float = 0.04
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lambda_sc: float = 1.0
    ema_start: float = 0.998
    ema_end: float = 1.0
    seed: int = 0
    ordering: str = "gaze"
    log_every: int = 1
    checkpoint_every: int = 0
    max_steps: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0.0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lambda_sc < 0.0:
            raise ValueError(f"lambda_sc must be non-negative, got {self.lambda_sc}")
        if not 0.0 <= self.ema_start <= self.ema_end <= 1.0:
            raise ValueError(
                f"need 0 <= ema_start <= ema_end <= 1, got {self.ema_start}, {self.ema_end}"
            )
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}, expected one of {ORDERINGS}")
        if self.log_every < 1 or self.checkpoint_every < 0 or self.max_steps < 0:
            raise ValueError("log_every must be >= 1; checkpoint_every and max_steps >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# =============================================================================
# Reports
# =============================================================================


class StepResult(NamedTuple):
    l_ar: float
    l_sc: float
    l_total: float
    samples: int
    skipped: int

    @property
    def applied(self) -> bool:
        return self.samples > 0


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_ar: float
    l_sc: float
    l_total: float
    tau: float
    samples: int


@dataclass
class TrainReport:
    records: List[StepRecord] = field(default_factory=list)
    tau_trace: List[float] = field(default_factory=list)
    skipped_samples: int = 0
    skipped_steps: int = 0
    wall_clock_seconds: float = 0.0

    def losses(self, key: str = "l_total") -> List[float]:
        return [getattr(r, key) for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path: pathlib.Path) -> None:
        pathlib.Path(path).write_text(self.to_jsonl())

    def summary(self) -> dict:
        losses = self.losses()
        return {
            "steps": len(self.records),
            "initial_l_total": losses[0] if losses else None,
            "final_l_total": losses[-1] if losses else None,
            "tau_first": self.tau_trace[0] if self.tau_trace else None,
            "tau_last": self.tau_trace[-1] if self.tau_trace else None,
            "skipped_samples": self.skipped_samples,
            "skipped_steps": self.skipped_steps,
            "wall_clock_seconds": self.wall_clock_seconds,
        }


class PretrainResult(NamedTuple):
    model: GazeWorldModel
    optimizer: OptimizerState
    checkpoint: Checkpoint
    report: TrainReport


# =============================================================================
# One step
# =============================================================================


def pretrain_step(
    batch: Sequence[Tuple[ImageGray, FixationSequence]],
    model: GazeWorldModel,
    optimizer: OptimizerState,
    tau: float,
    lambda_sc: Optional[float] = None,
) -> StepResult:
    """Average the per-sample losses, take one AdamW step, then one EMA step.

    Samples with fewer than two visited patches carry no next-fixation target
    and are left out; if that leaves nothing the step is skipped entirely.
    """
    assert batch, "pretrain_step needs a nonempty batch"
    needs_pairs = model.config.objective != "sc_only"
    usable = [(img, seq) for img, seq in batch if not needs_pairs or len(seq) >= 2]
    skipped = len(batch) - len(usable)
    if not usable:
        _logger.warning("skipping step: all %d samples have fewer than 2 visited patches", skipped)
        return StepResult(math.nan, math.nan, math.nan, 0, skipped)

    params = model.online_parameters()
    nc.zero_grad(params)
    scale = 1.0 / len(usable)
    totals = np.zeros(3)
    for image, seq in usable:
        losses = model.sample_losses(image, seq, lambda_sc)
        # a fully visited image has nothing to complete under sc_only
        if losses.l_total.requires_grad:
            nc.backward(losses.l_total * scale)
        totals += [losses.l_ar.item(), losses.l_sc.item(), losses.l_total.item()]
    l_ar, l_sc, l_total = (float(v) for v in totals * scale)
    if not math.isfinite(l_total):
        raise FloatingPointError(f"non-finite training loss {l_total}")

    adamw_step(optimizer, params)
    ema_update(model.target_parameters(), model.encoder_parameters(), tau)
    return StepResult(l_ar, l_sc, l_total, len(usable), skipped)


# =============================================================================
# The loop
# =============================================================================


def prepare_sequences(
    dataset: SyntheticDataset, config: ModelConfig, ordering: str
) -> List[FixationSequence]:
    """Patch sequences under the requested visiting order (same visited sets for all orders)."""
    sequences = []
    for i, record in enumerate(dataset.records):
        seq = build_sequence(record, config.grid)
        rng = np.random.default_rng([dataset.seed, i]) if ordering == "random" else None
        sequences.append(reorder_sequence(seq, ordering, rng))
    return sequences


def _schedule(n_items: int, config: TrainConfig) -> Tuple[int, int]:
    per_epoch = math.ceil(n_items / config.batch_size)
    total = per_epoch * config.epochs
    if config.max_steps:
        total = min(total, config.max_steps)
    return per_epoch, total


def _epoch_batches(n_items: int, config: TrainConfig, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([config.seed, epoch]).permutation(n_items)
    return [order[i : i + config.batch_size] for i in range(0, n_items, config.batch_size)]


def run_pretrain(
    train_config: TrainConfig,
    model_config: ModelConfig,
    dataset: SyntheticDataset,
    resume_from: Optional[Checkpoint] = None,
    checkpoint_dir: Optional[pathlib.Path] = None,
) -> PretrainResult:
    """Train from scratch (or from ``resume_from``) for the configured number of steps.

    Batch composition depends only on the seed and the epoch, so a run
    resumed at step k replays exactly the batches the uninterrupted run saw
    from step k on.
    """
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    start = time.perf_counter()
    sequences = prepare_sequences(dataset, model_config, train_config.ordering)
    per_epoch, total_steps = _schedule(len(dataset), train_config)

    report = TrainReport()
    if resume_from is not None:
        model, optimizer = restore(resume_from)
        step = resume_from.step
        report.skipped_samples = int(resume_from.extra.get("skipped_samples", 0))
        report.skipped_steps = int(resume_from.extra.get("skipped_steps", 0))
        _logger.info("resuming at step %d of %d", step, total_steps)
    else:
        model = init_model(model_config, train_config.seed)
        optimizer = OptimizerState(
            lr=train_config.learning_rate,
            weight_decay=train_config.weight_decay,
            betas=train_config.betas,
            eps=train_config.eps,
        )
        step = 0

    def snapshot():
        return capture(
            model,
            optimizer,
            step,
            dataset.seed,
            {
                "train": train_config.to_dict(),
                "skipped_samples": report.skipped_samples,
                "skipped_steps": report.skipped_steps,
            },
        )

    while step < total_steps:
        epoch, offset = divmod(step, per_epoch)
        indices = _epoch_batches(len(dataset), train_config, epoch)[offset]
        if total_steps == 1:
            tau = train_config.ema_end
        else:
            tau = ema_schedule(
                step, total_steps - 1, train_config.ema_start, train_config.ema_end
            )
        batch = [(dataset.images[i], sequences[i]) for i in indices]
        result = pretrain_step(batch, model, optimizer, tau, train_config.lambda_sc)

        report.skipped_samples += result.skipped
        if result.skipped:
            _logger.warning(
                "step %d: %d samples with fewer than 2 visited patches (%d so far)",
                step,
                result.skipped,
                report.skipped_samples,
            )
        if result.applied:
            report.tau_trace.append(tau)
            report.records.append(
                StepRecord(step, epoch, result.l_ar, result.l_sc, result.l_total, tau, result.samples)
            )
            if step % train_config.log_every == 0:
                _logger.info(
                    "step=%d l_ar=%.6f l_sc=%.6f l_total=%.6f tau=%.6f",
                    step,
                    result.l_ar,
                    result.l_sc,
                    result.l_total,
                    tau,
                )
        else:
            report.skipped_steps += 1
        step += 1

        if checkpoint_dir is not None and train_config.checkpoint_every:
            if step % train_config.checkpoint_every == 0 and step < total_steps:
                save_checkpoint(snapshot(), pathlib.Path(checkpoint_dir) / f"step_{step:06d}.ckpt")

    final = snapshot()
    if checkpoint_dir is not None:
        save_checkpoint(final, pathlib.Path(checkpoint_dir) / "final.ckpt")
    report.wall_clock_seconds = time.perf_counter() - start
    return PretrainResult(model, optimizer, final, report)

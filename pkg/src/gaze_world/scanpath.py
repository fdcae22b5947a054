"""Supervised scanpath decoding on top of the frozen backbone.

A small causal transformer rolls out a search scanpath for one image and
one search task. Every step's fixation token first cross-attends to the
frozen, projected patch tokens; three heads then give the next cell
(classification over the grid), its dwell and a stop signal. Only the
decoder is trained.
"""

from dataclasses import asdict, dataclass
import logging
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from gaze_world import numcore as nc
from gaze_world.gazedata import (
    Fixation,
    GridSpec,
    ImageGray,
    Scanpath,
    SyntheticDataset,
    build_sequence,
    intensity_order,
    patch_index,
    patch_intensities,
)
from gaze_world.layers import (
    CrossAttentionBlock,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    causal_mask,
)
from gaze_world.metrics import LengthMismatchError
from gaze_world.model import GazeWorldModel
from gaze_world.numcore import Tensor
from gaze_world.optim import OptimizerState, adamw_step, cosine_lr

_logger = logging.getLogger(__name__)

START = (0.5, 0.5)


class UnknownTaskError(ValueError):
    pass


@dataclass
class ScanpathDecoderConfig:
    model_dim: int = 32
    layers: int = 2
    heads: int = 4
    n_tasks: int = 3
    steps: int = 7
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    lr_min: float = 1e-6
    duration_weight: float = 0.1
    termination_weight: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads={self.heads}")
        for name in ("layers", "n_tasks", "steps", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.learning_rate > 0.0 or self.lr_min < 0.0:
            raise ValueError("learning_rate must be positive and lr_min non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @classmethod
    def full_scale(cls) -> "ScanpathDecoderConfig":
        return cls(model_dim=512, layers=6, heads=8, n_tasks=13)

    def to_dict(self) -> dict:
        return asdict(self)


class DecoderOutput(NamedTuple):
    spatial: Tensor
    duration: Tensor
    termination: Tensor


class ScanpathTarget(NamedTuple):
    cells: np.ndarray
    log_durations: np.ndarray
    termination: np.ndarray


class SearchExample(NamedTuple):
    image_index: int
    task: int
    scanpath: Scanpath


# =============================================================================
# Decoder
# =============================================================================


class ScanpathDecoder(Module):
    def __init__(
        self, config: ScanpathDecoderConfig, feature_dim: int, grid: GridSpec, seed: int = 0
    ):
        rng = np.random.default_rng(seed)
        dtype, d = np.dtype(config.dtype), config.model_dim
        self.feature_proj = Linear(feature_dim, d, rng, dtype)
        self.task_embed = Embedding(config.n_tasks, d, rng, dtype)
        self.fix_proj = Linear(3, d, rng, dtype)
        self.time_embed = Embedding(config.steps, d, rng, dtype)
        self.cross = CrossAttentionBlock(d, config.heads, rng, dtype)
        self.blocks = [TransformerBlock(d, config.heads, rng, dtype) for _ in range(config.layers)]
        self.norm = LayerNorm(d, dtype)
        self.spatial_head = Linear(d, grid.n, rng, dtype)
        self.duration_head = Linear(d, 1, rng, dtype)
        self.termination_head = Linear(d, 1, rng, dtype)
        self.config = config
        self.feature_dim = feature_dim
        self.grid = grid

    def __call__(self, features: np.ndarray, task: int, inputs: np.ndarray) -> DecoderOutput:
        """``inputs`` (T, 3) holds (x, y, log(1 + dwell)) of the fixation before each step."""
        if not 0 <= task < self.config.n_tasks:
            raise UnknownTaskError(f"task {task} is not in [0, {self.config.n_tasks})")
        length = inputs.shape[0]
        if not 1 <= length <= self.config.steps:
            raise LengthMismatchError(f"{length} decoder steps, at most {self.config.steps} allowed")
        dtype = np.dtype(self.config.dtype)
        context = self.feature_proj(Tensor(features, dtype=dtype))
        x = (
            self.fix_proj(Tensor(inputs, dtype=dtype))
            + self.time_embed(np.arange(length))
            + self.task_embed(np.full(length, task))
        )
        x = self.cross(x, context)
        mask = causal_mask(length)
        for block in self.blocks:
            x = block(x, mask)
        x = self.norm(x)
        return DecoderOutput(self.spatial_head(x), self.duration_head(x), self.termination_head(x))


def backbone_features(model: GazeWorldModel, image: ImageGray) -> np.ndarray:
    """Frozen online patch tokens (N, d)."""
    with nc.no_grad():
        return model.encode(image).data.copy()


# =============================================================================
# Targets and loss
# =============================================================================


def scanpath_target(scanpath: Scanpath, grid: GridSpec) -> ScanpathTarget:
    """
    Examples:
        >>> t = scanpath_target(Scanpath(((0.1, 0.1, 0.5), (0.9, 0.9, 1.0))), GridSpec(2, 2))
        >>> t.cells.tolist(), t.termination.tolist()
        ([0, 3], [0.0, 1.0])
    """
    cells = np.array([patch_index(f.x, f.y, grid) for f in scanpath.fixations], dtype=np.int64)
    log_durations = np.log1p([f.dur for f in scanpath.fixations])
    stop = len(scanpath) - 1 if scanpath.termination_step is None else scanpath.termination_step
    termination = np.zeros(len(scanpath))
    termination[min(stop, len(scanpath) - 1)] = 1.0
    return ScanpathTarget(cells, np.asarray(log_durations, dtype=np.float64), termination)


def teacher_inputs(scanpath: Scanpath, grid: GridSpec) -> np.ndarray:
    """Start token followed by the ground-truth prefix, at cell centres."""
    rows = [(START[0], START[1], 0.0)]
    for f in scanpath.fixations[:-1]:
        x, y = grid.cell_center(patch_index(f.x, f.y, grid))
        rows.append((x, y, float(np.log1p(f.dur))))
    return np.array(rows, dtype=np.float64)


def scanpath_loss(
    output: DecoderOutput,
    target: ScanpathTarget,
    duration_weight: float = 0.1,
    termination_weight: float = 0.1,
) -> Tensor:
    """CE(cell) + 0.1 * L1(log dwell) + 0.1 * BCE(stop).

    Examples:
        >>> import math
        >>> out = DecoderOutput(Tensor(np.zeros((1, 16))), Tensor([[0.0]]), Tensor([[0.0]]))
        >>> target = ScanpathTarget(np.array([5]), np.array([0.0]), np.array([0.0]))
        >>> round(scanpath_loss(out, target).item() - 0.1 * math.log(2.0), 12) == round(math.log(16), 12)
        True
    """
    length = output.spatial.shape[0]
    if not (len(target.cells) == len(target.log_durations) == len(target.termination) == length):
        raise LengthMismatchError(
            f"decoder produced {length} steps, the reference has {len(target.cells)}"
        )
    dtype = output.spatial.dtype
    spatial = nc.cross_entropy(output.spatial, target.cells)
    duration = nc.l1_loss(
        output.duration.reshape(length), Tensor(target.log_durations, dtype=dtype)
    )
    termination = nc.bce_with_logits(output.termination.reshape(length), target.termination)
    return spatial + duration * duration_weight + termination * termination_weight


# =============================================================================
# Search tasks
# =============================================================================


def search_scanpaths(
    dataset: SyntheticDataset, grid: GridSpec, n_tasks: int, steps: int = 7
) -> List[SearchExample]:
    """One reference scanpath per (image, task).

    Task t searches for the t-th brightest cell. The reference visits the
    target first and then follows the recorded reading order.
    """
    if n_tasks > grid.n:
        raise ValueError(f"{n_tasks} search tasks need at least as many cells, grid has {grid.n}")
    examples = []
    for i, (image, record) in enumerate(zip(dataset.images, dataset.records)):
        targets = intensity_order(patch_intensities(image, grid), n_tasks)
        seq = build_sequence(record, grid)
        dwell = dict(zip(seq.visited, seq.dwell))
        for task, target in enumerate(targets):
            cells = [target] + [p for p in seq.visited if p != target]
            cells = cells[:steps]
            fixations = [
                Fixation(*grid.cell_center(p), dwell.get(p, float(np.mean(seq.dwell))))
                for p in cells
            ]
            examples.append(SearchExample(i, task, Scanpath(tuple(fixations), len(cells) - 1)))
    return examples


# =============================================================================
# Rollout
# =============================================================================


def rollout(
    decoder: ScanpathDecoder, features: np.ndarray, task: int, steps: Optional[int] = None
) -> Scanpath:
    steps = decoder.config.steps if steps is None else steps
    if not 1 <= steps <= decoder.config.steps:
        raise ValueError(f"steps must lie in [1, {decoder.config.steps}], got {steps}")
    grid = decoder.grid
    inputs = [(START[0], START[1], 0.0)]
    fixations, termination_step = [], None
    with nc.no_grad():
        for step in range(steps):
            output = decoder(features, task, np.array(inputs))
            cell = int(np.argmax(output.spatial.data[-1]))
            x, y = grid.cell_center(cell)
            log_dwell = max(float(output.duration.data[-1, 0]), 0.0)
            fixations.append(Fixation(x, y, float(np.expm1(log_dwell))))
            if termination_step is None and output.termination.data[-1, 0] > 0.0:
                termination_step = step
            inputs.append((x, y, log_dwell))
    # the stop head is recorded, never obeyed
    return Scanpath(tuple(fixations), termination_step)


def decode_scanpath(
    image: ImageGray,
    task: int,
    decoder: ScanpathDecoder,
    model: GazeWorldModel,
    steps: int = 7,
) -> Scanpath:
    """Exactly ``steps`` fixations at cell centres, starting from the image centre.

    Examples:
        >>> from gaze_world.gazedata import synth_world
        >>> from gaze_world.model import ModelConfig
        >>> model = GazeWorldModel(ModelConfig(grid_rows=2, grid_cols=2, patch_size=2,
        ...     embed_dim=8, encoder_heads=2, predictor_heads=2, completion_heads=2))
        >>> decoder = ScanpathDecoder(ScanpathDecoderConfig(model_dim=8, heads=2), 8, GridSpec(2, 2))
        >>> image = synth_world(0, 1, GridSpec(2, 2), patch_size=2).images[0]
        >>> len(decode_scanpath(image, 0, decoder, model))
        7
        >>> decode_scanpath(image, 5, decoder, model)
        Traceback (most recent call last):
        ...
        gaze_world.scanpath.UnknownTaskError: task 5 is not in [0, 3)
    """
    if not 0 <= task < decoder.config.n_tasks:
        raise UnknownTaskError(f"task {task} is not in [0, {decoder.config.n_tasks})")
    return rollout(decoder, backbone_features(model, image), task, steps)


# =============================================================================
# Training
# =============================================================================


class DecoderTrainResult(NamedTuple):
    decoder: ScanpathDecoder
    history: List[dict]
    best_epoch: int
    best_val_distance: float


def mean_fixation_distance(pred: Scanpath, truth: Scanpath) -> float:
    """Mean Euclidean distance over the positions both scanpaths reach."""
    k = min(len(pred), len(truth))
    return float(np.linalg.norm(pred.points()[:k] - truth.points()[:k], axis=1).mean())


def _validation_distance(
    decoder: ScanpathDecoder,
    features: Dict[int, np.ndarray],
    examples: List[SearchExample],
) -> float:
    distances = [
        mean_fixation_distance(rollout(decoder, features[ex.image_index], ex.task), ex.scanpath)
        for ex in examples
    ]
    return float(np.mean(distances))


def train_scanpath_decoder(
    model: GazeWorldModel,
    train: SyntheticDataset,
    val: SyntheticDataset,
    config: Optional[ScanpathDecoderConfig] = None,
) -> DecoderTrainResult:
    """Teacher-forced AdamW training with per-epoch cosine annealing.

    The returned decoder carries the parameters of the epoch with the
    lowest validation fixation distance.
    """
    config = config or ScanpathDecoderConfig()
    grid = model.config.grid
    decoder = ScanpathDecoder(config, model.config.embed_dim, grid, config.seed)
    params = decoder.parameters()
    optimizer = OptimizerState(
        lr=config.learning_rate, weight_decay=config.weight_decay, betas=(0.9, 0.999)
    )

    train_examples = search_scanpaths(train, grid, config.n_tasks, config.steps)
    val_examples = search_scanpaths(val, grid, config.n_tasks, config.steps)
    train_features = {i: backbone_features(model, image) for i, image in enumerate(train.images)}
    val_features = {i: backbone_features(model, image) for i, image in enumerate(val.images)}
    prepared = [
        (ex, teacher_inputs(ex.scanpath, grid), scanpath_target(ex.scanpath, grid))
        for ex in train_examples
    ]

    history, best = [], (np.inf, -1, None)
    for epoch in range(config.epochs):
        optimizer.lr = cosine_lr(epoch, config.epochs, config.learning_rate, config.lr_min)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(prepared))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[start : start + config.batch_size]]
            nc.zero_grad(params)
            for ex, inputs, target in batch:
                output = decoder(train_features[ex.image_index], ex.task, inputs)
                loss = scanpath_loss(
                    output, target, config.duration_weight, config.termination_weight
                )
                nc.backward(loss * (1.0 / len(batch)))
                epoch_loss += loss.item()
            adamw_step(optimizer, params)
        val_distance = _validation_distance(decoder, val_features, val_examples)
        history.append(
            {
                "epoch": epoch,
                "lr": optimizer.lr,
                "train_loss": epoch_loss / max(len(prepared), 1),
                "val_distance": val_distance,
            }
        )
        _logger.info(
            "decoder epoch %d: loss %.5f, val distance %.5f",
            epoch,
            history[-1]["train_loss"],
            val_distance,
        )
        if val_distance < best[0]:
            best = (val_distance, epoch, {k: p.data.copy() for k, p in params.items()})

    for name, p in params.items():
        p.data[...] = best[2][name]
    return DecoderTrainResult(decoder, history, best[1], best[0])


def predict_scanpaths(
    model: GazeWorldModel,
    decoder: ScanpathDecoder,
    dataset: SyntheticDataset,
) -> Tuple[List[Tuple[str, int, Scanpath]], List[Tuple[str, int, Scanpath]]]:
    """(predictions, references) rows of (image_id, task, scanpath) for every search example."""
    examples = search_scanpaths(dataset, decoder.grid, decoder.config.n_tasks, decoder.config.steps)
    features: Dict[int, np.ndarray] = {}
    predictions, references = [], []
    for ex in examples:
        if ex.image_index not in features:
            features[ex.image_index] = backbone_features(model, dataset.images[ex.image_index])
        image_id = dataset.images[ex.image_index].id
        predictions.append((image_id, ex.task, rollout(decoder, features[ex.image_index], ex.task)))
        references.append((image_id, ex.task, ex.scanpath))
    return predictions, references

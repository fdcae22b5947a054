"""The gaze-ordered world model.

An online encoder turns an image into one token per grid cell. The tokens
of the cells a reader visited are fused with where/when/how-long cues and
fed, in first-visit order, to a causal predictor that guesses the *target
encoder's* token of the next visited cell. The predictor's context then
drives a cross-attention decoder that fills in the tokens of every cell
the reader never looked at. The target encoder is an EMA copy of the
online encoder and never receives gradients.
"""

import copy
from dataclasses import asdict, dataclass
import logging
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from gaze_world import numcore as nc
from gaze_world.gazedata import (
    FixationSequence,
    GridMismatchError,
    GridSpec,
    ImageGray,
    unvisited_set,
)
from gaze_world.layers import (
    MLP,
    CrossAttentionBlock,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    TransformerBlock,
    causal_mask,
    parameter,
)
from gaze_world.numcore import Tensor

_logger = logging.getLogger(__name__)

OBJECTIVES = ("full", "ar_only", "sc_only")


class SequenceTooLongError(ValueError):
    pass


class RankOverflowError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


# =============================================================================
# Configuration
# =============================================================================


@dataclass
class ModelConfig:
    """Desk-scale defaults; see :meth:`full_scale` for the full-size constants.

    Examples:
        >>> ModelConfig().max_seq_len
        16
        >>> ModelConfig(embed_dim=30, encoder_heads=4)
        Traceback (most recent call last):
        ...
        ValueError: embed_dim 30 is not divisible by encoder_heads=4
    """

    grid_rows: int = 4
    grid_cols: int = 4
    patch_size: int = 4
    embed_dim: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 4
    predictor_layers: int = 2
    predictor_heads: int = 4
    completion_layers: int = 2
    completion_heads: int = 4
    mlp_ratio: int = 2
    max_seq_len: int = 0
    smooth_l1_beta: float = 1.0
    lambda_sc: float = 1.0
    objective: str = "full"
    symmetric_ln: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        GridSpec(self.grid_rows, self.grid_cols)
        for heads in ("encoder_heads", "predictor_heads", "completion_heads"):
            if self.embed_dim % getattr(self, heads):
                raise ValueError(
                    f"embed_dim {self.embed_dim} is not divisible by {heads}={getattr(self, heads)}"
                )
        if self.max_seq_len == 0:
            self.max_seq_len = self.grid_rows * self.grid_cols
        if self.max_seq_len < self.grid_rows * self.grid_cols:
            raise ValueError(
                f"max_seq_len {self.max_seq_len} is below the patch count "
                f"{self.grid_rows * self.grid_cols}"
            )
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}, expected one of {OBJECTIVES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.smooth_l1_beta <= 0.0:
            raise ValueError("smooth_l1_beta must be positive")
        if self.lambda_sc < 0.0:
            raise ValueError("lambda_sc must be non-negative")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """Constants of the full-size setup (224px input, 768-d tokens, 8x12 predictor)."""
        return cls(
            grid_rows=7,
            grid_cols=7,
            patch_size=32,
            embed_dim=768,
            encoder_layers=12,
            encoder_heads=12,
            predictor_layers=8,
            predictor_heads=12,
            completion_layers=2,
            completion_heads=12,
            mlp_ratio=4,
        )

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.grid_rows, self.grid_cols)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


# =============================================================================
# Components
# =============================================================================


class PatchEncoder(Module):
    """Linear patch embedding + learned positions + pre-norm transformer."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dtype, d = config.np_dtype, config.embed_dim
        self.patch_embed = Linear(config.patch_size**2, d, rng, dtype)
        self.pos_embed = parameter(rng.normal(0.0, 0.1, size=(config.grid.n, d)), dtype)
        self.blocks = [
            TransformerBlock(d, config.encoder_heads, rng, dtype, config.mlp_ratio)
            for _ in range(config.encoder_layers)
        ]
        self.norm = LayerNorm(d, dtype)
        self._config = config

    def patchify(self, image: ImageGray) -> np.ndarray:
        """(N, patch_size**2) pixel rows in raster order of the grid."""
        c = self._config
        if image.height != c.grid_rows * c.patch_size or image.width != c.grid_cols * c.patch_size:
            raise GridMismatchError(
                f"image {image.id!r} is {image.width}x{image.height}, the model expects "
                f"{c.grid_cols * c.patch_size}x{c.grid_rows * c.patch_size}"
            )
        p = c.patch_size
        cells = image.pixels.reshape(c.grid_rows, p, c.grid_cols, p).transpose(0, 2, 1, 3)
        return cells.reshape(c.grid.n, p * p)

    def patch_tokens(self, image: ImageGray) -> Tensor:
        return self.patch_embed(Tensor(self.patchify(image), dtype=self._config.np_dtype))

    def __call__(self, image: ImageGray) -> Tensor:
        x = self.patch_tokens(image) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class FixationEmbedder(Module):
    """h = W_z z + e_row + e_col + E_rank[i] + w_dur * log(1 + dwell)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dtype, d = config.np_dtype, config.embed_dim
        self.w_z = Linear(d, d, rng, dtype, bias=False)
        self.row_embed = Embedding(config.grid_rows, d, rng, dtype)
        self.col_embed = Embedding(config.grid_cols, d, rng, dtype)
        self.rank_embed = Embedding(config.max_seq_len, d, rng, dtype)
        self.w_dur = parameter(rng.normal(0.0, 0.1, size=(1, d)), dtype)
        self._config = config

    def spatial(self, patches: Sequence[int]) -> Tensor:
        patches = np.asarray(patches, dtype=np.int64)
        rows, cols = np.divmod(patches, self._config.grid_cols)
        return self.row_embed(rows) + self.col_embed(cols)

    def __call__(
        self, z: Tensor, patches: Sequence[int], ranks: Sequence[int], dwells: Sequence[float]
    ) -> Tensor:
        ranks = np.asarray(ranks, dtype=np.int64)
        dwells = np.asarray(dwells, dtype=np.float64)
        if ranks.size and ranks.max() >= self._config.max_seq_len:
            raise RankOverflowError(
                f"rank {int(ranks.max())} exceeds the maximum sequence length "
                f"{self._config.max_seq_len}"
            )
        if np.any(dwells <= 0.0):
            raise ValueError(f"dwell durations must be positive, got {dwells.tolist()}")
        duration = Tensor(np.log1p(dwells)[:, None], dtype=self._config.np_dtype)
        return self.w_z(z) + self.spatial(patches) + self.rank_embed(ranks) + duration * self.w_dur


class CausalPredictor(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dtype, d = config.np_dtype, config.embed_dim
        self.blocks = [
            TransformerBlock(d, config.predictor_heads, rng, dtype, config.mlp_ratio)
            for _ in range(config.predictor_layers)
        ]
        self.norm = LayerNorm(d, dtype)

    def __call__(self, tokens: Tensor, mask: np.ndarray) -> Tensor:
        x = tokens
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x)


class CompletionDecoder(Module):
    """One query per unvisited cell (mask token + spatial embedding), cross-attending to H."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dtype, d = config.np_dtype, config.embed_dim
        self.mask_token = parameter(rng.normal(0.0, 0.1, size=(1, d)), dtype)
        self.blocks = [
            CrossAttentionBlock(d, config.completion_heads, rng, dtype, config.mlp_ratio)
            for _ in range(config.completion_layers)
        ]
        self.norm = LayerNorm(d, dtype)

    def __call__(self, spatial: Tensor, context: Tensor) -> Tensor:
        x = spatial + self.mask_token
        for block in self.blocks:
            x = block(x, context)
        return self.norm(x)


class Readout(Module):
    """Readout token for probing, plus its projection back to d (starts as identity).

    :func:`gaze_world.probes.fit_readout` trains copies of both on probe labels.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dtype, d = config.np_dtype, config.embed_dim
        self.token = parameter(rng.normal(0.0, 0.1, size=(1, d)), dtype)
        self.proj = Linear(d, d, rng, dtype)
        self.proj.weight.data[...] = np.eye(d, dtype=dtype)


class Prediction(NamedTuple):
    predictions: Optional[Tensor]
    context: Tensor


class SampleLosses(NamedTuple):
    l_ar: Tensor
    l_sc: Tensor
    l_total: Tensor


# =============================================================================
# Losses
# =============================================================================


def loss_ar(
    predictions: Optional[Tensor], targets: Tensor, beta: float = 1.0, symmetric_ln: bool = False
) -> Tensor:
    """SmoothL1(LN(z_hat), sg(z_bar)) averaged over positions 2..L.

    Examples:
        >>> target = nc.layer_norm(Tensor([[1.0, -1.0]]))
        >>> loss_ar(Tensor([[3.0, 1.0]]), target).item()
        0.0
        >>> loss_ar(None, target)
        Traceback (most recent call last):
        ...
        gaze_world.model.SequenceTooShortError: next-fixation prediction needs at least two visited patches
    """
    if predictions is None or predictions.shape[0] == 0:
        raise SequenceTooShortError("next-fixation prediction needs at least two visited patches")
    target = nc.stop_gradient(targets)
    if symmetric_ln:
        target = nc.layer_norm(target)
    return nc.smooth_l1(nc.layer_norm(predictions), target, beta)


def loss_sc(completions: Optional[Tensor], targets: Optional[Tensor], beta: float = 1.0) -> Tensor:
    """SmoothL1(LN(r_hat), sg(LN(z_bar))) averaged over unvisited cells; 0 when none.

    Examples:
        >>> loss_sc(None, None).item()
        0.0
        >>> z = Tensor([[0.5, 2.0]])
        >>> loss_sc(z, z).item()
        0.0
    """
    if completions is None or completions.shape[0] == 0:
        return Tensor(0.0, dtype=None if completions is None else completions.dtype)
    return nc.smooth_l1(
        nc.layer_norm(completions), nc.layer_norm(nc.stop_gradient(targets)), beta
    )


def loss_total(l_ar: Tensor, l_sc: Tensor, lambda_sc: float = 1.0) -> Tensor:
    """
    Examples:
        >>> round(loss_total(Tensor(0.3), Tensor(0.2), 1.0).item(), 12)
        0.5
        >>> loss_total(Tensor(0.3), Tensor(0.2), 0.0).item()
        0.3
    """
    if lambda_sc < 0.0:
        raise ValueError(f"lambda must be non-negative, got {lambda_sc}")
    return l_ar + l_sc * lambda_sc


# =============================================================================
# Model
# =============================================================================


class GazeWorldModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = PatchEncoder(config, rng)
        self.embedder = FixationEmbedder(config, rng)
        self.predictor = CausalPredictor(config, rng)
        self.head = MLP(config.embed_dim, config.mlp_ratio * config.embed_dim, rng, config.np_dtype)
        self.completion = CompletionDecoder(config, rng)
        self.readout = Readout(config, rng)
        self.target_encoder = copy.deepcopy(self.encoder)
        for p in self.target_encoder.parameters().values():
            p.requires_grad = False
            p.grad = None
        self.config = config

    # parameter groups ---------------------------------------------------------

    def online_parameters(self) -> dict:
        """Everything the pretraining optimiser updates."""
        groups = {
            "encoder": self.encoder,
            "embedder": self.embedder,
            "predictor": self.predictor,
            "head": self.head,
            "completion": self.completion,
        }
        return {
            f"{prefix}.{name}": p
            for prefix, module in groups.items()
            for name, p in module.named_parameters()
        }

    def target_parameters(self) -> dict:
        return self.target_encoder.parameters()

    def encoder_parameters(self) -> dict:
        return self.encoder.parameters()

    # forward pieces -----------------------------------------------------------

    def encode(self, image: ImageGray) -> Tensor:
        return self.encoder(image)

    def target_encode(self, image: ImageGray) -> Tensor:
        with nc.no_grad():
            return self.target_encoder(image)

    def embed_fixation(self, z: Tensor, patch: int, rank: int, dwell: float) -> Tensor:
        d = self.config.embed_dim
        return self.embedder(z.reshape(1, d), [patch], [rank], [dwell]).reshape(d)

    def embed_sequence(self, tokens: Tensor, seq: FixationSequence) -> Tensor:
        return self.embedder(
            nc.take(tokens, seq.visited), seq.visited, np.arange(len(seq)), seq.dwell
        )

    def predict_sequence(self, fixation_tokens: Tensor) -> Prediction:
        """Run the causal predictor; predictions[i-2] is the guess for s_i (i = 2..L)."""
        length = fixation_tokens.shape[0]
        if length > self.config.max_seq_len:
            raise SequenceTooLongError(
                f"{length} fixations exceed the maximum sequence length {self.config.max_seq_len}"
            )
        context = self.predictor(fixation_tokens, causal_mask(length))
        if length < 2:
            return Prediction(None, context)
        return Prediction(self.head(nc.take(context, np.arange(length - 1))), context)

    def complete_unvisited(self, context: Tensor, unvisited: Iterable[int]) -> Optional[Tensor]:
        """One prediction per unvisited cell, in ascending cell order."""
        cells = sorted(unvisited)
        if not cells:
            return None
        return self.completion(self.embedder.spatial(cells), context)

    def readout_features(self, tokens: Tensor, readout: Optional[Readout] = None) -> Tensor:
        """Predictor output of the readout token over the raster surrogate, projected to d.

        ``readout`` swaps in another token and projection (a probe-trained copy).
        """
        readout = self.readout if readout is None else readout
        n = self.config.grid.n
        cells = np.arange(n)
        surrogate = self.embedder(nc.take(tokens, cells), cells, cells, np.ones(n))
        sequence = nc.concat([readout.token, surrogate], axis=0)
        mask = causal_mask(n + 1)
        # the readout row sees the whole surrogate, every other row stays causal
        mask[0, :] = False
        hidden = self.predictor(sequence, mask)
        return readout.proj(nc.take(hidden, [0])).reshape(self.config.embed_dim)

    # losses -------------------------------------------------------------------

    def sample_losses(
        self, image: ImageGray, seq: FixationSequence, lambda_sc: Optional[float] = None
    ) -> SampleLosses:
        c = self.config
        lam = c.lambda_sc if lambda_sc is None else lambda_sc
        if c.objective != "sc_only" and len(seq) < 2:
            raise SequenceTooShortError(
                f"sequence of length {len(seq)} has no next-fixation targets"
            )
        tokens = self.encode(image)
        targets = self.target_encode(image)
        prediction = self.predict_sequence(self.embed_sequence(tokens, seq))
        zero = Tensor(0.0, dtype=c.np_dtype)

        if c.objective == "sc_only":
            l_ar = zero
        else:
            l_ar = loss_ar(
                prediction.predictions,
                nc.take(targets, seq.visited[1:]),
                c.smooth_l1_beta,
                c.symmetric_ln,
            )
        if c.objective == "ar_only":
            return SampleLosses(l_ar, zero, l_ar)

        cells = sorted(unvisited_set(seq))
        if cells:
            completions = self.complete_unvisited(prediction.context, cells)
            l_sc = loss_sc(completions, nc.take(targets, cells), c.smooth_l1_beta)
        else:
            l_sc = zero
        if c.objective == "sc_only":
            return SampleLosses(l_ar, l_sc, l_sc)
        return SampleLosses(l_ar, l_sc, loss_total(l_ar, l_sc, lam))


def init_model(config: ModelConfig, seed: int = 0) -> GazeWorldModel:
    model = GazeWorldModel(config, seed)
    _logger.info(
        "initialised model: %d online parameters (seed=%d)",
        sum(p.size for p in model.online_parameters().values()),
        seed,
    )
    return model

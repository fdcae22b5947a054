"""Frozen-feature linear probing.

Features never touch gaze data: half A is the mean of the online patch
tokens, half B is what the frozen predictor writes into a readout token
prepended to the raster-order surrogate sequence. The readout token and its
projection are fitted on the probe's own training labels before extraction.
"""

import copy
from dataclasses import asdict, dataclass
import logging
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.multiclass import OneVsRestClassifier
from sklearn.preprocessing import StandardScaler

from gaze_world import numcore as nc
from gaze_world.gazedata import ImageGray, SyntheticDataset, subsample
from gaze_world.layers import Linear
from gaze_world.metrics import SingleClassError, accuracy, auroc, f1
from gaze_world.model import GazeWorldModel, Readout
from gaze_world.optim import OptimizerState, adamw_step

_logger = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    C: float = 1.0
    max_iter: int = 2000
    tol: float = 1e-6
    label_fractions: Tuple[float, ...] = (0.01, 0.1, 1.0)
    zero_half_b: bool = False
    readout_epochs: int = 20
    readout_lr: float = 1e-2

    def __post_init__(self):
        self.label_fractions = tuple(self.label_fractions)
        if self.C <= 0.0:
            raise ValueError(f"C must be positive, got {self.C}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.label_fractions or any(not 0.0 < f <= 1.0 for f in self.label_fractions):
            raise ValueError(f"label fractions must lie in (0, 1], got {self.label_fractions}")
        if self.readout_epochs < 0 or not self.readout_lr > 0.0:
            raise ValueError("readout_epochs must be >= 0 and readout_lr positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_fractions"] = list(self.label_fractions)
        return d


# =============================================================================
# Features
# =============================================================================


def extract_probe_features(
    image: ImageGray, model: GazeWorldModel, readout: Optional[Readout] = None
) -> np.ndarray:
    """2d-long feature vector of one image.

    Examples:
        >>> from gaze_world.gazedata import GridSpec, synth_world
        >>> from gaze_world.model import ModelConfig
        >>> model = GazeWorldModel(ModelConfig(grid_rows=2, grid_cols=2, patch_size=2,
        ...     embed_dim=8, encoder_heads=2, predictor_heads=2, completion_heads=2))
        >>> image = synth_world(0, 1, GridSpec(2, 2), patch_size=2).images[0]
        >>> extract_probe_features(image, model).shape
        (16,)
    """
    with nc.no_grad():
        tokens = model.encode(image)
        half_a = tokens.data.mean(axis=0)
        half_b = model.readout_features(tokens, readout).data
    return np.concatenate([half_a, half_b]).astype(np.float64)


def probe_feature_matrix(
    dataset: SyntheticDataset, model: GazeWorldModel, readout: Optional[Readout] = None
) -> np.ndarray:
    return np.stack([extract_probe_features(image, model, readout) for image in dataset.images])


class ReadoutFit(NamedTuple):
    readout: Readout
    losses: List[float]


def fit_readout(
    model: GazeWorldModel,
    dataset: SyntheticDataset,
    config: Optional[ProbeConfig] = None,
    seed: int = 0,
) -> ReadoutFit:
    """Train a copy of the readout token and projection on ``dataset``'s labels.

    A throwaway logistic head sits on the projected readout output; full-batch
    AdamW runs for ``config.readout_epochs`` steps while every model
    parameter stays frozen. ``model`` itself is left untouched.
    """
    config = config or ProbeConfig()
    labels = np.asarray(dataset.labels)
    if len(np.unique(labels)) < 2:
        raise SingleClassError(f"readout training needs two classes, got {np.unique(labels).tolist()}")
    readout = copy.deepcopy(model.readout)
    d = model.config.embed_dim
    head = Linear(d, 1, np.random.default_rng(seed), model.config.np_dtype)
    trained = {
        **{f"readout.{name}": p for name, p in readout.named_parameters()},
        **{f"head.{name}": p for name, p in head.named_parameters()},
    }
    optimizer = OptimizerState(lr=config.readout_lr, weight_decay=0.0)
    with nc.no_grad():
        tokens = [model.encode(image) for image in dataset.images]

    losses = []
    with nc.frozen(model.parameters()):
        for _ in range(config.readout_epochs):
            nc.zero_grad(trained)
            logits = nc.concat(
                [head(model.readout_features(t, readout).reshape(1, d)) for t in tokens], axis=0
            )
            loss = nc.bce_with_logits(logits, labels)
            nc.backward(loss)
            adamw_step(optimizer, trained)
            losses.append(loss.item())
    if losses:
        _logger.debug("readout fit on %d images: loss %.4f -> %.4f", len(tokens), losses[0], losses[-1])
    return ReadoutFit(readout, losses)


class Standardized(NamedTuple):
    train: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def standardize_features(train: np.ndarray, test: np.ndarray) -> Standardized:
    """Zero mean / unit variance with train statistics; constant columns become 0.

    Examples:
        >>> s = standardize_features(np.array([[1.0, 5.0], [3.0, 5.0]]), np.array([[2.0, 7.0]]))
        >>> s.train.tolist(), s.test.tolist()
        ([[-1.0, 0.0], [1.0, 0.0]], [[0.0, 0.0]])
    """
    train = np.asarray(train, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    assert train.ndim == 2 and train.shape[0] > 0, "standardisation needs a nonempty train matrix"
    scaler = StandardScaler().fit(train)
    constant = scaler.var_ == 0.0
    train_s, test_s = scaler.transform(train), scaler.transform(test)
    train_s[:, constant] = 0.0
    test_s[:, constant] = 0.0
    return Standardized(train_s, test_s, scaler.mean_, np.sqrt(scaler.var_))


# =============================================================================
# Logistic regression
# =============================================================================


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    C: float = 1.0,
    max_iter: int = 2000,
    tol: float = 1e-6,
    init: Optional[Tuple[np.ndarray, np.ndarray]] = None,
):
    """L2-regularised logistic regression (lbfgs); 2-D indicator labels go one-vs-rest.

    ``init`` warm-starts a binary fit from the given (coef, intercept).

    Examples:
        >>> clf = fit_logistic(np.array([[-1.0], [1.0]]), np.array([0, 1]))
        >>> clf.predict(np.array([[-1.0], [1.0]])).tolist()
        [0, 1]
        >>> fit_logistic(np.array([[0.0], [1.0]]), np.array([1, 1]))
        Traceback (most recent call last):
        ...
        gaze_world.metrics.SingleClassError: logistic regression needs at least two classes, got [1]
    """
    labels = np.asarray(labels)
    features = np.asarray(features, dtype=np.float64)
    classes = np.unique(labels)
    if labels.ndim == 1 and len(classes) < 2:
        raise SingleClassError(
            f"logistic regression needs at least two classes, got {classes.tolist()}"
        )
    if labels.ndim == 2 and any(len(np.unique(col)) < 2 for col in labels.T):
        raise SingleClassError("every label column of a multi-label probe needs both classes")

    def estimator():
        return LogisticRegression(
            C=C, solver="lbfgs", max_iter=max_iter, tol=tol, warm_start=init is not None
        )

    if labels.ndim == 2:
        return OneVsRestClassifier(estimator()).fit(features, labels)
    clf = estimator()
    if init is not None:
        coef, intercept = init
        clf.coef_ = np.array(coef, dtype=np.float64).reshape(1, -1)
        clf.intercept_ = np.array(intercept, dtype=np.float64).reshape(1)
    return clf.fit(features, labels)


def logistic_objective(clf, features: np.ndarray, labels: np.ndarray, C: float = 1.0) -> float:
    """``C * sum(log-loss) + ||w||^2 / 2`` of a binary fit (intercept unpenalised)."""
    margins = features @ clf.coef_.ravel() + clf.intercept_[0]
    signs = np.where(np.asarray(labels) == clf.classes_[1], 1.0, -1.0)
    w = clf.coef_.ravel()
    return float(C * np.logaddexp(0.0, -signs * margins).sum() + 0.5 * np.dot(w, w))


def _scores(clf, features: np.ndarray) -> np.ndarray:
    probabilities = clf.predict_proba(features)
    if probabilities.ndim == 2 and probabilities.shape[1] == 2:
        return probabilities[:, 1]
    return probabilities


# =============================================================================
# The probe
# =============================================================================


def run_linear_probe(
    model: GazeWorldModel,
    train: SyntheticDataset,
    test: SyntheticDataset,
    label_fraction: float = 1.0,
    seed: int = 0,
    config: Optional[ProbeConfig] = None,
    features: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> dict:
    """Fit on (a label fraction of) ``train``, report AUROC/accuracy/F1 on ``test``.

    The readout is first fitted on the same labelled subset. ``features`` may
    carry precomputed (train, test) matrices aligned with the full datasets;
    readout fitting is then skipped.
    """
    config = config or ProbeConfig()
    kept = subsample(train, label_fraction, seed)
    readout_loss = None
    if features is None:
        readout = None
        if config.readout_epochs:
            fit = fit_readout(model, kept, config, seed)
            readout, readout_loss = fit.readout, fit.losses[-1]
        features = (
            probe_feature_matrix(train, model, readout),
            probe_feature_matrix(test, model, readout),
        )
    train_x, test_x = features
    d = model.config.embed_dim
    if config.zero_half_b:
        train_x, test_x = train_x.copy(), test_x.copy()
        train_x[:, d:] = 0.0
        test_x[:, d:] = 0.0

    index = {id(image): i for i, image in enumerate(train.images)}
    rows = [index[id(image)] for image in kept.images]
    scaled = standardize_features(train_x[rows], test_x)
    labels = np.asarray(kept.labels)
    clf = fit_logistic(scaled.train, labels, config.C, config.max_iter, config.tol)

    truth = np.asarray(test.labels)
    predicted = clf.predict(scaled.test)
    result = {
        "label_fraction": label_fraction,
        "n_train": len(rows),
        "n_test": len(test),
        "auroc": auroc(_scores(clf, scaled.test), truth),
        "accuracy": accuracy(predicted, truth),
        "f1": f1(predicted, truth),
        "zero_half_b": config.zero_half_b,
        "readout_loss": readout_loss,
    }
    _logger.info(
        "probe (fraction %.2f, %d labels): AUROC %.4f", label_fraction, len(rows), result["auroc"]
    )
    return result

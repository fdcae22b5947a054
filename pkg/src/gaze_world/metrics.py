"""Scanpath similarity and classification metrics.

Scanpaths are compared after quantisation to the patch grid: every
fixation becomes the centre of its cell. Distances are normalised by the
grid diagonal, the distance between the centres of the first and last
cells.
"""

from dataclasses import dataclass
import logging
import math
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, f1_score, roc_auc_score

from gaze_world.gazedata import GridMismatchError, GridSpec, Scanpath, patch_index

_logger = logging.getLogger(__name__)

_TIE = 1e-12


class SingleClassError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


class ScanpathTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedScanpath:
    """
    Examples:
        >>> QuantizedScanpath((0, 3), GridSpec(2, 2)).centers.tolist()
        [[0.25, 0.25], [0.75, 0.75]]
        >>> QuantizedScanpath((), GridSpec(2, 2))
        Traceback (most recent call last):
        ...
        gaze_world.metrics.ScanpathTooShortError: a quantized scanpath needs at least one cell
    """

    cells: Tuple[int, ...]
    grid: GridSpec

    def __post_init__(self):
        cells = tuple(int(c) for c in self.cells)
        if not cells:
            raise ScanpathTooShortError("a quantized scanpath needs at least one cell")
        if min(cells) < 0 or max(cells) >= self.grid.n:
            raise ValueError(f"cells must lie in [0, {self.grid.n}), got {cells}")
        object.__setattr__(self, "cells", cells)

    def __len__(self):
        return len(self.cells)

    @property
    def centers(self) -> np.ndarray:
        return np.array([self.grid.cell_center(c) for c in self.cells], dtype=np.float64)


def quantize(scanpath: Scanpath, grid: GridSpec) -> QuantizedScanpath:
    return QuantizedScanpath(tuple(patch_index(f.x, f.y, grid) for f in scanpath.fixations), grid)


def diagonal(grid: GridSpec) -> float:
    """
    Examples:
        >>> round(diagonal(GridSpec(2, 2)), 12)
        0.707106781187
        >>> diagonal(GridSpec(1, 1))
        0.0
    """
    first, last = np.array(grid.cell_center(0)), np.array(grid.cell_center(grid.n - 1))
    return float(np.linalg.norm(last - first))


def _similarity(distance: float, diag: float) -> float:
    return 1.0 if diag == 0.0 else 1.0 - distance / diag


def _same_grid(a: QuantizedScanpath, b: QuantizedScanpath) -> GridSpec:
    if a.grid != b.grid:
        raise GridMismatchError(f"scanpaths quantized on different grids: {a.grid} vs {b.grid}")
    return a.grid


# =============================================================================
# String edit distance
# =============================================================================


def sed(a: QuantizedScanpath, b: QuantizedScanpath) -> int:
    """Levenshtein distance between the cell strings.

    Examples:
        >>> g = GridSpec(2, 2)
        >>> sed(QuantizedScanpath((0, 1, 2), g), QuantizedScanpath((0, 1, 3), g))
        1
        >>> sed(QuantizedScanpath((0, 1), g), QuantizedScanpath((1, 0, 1), g))
        1
    """
    _same_grid(a, b)
    s, t = a.cells, b.cells
    distance = np.zeros((len(s) + 1, len(t) + 1), dtype=np.int64)
    distance[:, 0] = np.arange(len(s) + 1)
    distance[0, :] = np.arange(len(t) + 1)
    for i in range(1, len(s) + 1):
        for j in range(1, len(t) + 1):
            distance[i, j] = min(
                distance[i - 1, j] + 1,
                distance[i, j - 1] + 1,
                distance[i - 1, j - 1] + (s[i - 1] != t[j - 1]),
            )
    return int(distance[len(s), len(t)])


# =============================================================================
# ScanMatch
# =============================================================================


def scanmatch(a: QuantizedScanpath, b: QuantizedScanpath) -> float:
    """Needleman-Wunsch with distance-graded substitutions and free gaps.

    Examples:
        >>> g = GridSpec(2, 2)
        >>> scanmatch(QuantizedScanpath((0, 1, 3), g), QuantizedScanpath((0, 1, 3), g))
        1.0
        >>> scanmatch(QuantizedScanpath((0,), g), QuantizedScanpath((3,), g))
        0.0
    """
    grid = _same_grid(a, b)
    diag = diagonal(grid)
    ca, cb = a.centers, b.centers
    score = np.zeros((len(a) + 1, len(b) + 1))
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            match = _similarity(float(np.linalg.norm(ca[i - 1] - cb[j - 1])), diag)
            score[i, j] = max(score[i - 1, j - 1] + match, score[i - 1, j], score[i, j - 1])
    return float(score[len(a), len(b)] / max(len(a), len(b)))


# =============================================================================
# Time-delay embedding
# =============================================================================


def _windows(points: np.ndarray, k: int) -> np.ndarray:
    return np.stack([points[i : i + k] for i in range(len(points) - k + 1)])


def _directed_stde(a: np.ndarray, b: np.ndarray, k: int) -> float:
    wa, wb = _windows(a, k), _windows(b, k)
    # (windows of a, windows of b): mean point distance of each window pair
    distances = np.linalg.norm(wa[:, None, :, :] - wb[None, :, :, :], axis=-1).mean(axis=-1)
    return float(distances.min(axis=1).mean())


def stde(a: QuantizedScanpath, b: QuantizedScanpath, k_max: int = 3) -> float:
    """Symmetrised time-delay-embedding similarity over window lengths 1..k_max.

    Window lengths longer than either path are skipped.

    Examples:
        >>> g = GridSpec(2, 2)
        >>> stde(QuantizedScanpath((0, 1, 2), g), QuantizedScanpath((0, 1, 2), g))
        1.0
        >>> stde(QuantizedScanpath((0,), g), QuantizedScanpath((3,), g))
        0.0
    """
    grid = _same_grid(a, b)
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    diag = diagonal(grid)
    ca, cb = a.centers, b.centers
    per_k = []
    for k in range(1, min(k_max, len(a), len(b)) + 1):
        forward = _similarity(_directed_stde(ca, cb, k), diag)
        backward = _similarity(_directed_stde(cb, ca, k), diag)
        per_k.append((forward + backward) / 2.0)
    return float(np.mean(per_k))


# =============================================================================
# MultiMatch
# =============================================================================


class MultiMatch(NamedTuple):
    vector: float
    direction: float
    position: float


def _saccades(points: np.ndarray) -> np.ndarray:
    return points[1:] - points[:-1]


def alignment_path(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Minimum-cost monotone path from (0, 0) to the last cell.

    Moves are diagonal, down (next row) and right (next column); the cost
    of a path is the sum of the cells it visits. Among equally cheap
    paths the earliest step prefers diagonal, then down, then right.

    Examples:
        >>> alignment_path(np.array([[0.0, 5.0], [5.0, 0.0]]))
        [(0, 0), (1, 1)]
        >>> alignment_path(np.array([[0.0, 0.0, 1.0]]))
        [(0, 0), (0, 1), (0, 2)]
    """
    rows, cols = cost.shape
    # remaining[i, j]: cheapest cost from (i, j) to the end, (i, j) included
    remaining = np.full((rows + 1, cols + 1), np.inf)
    for i in range(rows - 1, -1, -1):
        for j in range(cols - 1, -1, -1):
            if i == rows - 1 and j == cols - 1:
                remaining[i, j] = cost[i, j]
                continue
            remaining[i, j] = cost[i, j] + min(
                remaining[i + 1, j + 1], remaining[i + 1, j], remaining[i, j + 1]
            )
    path = [(0, 0)]
    i = j = 0
    while (i, j) != (rows - 1, cols - 1):
        target = remaining[i, j] - cost[i, j]
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if remaining[i + di, j + dj] <= target + _TIE:
                i, j = i + di, j + dj
                break
        path.append((i, j))
    return path


def _angle(u: np.ndarray, v: np.ndarray) -> Optional[float]:
    if not u.any() or not v.any():
        return None
    cross = u[0] * v[1] - u[1] * v[0]
    return math.atan2(abs(float(cross)), float(np.dot(u, v)))


def multimatch_from_path(
    a: QuantizedScanpath, b: QuantizedScanpath, path: Sequence[Tuple[int, int]]
) -> MultiMatch:
    """Vector, direction and position similarity along a given saccade alignment."""
    diag = diagonal(a.grid)
    ca, cb = a.centers, b.centers
    ua, ub = _saccades(ca), _saccades(cb)
    vector, direction, position = [], [], []
    for i, j in path:
        difference = float(np.linalg.norm(ua[i] - ub[j]))
        vector.append(1.0 if diag == 0.0 else 1.0 - difference / (2.0 * diag))
        angle = _angle(ua[i], ub[j])
        if angle is None:
            both_zero = not ua[i].any() and not ub[j].any()
            direction.append(1.0 if both_zero else 0.0)
        else:
            direction.append(1.0 - angle / math.pi)
        # fixations aligned through the saccades that start at them
        position.append(_similarity(float(np.linalg.norm(ca[i] - cb[j])), diag))
    return MultiMatch(float(np.mean(vector)), float(np.mean(direction)), float(np.mean(position)))


def multimatch(a: QuantizedScanpath, b: QuantizedScanpath) -> MultiMatch:
    """Vector, direction and position similarity of the cheapest saccade alignment.

    Examples:
        >>> g = GridSpec(2, 2)
        >>> multimatch(QuantizedScanpath((0, 1, 3), g), QuantizedScanpath((0, 1, 3), g))
        MultiMatch(vector=1.0, direction=1.0, position=1.0)
        >>> multimatch(QuantizedScanpath((0,), g), QuantizedScanpath((0, 1), g))
        Traceback (most recent call last):
        ...
        gaze_world.metrics.ScanpathTooShortError: MultiMatch needs at least 2 fixations per path, got 1 and 2
    """
    _same_grid(a, b)
    if len(a) < 2 or len(b) < 2:
        raise ScanpathTooShortError(
            f"MultiMatch needs at least 2 fixations per path, got {len(a)} and {len(b)}"
        )
    ua, ub = _saccades(a.centers), _saccades(b.centers)
    cost = np.linalg.norm(ua[:, None, :] - ub[None, :, :], axis=-1)
    # tie-breaking depends on argument order, so average both directions
    forward = multimatch_from_path(a, b, alignment_path(cost))
    backward = multimatch_from_path(b, a, alignment_path(cost.T))
    return MultiMatch(*((x + y) / 2.0 for x, y in zip(forward, backward)))


# =============================================================================
# Classification
# =============================================================================


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUROC, ties counted half; macro-averaged for 2-D inputs.

    Examples:
        >>> auroc(np.array([0.9, 0.8, 0.3]), np.array([1, 0, 1]))
        0.5
        >>> auroc(np.array([0.2, 0.2, 0.2]), np.array([0, 1, 1]))
        0.5
        >>> auroc(np.array([0.1, 0.2]), np.array([1, 1]))
        Traceback (most recent call last):
        ...
        gaze_world.metrics.SingleClassError: AUROC is undefined with a single class
    """
    scores, labels = np.asarray(scores), np.asarray(labels)
    if labels.ndim == 1 and len(np.unique(labels)) < 2:
        raise SingleClassError("AUROC is undefined with a single class")
    if labels.ndim == 1 and scores.ndim == 2:
        return float(roc_auc_score(labels, scores, multi_class="ovr", average="macro"))
    if labels.ndim == 2 and any(len(np.unique(col)) < 2 for col in labels.T):
        raise SingleClassError("AUROC is undefined for a label column with a single class")
    return float(roc_auc_score(labels, scores, average="macro"))


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float(accuracy_score(labels, predicted))


def f1(predicted: np.ndarray, labels: np.ndarray) -> float:
    """Binary F1 for two classes, macro F1 otherwise."""
    labels = np.asarray(labels)
    binary = labels.ndim == 1 and set(np.unique(labels)) <= {0, 1}
    return float(f1_score(labels, predicted, average="binary" if binary else "macro", zero_division=0))


# =============================================================================
# Reports
# =============================================================================


def compare_pair(
    pred: QuantizedScanpath, truth: QuantizedScanpath, k_max: int = 3
) -> Dict[str, Optional[float]]:
    scores: Dict[str, Optional[float]] = {
        "sed": float(sed(pred, truth)),
        "scanmatch": scanmatch(pred, truth),
        "stde": stde(pred, truth, k_max),
    }
    if len(pred) >= 2 and len(truth) >= 2:
        mm = multimatch(pred, truth)
        scores.update(mm_vector=mm.vector, mm_direction=mm.direction, mm_position=mm.position)
    else:
        scores.update(mm_vector=None, mm_direction=None, mm_position=None)
    return scores


def compare_scanpaths(
    preds: Sequence[Scanpath], truths: Sequence[Scanpath], grid: GridSpec, k_max: int = 3
) -> dict:
    """Per-pair scores and their means (pairs too short for MultiMatch are left out of its means).

    Examples:
        >>> path = Scanpath(((0.1, 0.1, 0.2), (0.9, 0.1, 0.2), (0.9, 0.9, 0.2)))
        >>> report = compare_scanpaths([path], [path], GridSpec(4, 4))
        >>> report["means"]["sed"], report["means"]["scanmatch"], report["means"]["stde"]
        (0.0, 1.0, 1.0)
    """
    if len(preds) != len(truths):
        raise LengthMismatchError(f"{len(preds)} predicted scanpaths for {len(truths)} references")
    pairs = [compare_pair(quantize(p, grid), quantize(t, grid), k_max) for p, t in zip(preds, truths)]
    means = {}
    for key in ("sed", "scanmatch", "stde", "mm_vector", "mm_direction", "mm_position"):
        values = [pair[key] for pair in pairs if pair[key] is not None]
        means[key] = float(np.mean(values)) if values else None
    return {"pairs": pairs, "means": means, "count": len(pairs)}

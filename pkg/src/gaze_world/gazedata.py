"""Images, fixation records and the patch-grid view of a gaze trace.

A reading of an image is a list of fixations in normalised coordinates.
The model never looks at fixations directly: it sees the ordered list of
*unique* grid cells the reader visited (first-visit order) and the
complementary set of cells the reader never looked at.
"""

from dataclasses import dataclass, field
import logging
import math
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

_logger = logging.getLogger(__name__)

ORDERINGS = ("gaze", "raster", "random")
RULES = ("intensity-order", "raster", "random")


# =============================================================================
# Errors
# =============================================================================


class FixationError(ValueError):
    pass


class FixationFormatError(FixationError):
    """A required key is missing or has the wrong type."""


class FixationRangeError(FixationError):
    """A coordinate lies outside [0, 1]."""


class FixationDurationError(FixationError):
    """A dwell duration is not strictly positive."""


class EmptyFixationError(FixationError):
    """A record or sequence holds no fixations."""


class SplitError(ValueError):
    pass


class GridMismatchError(ValueError):
    """Two objects disagree on the patch grid."""


# =============================================================================
# Domain types
# =============================================================================


@dataclass(frozen=True)
class GridSpec:
    """A rows x cols patch grid.

    Examples:
        >>> GridSpec(4, 4).n
        16
        >>> GridSpec(0, 3)
        Traceback (most recent call last):
        ...
        ValueError: grid needs rows >= 1 and cols >= 1, got 0x3
    """

    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(
                "grid needs rows >= 1 and cols >= 1, got %sx%s" % (self.rows, self.cols)
            )

    @property
    def n(self) -> int:
        return self.rows * self.cols

    def cell_center(self, patch: int) -> Tuple[float, float]:
        """Normalised (x, y) centre of a cell.

        Examples:
            >>> GridSpec(2, 2).cell_center(3)
            (0.75, 0.75)
        """
        row, col = divmod(patch, self.cols)
        return ((col + 0.5) / self.cols, (row + 0.5) / self.rows)

    def centers(self) -> np.ndarray:
        """(N, 2) array of all cell centres in raster order."""
        return np.array([self.cell_center(p) for p in range(self.n)], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ImageGray:
    """A grayscale image with intensities in [0, 1], stored as (height, width)."""

    width: int
    height: int
    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image dimensions must be positive, got {self.width}x{self.height}")
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.size != self.width * self.height:
            raise ValueError(
                f"image {self.id!r} has {pixels.size} pixels, expected {self.width * self.height}"
            )
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError(f"image {self.id!r} has pixels outside [0, 1]")
        object.__setattr__(self, "pixels", pixels.reshape(self.height, self.width))

    def __eq__(self, other):
        if not isinstance(other, ImageGray):
            return NotImplemented
        return (
            (self.width, self.height, self.id) == (other.width, other.height, other.id)
            and np.array_equal(self.pixels, other.pixels)
        )


class Fixation(NamedTuple):
    x: float
    y: float
    dur: float


@dataclass(frozen=True)
class FixationRecord:
    """The raw gaze trace of one reading of one image.

    Examples:
        >>> FixationRecord("a", (Fixation(0.5, 0.5, 0.2),)).fixations[0].dur
        0.2
        >>> FixationRecord("a", ())
        Traceback (most recent call last):
        ...
        gaze_world.gazedata.EmptyFixationError: record 'a' has no fixations
    """

    image_id: str
    fixations: Tuple[Fixation, ...]

    def __post_init__(self):
        fixations = tuple(Fixation(*f) for f in self.fixations)
        if not fixations:
            raise EmptyFixationError(f"record {self.image_id!r} has no fixations")
        for i, f in enumerate(fixations):
            if not (0.0 <= f.x <= 1.0 and 0.0 <= f.y <= 1.0):
                raise FixationRangeError(
                    f"record {self.image_id!r}, fixation {i}: ({f.x}, {f.y}) is outside [0, 1]"
                )
            if not (f.dur > 0.0 and math.isfinite(f.dur)):
                raise FixationDurationError(
                    f"record {self.image_id!r}, fixation {i}: duration {f.dur} is not finite and positive"
                )
        object.__setattr__(self, "fixations", fixations)


@dataclass(frozen=True)
class FixationSequence:
    """Unique visited patches in first-visit order, with merged dwell (seconds)."""

    visited: Tuple[int, ...]
    dwell: Tuple[float, ...]
    grid: GridSpec

    def __post_init__(self):
        visited = tuple(int(p) for p in self.visited)
        dwell = tuple(float(d) for d in self.dwell)
        if not visited:
            raise EmptyFixationError("a fixation sequence needs at least one patch")
        if len(set(visited)) != len(visited):
            raise ValueError(f"visited patches must be distinct, got {visited}")
        if min(visited) < 0 or max(visited) >= self.grid.n:
            raise ValueError(f"visited patches must lie in [0, {self.grid.n}), got {visited}")
        if len(dwell) != len(visited):
            raise ValueError(f"{len(dwell)} dwell values for {len(visited)} patches")
        if any(d <= 0.0 for d in dwell):
            raise FixationDurationError(f"dwell durations must be positive, got {dwell}")
        object.__setattr__(self, "visited", visited)
        object.__setattr__(self, "dwell", dwell)

    def __len__(self):
        return len(self.visited)


@dataclass
class SyntheticDataset:
    images: List[ImageGray]
    records: List[FixationRecord]
    labels: List[int]
    seed: int
    grid: Optional[GridSpec] = None

    def __post_init__(self):
        assert len(self.images) == len(self.records) == len(self.labels), (
            f"dataset columns are misaligned: {len(self.images)} images, "
            f"{len(self.records)} records, {len(self.labels)} labels"
        )

    def __len__(self):
        return len(self.images)

    def subset(self, indices: Iterable[int]) -> "SyntheticDataset":
        indices = list(indices)
        return SyntheticDataset(
            images=[self.images[i] for i in indices],
            records=[self.records[i] for i in indices],
            labels=[self.labels[i] for i in indices],
            seed=self.seed,
            grid=self.grid,
        )


@dataclass(frozen=True)
class Scanpath:
    """A trajectory as emitted by the scanpath decoder (durations may be 0)."""

    fixations: Tuple[Fixation, ...]
    termination_step: Optional[int] = None

    def __post_init__(self):
        fixations = tuple(Fixation(*f) for f in self.fixations)
        for f in fixations:
            if not (0.0 <= f.x <= 1.0 and 0.0 <= f.y <= 1.0):
                raise FixationRangeError(f"scanpath point ({f.x}, {f.y}) is outside [0, 1]")
            if f.dur < 0.0:
                raise FixationDurationError(f"scanpath duration {f.dur} is negative")
        object.__setattr__(self, "fixations", fixations)

    def __len__(self):
        return len(self.fixations)

    def points(self) -> np.ndarray:
        return np.array([(f.x, f.y) for f in self.fixations], dtype=np.float64).reshape(-1, 2)


# =============================================================================
# Fixations -> patch sequences
# =============================================================================


def patch_index(x: float, y: float, grid: GridSpec) -> int:
    """Cell containing the normalised point (x, y); 1.0 clamps to the last cell.

    Examples:
        >>> patch_index(0.0, 0.0, GridSpec(4, 4))
        0
        >>> patch_index(0.99, 0.99, GridSpec(4, 4))
        15
        >>> patch_index(0.3, 0.6, GridSpec(4, 4))
        9
        >>> patch_index(1.0, 1.0, GridSpec(4, 4))
        15
    """
    row = min(int(math.floor(y * grid.rows)), grid.rows - 1)
    col = min(int(math.floor(x * grid.cols)), grid.cols - 1)
    return row * grid.cols + col


def assign_patches(record: FixationRecord, grid: GridSpec) -> List[Tuple[int, float]]:
    """Map every fixation to its grid cell, keeping order and durations.

    Examples:
        >>> r = FixationRecord("a", ((0.0, 0.0, 0.1), (0.3, 0.6, 0.2)))
        >>> assign_patches(r, GridSpec(4, 4))
        [(0, 0.1), (9, 0.2)]
    """
    return [(patch_index(f.x, f.y, grid), f.dur) for f in record.fixations]


def dedup_first_visit(
    assigned: Sequence[Tuple[int, float]], grid: GridSpec
) -> FixationSequence:
    """Merge revisits, keeping first-visit order and summing dwell.

    Examples:
        >>> s = dedup_first_visit(
        ...     list(zip([3, 3, 5, 3, 7], [1.0, 1.0, 2.0, 1.0, 4.0])), GridSpec(3, 3))
        >>> s.visited, s.dwell
        ((3, 5, 7), (3.0, 2.0, 4.0))
        >>> dedup_first_visit([], GridSpec(3, 3))
        Traceback (most recent call last):
        ...
        gaze_world.gazedata.EmptyFixationError: cannot deduplicate an empty fixation list
    """
    if not assigned:
        raise EmptyFixationError("cannot deduplicate an empty fixation list")
    dwell: Dict[int, float] = {}
    for patch, duration in assigned:
        dwell[patch] = dwell.get(patch, 0.0) + duration
    # dicts keep insertion order, which is the first-visit order
    return FixationSequence(tuple(dwell), tuple(dwell.values()), grid)


def unvisited_set(seq: FixationSequence) -> Set[int]:
    """Cells never fixated.

    Examples:
        >>> sorted(unvisited_set(FixationSequence((0, 1), (1.0, 1.0), GridSpec(2, 2))))
        [2, 3]
    """
    return set(range(seq.grid.n)) - set(seq.visited)


def build_sequence(record: FixationRecord, grid: GridSpec) -> FixationSequence:
    return dedup_first_visit(assign_patches(record, grid), grid)


def build_sequences(ds: SyntheticDataset, grid: GridSpec) -> List[FixationSequence]:
    return [build_sequence(r, grid) for r in ds.records]


def reorder_sequence(
    seq: FixationSequence, ordering: str, rng: Optional[np.random.Generator] = None
) -> FixationSequence:
    """Keep the visited set and its dwell, change only the visiting order.

    Examples:
        >>> s = FixationSequence((5, 1, 3), (0.5, 0.1, 0.3), GridSpec(3, 3))
        >>> reorder_sequence(s, "raster").visited
        (1, 3, 5)
        >>> reorder_sequence(s, "raster").dwell
        (0.1, 0.3, 0.5)
        >>> reorder_sequence(s, "gaze") is s
        True
    """
    if ordering == "gaze":
        return seq
    if ordering == "raster":
        order = np.argsort(seq.visited, kind="stable")
    elif ordering == "random":
        if rng is None:
            raise ValueError("random ordering needs a random generator")
        order = rng.permutation(len(seq))
    else:
        raise ValueError(f"unknown ordering {ordering!r}, expected one of {ORDERINGS}")
    return FixationSequence(
        tuple(seq.visited[i] for i in order), tuple(seq.dwell[i] for i in order), seq.grid
    )


# =============================================================================
# Synthetic worlds
# =============================================================================


def patch_intensities(image: ImageGray, grid: GridSpec) -> np.ndarray:
    """Mean intensity of every grid cell, raster order.

    Examples:
        >>> img = ImageGray(2, 2, np.array([[0.0, 1.0], [1.0, 0.0]]))
        >>> patch_intensities(img, GridSpec(2, 2)).tolist()
        [0.0, 1.0, 1.0, 0.0]
    """
    ph, pw = image.height // grid.rows, image.width // grid.cols
    cells = image.pixels[: ph * grid.rows, : pw * grid.cols]
    cells = cells.reshape(grid.rows, ph, grid.cols, pw)
    return cells.mean(axis=(1, 3)).reshape(-1)


def intensity_order(intensities: np.ndarray, k: int) -> List[int]:
    """Indices of the k brightest cells, brightest first; ties go to the lower index.

    Examples:
        >>> intensity_order(np.array([0.1, 0.9, 0.5, 0.7]), 3)
        [1, 3, 2]
    """
    order = np.argsort(-np.asarray(intensities), kind="stable")
    return [int(p) for p in order[:k]]


def brightest_on_left(intensities: np.ndarray, grid: GridSpec) -> int:
    col = int(np.argmax(intensities)) % grid.cols
    return int(2 * col < grid.cols)


def _blob_image(
    rng: np.random.Generator, grid: GridSpec, patch_size: int, n_blobs: int, image_id: str
) -> ImageGray:
    height, width = grid.rows * patch_size, grid.cols * patch_size
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    field = np.zeros((height, width))
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        sigma = rng.uniform(0.08, 0.2)
        amplitude = rng.uniform(0.3, 1.0)
        field += amplitude * np.exp(
            -((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) / (2 * sigma**2)
        )
    field = field / field.max()
    # 8-bit levels so a PGM round trip is exact
    pixels = np.round(field * 255.0) / 255.0
    return ImageGray(width, height, pixels, image_id)


def _planted_trace(
    rng: np.random.Generator,
    patches: List[int],
    intensities: np.ndarray,
    grid: GridSpec,
    revisit_probability: float,
) -> List[Fixation]:
    fixations = []
    for i, patch in enumerate(patches):
        visits = [patch]
        if i > 0 and rng.uniform() < revisit_probability:
            visits.append(patches[int(rng.integers(0, i))])
        for p in visits:
            row, col = divmod(p, grid.cols)
            jx, jy = rng.uniform(0.2, 0.8, size=2)
            x = (col + jx) / grid.cols
            y = (row + jy) / grid.rows
            dur = 0.1 + 0.4 * float(intensities[p]) + float(rng.uniform(0.0, 0.05))
            fixations.append(Fixation(x, y, dur))
    return fixations


def synth_world(
    seed: int,
    n_images: int,
    grid: GridSpec,
    rule: str = "intensity-order",
    patch_size: int = 4,
    fixations_per_image: Optional[int] = None,
    n_blobs: int = 3,
    revisit_probability: float = 0.2,
) -> SyntheticDataset:
    """Blob images with a planted gaze rule.

    Under ``intensity-order`` a reader looks at the k brightest cells from
    brightest to dimmest, now and then glancing back at an earlier cell.
    The label says whether the brightest cell is in the left half.

    Examples:
        >>> ds = synth_world(1, 3, GridSpec(4, 4), rule="raster", fixations_per_image=4)
        >>> [build_sequence(r, GridSpec(4, 4)).visited for r in ds.records]
        [(0, 1, 2, 3), (0, 1, 2, 3), (0, 1, 2, 3)]
        >>> synth_world(1, 3, GridSpec(4, 4)).labels == synth_world(1, 3, GridSpec(4, 4)).labels
        True
    """
    if n_images < 1:
        raise ValueError(f"n_images must be >= 1, got {n_images}")
    if rule not in RULES:
        raise ValueError(f"unknown gaze rule {rule!r}, expected one of {RULES}")
    k = fixations_per_image if fixations_per_image is not None else max(1, grid.n // 2)
    k = min(k, grid.n)

    rng = np.random.default_rng(seed)
    images, records, labels = [], [], []
    for i in range(n_images):
        image_id = f"img{i:05d}"
        image = _blob_image(rng, grid, patch_size, n_blobs, image_id)
        intensities = patch_intensities(image, grid)
        if rule == "intensity-order":
            patches = intensity_order(intensities, k)
        elif rule == "raster":
            patches = list(range(k))
        else:
            patches = [int(p) for p in rng.permutation(grid.n)[:k]]
        # raster and random traces stay free of revisits so the prefix is exact
        revisit = revisit_probability if rule == "intensity-order" else 0.0
        fixations = _planted_trace(rng, patches, intensities, grid, revisit)
        images.append(image)
        records.append(FixationRecord(image_id, tuple(fixations)))
        labels.append(brightest_on_left(intensities, grid))
    _logger.info("synthesised %d images (seed=%d, rule=%s)", n_images, seed, rule)
    return SyntheticDataset(images, records, labels, seed, grid)


def split_dataset(
    ds: SyntheticDataset, fractions: Tuple[float, float, float]
) -> Tuple[SyntheticDataset, SyntheticDataset, SyntheticDataset]:
    """Disjoint train/val/test split, shuffled with the dataset seed.

    Examples:
        >>> ds = synth_world(0, 10, GridSpec(2, 2), patch_size=2)
        >>> [len(part) for part in split_dataset(ds, (0.8, 0.1, 0.1))]
        [8, 1, 1]
        >>> split_dataset(ds, (1.0, 0.0, 0.0))
        Traceback (most recent call last):
        ...
        gaze_world.gazedata.SplitError: fractions must all be positive, got (1.0, 0.0, 0.0)
    """
    if len(fractions) != 3 or any(f <= 0.0 for f in fractions):
        raise SplitError(f"fractions must all be positive, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(ds)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(
            f"splitting {n} items by {tuple(fractions)} leaves an empty part "
            f"({n_train}/{n_val}/{n_test})"
        )
    order = np.random.default_rng(ds.seed).permutation(n)
    return (
        ds.subset(order[:n_train]),
        ds.subset(order[n_train : n_train + n_val]),
        ds.subset(order[n_train + n_val :]),
    )


def subsample(ds: SyntheticDataset, fraction: float, seed: int) -> SyntheticDataset:
    """Keep a seeded fraction of the items, at least one per label.

    Examples:
        >>> ds = synth_world(0, 20, GridSpec(2, 2), patch_size=2)
        >>> small = subsample(ds, 0.1, seed=0)
        >>> len(small) >= 2 and len(set(small.labels)) == len(set(ds.labels))
        True
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return ds
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(len(ds))]
    keep = order[: max(1, int(round(fraction * len(ds))))]
    for label in sorted(set(ds.labels)):
        if not any(ds.labels[i] == label for i in keep):
            keep.append(next(i for i in order if ds.labels[i] == label))
    return ds.subset(sorted(keep))

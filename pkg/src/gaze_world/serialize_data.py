"""Reading and writing images (PGM), fixation files (JSON lines) and dataset folders."""

import errno
import json
import logging
import math
import pathlib
import re
from typing import Iterable, List, Optional, Tuple

import numpy as np

from gaze_world.gazedata import (
    Fixation,
    FixationFormatError,
    FixationRecord,
    GridSpec,
    ImageGray,
    Scanpath,
    SyntheticDataset,
)

_logger = logging.getLogger(__name__)


class PGMError(ValueError):
    pass


class PGMFormatError(PGMError):
    """Unknown magic number or unreadable header."""


class PGMTruncatedError(PGMError):
    """Fewer pixel values than the header announces."""


class PGMSizeError(PGMError):
    """Header dimensions disagree with the pixel data."""


# =============================================================================
# PGM
# =============================================================================

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
_COMMENT = re.compile(rb"#[^\n]*")


def _header_tokens(data: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens, position = [], 0
    for _ in range(count):
        match = _TOKEN.match(data, position)
        if match is None:
            raise PGMFormatError("PGM header ended early")
        tokens.append(match.group(1))
        position = match.end()
    return tokens, position


def parse_pgm(data: bytes, image_id: str = "") -> ImageGray:
    """Parse a P2 (ASCII) or P5 (binary) PGM, rescaling intensities to [0, 1].

    Examples:
        >>> parse_pgm(b"P2\\n2 2\\n255\\n0 255 255 0\\n").pixels.reshape(-1).tolist()
        [0.0, 1.0, 1.0, 0.0]
        >>> bool(parse_pgm(b"P5 1 1 255\\n\\x80").pixels[0, 0] == 128 / 255)
        True
        >>> parse_pgm(b"P2 3 3 255 0 0 0 0 0 0 0 0")
        Traceback (most recent call last):
        ...
        gaze_world.serialize_data.PGMTruncatedError: PGM header announces 9 pixels, found 8
        >>> parse_pgm(b"P6 1 1 255 abc")
        Traceback (most recent call last):
        ...
        gaze_world.serialize_data.PGMFormatError: unknown magic number b'P6', expected P2 or P5
    """
    tokens, position = _header_tokens(data, 1)
    magic = tokens[0]
    if magic not in (b"P2", b"P5"):
        raise PGMFormatError(f"unknown magic number {magic!r}, expected P2 or P5")
    tokens, offset = _header_tokens(data[position:], 3)
    position += offset
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PGMFormatError(f"non-integer PGM header fields {tokens!r}")
    if width <= 0 or height <= 0:
        raise PGMSizeError(f"PGM dimensions must be positive, got {width}x{height}")
    if not 0 < maxval <= 65535:
        raise PGMFormatError(f"PGM maxval must lie in [1, 65535], got {maxval}")
    expected = width * height

    if magic == b"P2":
        values = _COMMENT.sub(b" ", data[position:]).split()
        if len(values) < expected:
            raise PGMTruncatedError(f"PGM header announces {expected} pixels, found {len(values)}")
        if len(values) > expected:
            raise PGMSizeError(f"PGM header announces {expected} pixels, found {len(values)}")
        try:
            pixels = np.array([int(v) for v in values], dtype=np.float64)
        except ValueError:
            raise PGMFormatError("non-integer pixel value in P2 raster")
    else:
        # exactly one whitespace byte separates the header from the raster
        body = data[position + 1 :]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        found = len(body) // dtype.itemsize
        if found < expected:
            raise PGMTruncatedError(f"PGM header announces {expected} pixels, found {found}")
        if len(body) > expected * dtype.itemsize:
            raise PGMSizeError(
                f"PGM header announces {expected} pixels, found {len(body)} bytes of raster"
            )
        pixels = np.frombuffer(body, dtype=dtype).astype(np.float64)
    if pixels.max(initial=0.0) > maxval:
        raise PGMSizeError(f"PGM pixel value exceeds maxval {maxval}")
    return ImageGray(width, height, (pixels / maxval).reshape(height, width), image_id)


def write_pgm(image: ImageGray, binary: bool = True, maxval: int = 255) -> bytes:
    """Inverse of :func:`parse_pgm`.

    Examples:
        >>> img = parse_pgm(b"P2\\n2 1\\n255\\n7 200\\n")
        >>> write_pgm(img, binary=False)
        b'P2\\n2 1\\n255\\n7 200\\n'
        >>> parse_pgm(write_pgm(img)) == img
        True
    """
    levels = np.round(image.pixels * maxval).astype(np.int64)
    header = b"%s\n%d %d\n%d\n" % (b"P5" if binary else b"P2", image.width, image.height, maxval)
    if not binary:
        rows = [b" ".join(b"%d" % v for v in row) for row in levels]
        return header + b"\n".join(rows) + b"\n"
    dtype = ">u2" if maxval > 255 else "u1"
    return header + levels.astype(dtype).tobytes()


# =============================================================================
# Fixation JSON lines
# =============================================================================


def _fixations_from_json(items, image_id: str) -> List[Fixation]:
    if not isinstance(items, list):
        raise FixationFormatError(f"record {image_id!r}: 'fixations' must be an array")
    fixations = []
    for i, item in enumerate(items):
        try:
            fixation = Fixation(float(item["x"]), float(item["y"]), float(item["dur"]))
        except (KeyError, TypeError, ValueError) as e:
            raise FixationFormatError(
                f"record {image_id!r}, fixation {i}: needs numeric x, y and dur ({e!r})"
            )
        if not all(math.isfinite(v) for v in fixation):
            raise FixationFormatError(f"record {image_id!r}, fixation {i}: non-finite value {fixation}")
        fixations.append(fixation)
    return fixations


def _load_line(line: str) -> dict:
    try:
        description = json.loads(line)
    except json.JSONDecodeError as e:
        raise FixationFormatError(f"not a JSON object: {e}")
    if not isinstance(description, dict):
        raise FixationFormatError("each line must hold one JSON object")
    for key in ("image_id", "fixations"):
        if key not in description:
            raise FixationFormatError(f"missing key {key!r}")
    return description


def parse_fixation_jsonl(line: str) -> FixationRecord:
    """
    Examples:
        >>> r = parse_fixation_jsonl('{"image_id":"a","fixations":[{"x":0.5,"y":0.5,"dur":0.2}]}')
        >>> len(r.fixations)
        1
        >>> parse_fixation_jsonl('{"image_id":"a","fixations":[{"x":1.2,"y":0.5,"dur":0.2}]}')
        Traceback (most recent call last):
        ...
        gaze_world.gazedata.FixationRangeError: record 'a', fixation 0: (1.2, 0.5) is outside [0, 1]
        >>> parse_fixation_jsonl('{"image_id":"a","fixations":[]}')
        Traceback (most recent call last):
        ...
        gaze_world.gazedata.EmptyFixationError: record 'a' has no fixations
        >>> parse_fixation_jsonl('{"fixations":[]}')
        Traceback (most recent call last):
        ...
        gaze_world.gazedata.FixationFormatError: missing key 'image_id'
    """
    description = _load_line(line)
    image_id = str(description["image_id"])
    return FixationRecord(image_id, tuple(_fixations_from_json(description["fixations"], image_id)))


def write_fixation_jsonl(record: FixationRecord) -> str:
    return json.dumps(
        {
            "image_id": record.image_id,
            "fixations": [{"x": f.x, "y": f.y, "dur": f.dur} for f in record.fixations],
        }
    )


def read_fixation_file(path: pathlib.Path) -> List[FixationRecord]:
    with open(path, "r") as f:
        return [parse_fixation_jsonl(line) for line in f if line.strip()]


# =============================================================================
# Scanpath JSON lines
# =============================================================================


def scanpath_to_jsonl(image_id: str, task: Optional[int], scanpath: Scanpath) -> str:
    return json.dumps(
        {
            "image_id": image_id,
            "task": task,
            "fixations": [{"x": f.x, "y": f.y, "dur": f.dur} for f in scanpath.fixations],
        }
    )


def parse_scanpath_jsonl(line: str) -> Tuple[str, Optional[int], Scanpath]:
    """
    Examples:
        >>> parse_scanpath_jsonl('{"image_id":"a","task":2,"fixations":[{"x":0.5,"y":0.5,"dur":0}]}')
        ('a', 2, Scanpath(fixations=(Fixation(x=0.5, y=0.5, dur=0.0),), termination_step=None))
    """
    description = _load_line(line)
    image_id = str(description["image_id"])
    task = description.get("task")
    fixations = _fixations_from_json(description["fixations"], image_id)
    return image_id, (None if task is None else int(task)), Scanpath(tuple(fixations))


def write_scanpath_file(
    path: pathlib.Path, rows: Iterable[Tuple[str, Optional[int], Scanpath]]
) -> None:
    with open(path, "w") as f:
        for image_id, task, scanpath in rows:
            f.write(scanpath_to_jsonl(image_id, task, scanpath) + "\n")


def read_scanpath_file(path: pathlib.Path) -> List[Tuple[str, Optional[int], Scanpath]]:
    with open(path, "r") as f:
        return [parse_scanpath_jsonl(line) for line in f if line.strip()]


# =============================================================================
# Dataset folders
# =============================================================================


def save_dataset(ds: SyntheticDataset, directory: pathlib.Path) -> None:
    """Write ``images/<id>.pgm``, ``fixations.jsonl`` and ``manifest.json``."""
    directory = pathlib.Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for image in ds.images:
        (directory / "images" / f"{image.id}.pgm").write_bytes(write_pgm(image))
    with open(directory / "fixations.jsonl", "w") as f:
        for record in ds.records:
            f.write(write_fixation_jsonl(record) + "\n")
    manifest = {
        "seed": ds.seed,
        "ids": [image.id for image in ds.images],
        "labels": list(ds.labels),
        "grid": None if ds.grid is None else [ds.grid.rows, ds.grid.cols],
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _logger.info("wrote %d items to %s", len(ds), directory)


def load_dataset(directory: pathlib.Path) -> SyntheticDataset:
    directory = pathlib.Path(directory)
    manifest_file = directory / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(errno.ENOENT, "no dataset manifest", str(manifest_file))
    manifest = json.loads(manifest_file.read_text())
    records = {r.image_id: r for r in read_fixation_file(directory / "fixations.jsonl")}
    images = []
    for image_id in manifest["ids"]:
        image_file = directory / "images" / f"{image_id}.pgm"
        if not image_file.exists():
            raise FileNotFoundError(errno.ENOENT, "dataset image is missing", str(image_file))
        images.append(parse_pgm(image_file.read_bytes(), image_id))
    missing = [i for i in manifest["ids"] if i not in records]
    if missing:
        raise FixationFormatError(f"no fixation record for images {missing}")
    grid = manifest.get("grid")
    return SyntheticDataset(
        images=images,
        records=[records[i] for i in manifest["ids"]],
        labels=[int(label) for label in manifest["labels"]],
        seed=int(manifest["seed"]),
        grid=None if grid is None else GridSpec(*grid),
    )

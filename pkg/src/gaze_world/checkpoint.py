"""Binary checkpoints: every model tensor, the optimiser moments and the step counter.

Layout::

    b"GZWCKPT\\0" | u32 version | u32 header length | JSON header | blobs

All integers are little-endian. The header is canonical JSON (sorted keys,
no whitespace) holding the file kind, the model config, counters, optimiser
hyperparameters and a table of blobs (name, dtype, shape, nbytes, crc32).
Blobs follow in table order as little-endian raw arrays. Trained scanpath
decoders are stored in the same container with kind ``scanpath_decoder``.
"""

from dataclasses import dataclass, field
import errno
import json
import logging
import pathlib
import struct
from typing import Dict, Iterable, Tuple
import zlib

import numpy as np

from gaze_world.gazedata import GridSpec
from gaze_world.model import GazeWorldModel, ModelConfig
from gaze_world.numcore import Tensor
from gaze_world.optim import OptimizerState
from gaze_world.scanpath import ScanpathDecoder, ScanpathDecoderConfig

_logger = logging.getLogger(__name__)

MAGIC = b"GZWCKPT\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sII")

_PARAM, _EXP_AVG, _EXP_AVG_SQ = "param/", "adam_m/", "adam_v/"
MODEL_KIND, DECODER_KIND = "model", "scanpath_decoder"


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or an unreadable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    """A blob's checksum or the blob table does not match the header."""


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    optimizer: OptimizerState
    step: int = 0
    dataset_seed: int = 0
    extra: dict = field(default_factory=dict)


# =============================================================================
# Model <-> checkpoint
# =============================================================================


def capture(
    model: GazeWorldModel,
    optimizer: OptimizerState,
    step: int,
    dataset_seed: int,
    extra: dict = None,
) -> Checkpoint:
    """Snapshot (copies) of the model and optimiser."""
    return Checkpoint(
        config=ModelConfig(**model.config.to_dict()),
        params={name: p.data.copy() for name, p in model.named_parameters()},
        optimizer=OptimizerState(
            lr=optimizer.lr,
            weight_decay=optimizer.weight_decay,
            betas=tuple(optimizer.betas),
            eps=optimizer.eps,
            step=optimizer.step,
            exp_avg={k: v.copy() for k, v in optimizer.exp_avg.items()},
            exp_avg_sq={k: v.copy() for k, v in optimizer.exp_avg_sq.items()},
        ),
        step=step,
        dataset_seed=dataset_seed,
        extra=dict(extra or {}),
    )


def _load_params(params: Dict[str, Tensor], stored: Dict[str, np.ndarray]) -> None:
    if set(params) != set(stored):
        missing = sorted(set(params) - set(stored))
        unexpected = sorted(set(stored) - set(params))
        raise CheckpointFormatError(
            f"checkpoint parameters do not fit the model (missing {missing}, unexpected {unexpected})"
        )
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointFormatError(f"{name!r}: stored {stored[name].shape}, model {p.shape}")
        p.data[...] = stored[name]


def restore(ckpt: Checkpoint) -> Tuple[GazeWorldModel, OptimizerState]:
    """Rebuild a model carrying the checkpoint's exact parameter values."""
    model = GazeWorldModel(ckpt.config)
    _load_params(model.parameters(), ckpt.params)
    o = ckpt.optimizer
    optimizer = OptimizerState(
        lr=o.lr,
        weight_decay=o.weight_decay,
        betas=tuple(o.betas),
        eps=o.eps,
        step=o.step,
        exp_avg={k: v.copy() for k, v in o.exp_avg.items()},
        exp_avg_sq={k: v.copy() for k, v in o.exp_avg_sq.items()},
    )
    return model, optimizer


# =============================================================================
# Container
# =============================================================================


def pack_blobs(header: dict, arrays: Iterable[Tuple[str, np.ndarray]]) -> bytes:
    """Prefix, canonical header (with its blob table) and the raw arrays."""
    table, payloads = [], []
    for name, array in arrays:
        raw = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
        table.append(
            {
                "name": name,
                "dtype": array.dtype.name,
                "shape": list(array.shape),
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
            }
        )
        payloads.append(raw)
    encoded = json.dumps(dict(header, blobs=table), sort_keys=True, separators=(",", ":"))
    encoded = encoded.encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(encoded)) + encoded + b"".join(payloads)


def unpack_blobs(data: bytes, kind: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Inverse of :func:`pack_blobs`, checking the prefix, the file kind and every checksum.

    Examples:
        >>> header, arrays = unpack_blobs(pack_blobs({"kind": "demo"}, [("a", np.arange(3))]), "demo")
        >>> arrays["a"].tolist(), len(header["blobs"])
        ([0, 1, 2], 1)
        >>> unpack_blobs(pack_blobs({"kind": "demo"}, []), "model")
        Traceback (most recent call last):
        ...
        gaze_world.checkpoint.CheckpointFormatError: expected a 'model' file, found 'demo'
    """
    if len(data) < _PREFIX.size:
        if not MAGIC.startswith(data[: len(MAGIC)]):
            raise CheckpointFormatError(f"not a checkpoint (magic {data[:8]!r})")
        raise CheckpointTruncatedError(
            f"checkpoint is {len(data)} bytes, shorter than its {_PREFIX.size}-byte prefix"
        )
    magic, version, header_length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    position = _PREFIX.size + header_length
    if len(data) < position:
        raise CheckpointTruncatedError("checkpoint header is cut short")
    try:
        header = json.loads(data[_PREFIX.size : position].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint header: {e}")
    if not isinstance(header, dict):
        raise CheckpointFormatError("checkpoint header is not a JSON object")
    found = header.get("kind", MODEL_KIND)
    if found != kind:
        raise CheckpointFormatError(f"expected a {kind!r} file, found {found!r}")
    table = header.get("blobs")
    if not isinstance(table, list):
        raise CheckpointCorruptError("checkpoint header has no blob table")

    arrays: Dict[str, np.ndarray] = {}
    for i, blob in enumerate(table):
        try:
            name, nbytes, crc = str(blob["name"]), int(blob["nbytes"]), int(blob["crc32"])
            dtype, shape = np.dtype(blob["dtype"]), tuple(int(s) for s in blob["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointCorruptError(f"blob table entry {i} is malformed ({e!r})")
        end = position + nbytes
        if len(data) < end:
            raise CheckpointTruncatedError(
                f"blob {name!r} needs {nbytes} bytes, {len(data) - position} remain"
            )
        raw = data[position:end]
        if zlib.crc32(raw) & 0xFFFFFFFF != crc:
            raise CheckpointCorruptError(f"blob {name!r} fails its checksum")
        try:
            array = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(shape)
        except ValueError as e:
            raise CheckpointCorruptError(f"blob {name!r} does not hold shape {shape}: {e}")
        arrays[name] = array.astype(dtype, copy=True)
        position = end
    if position != len(data):
        raise CheckpointCorruptError(f"{len(data) - position} unexpected trailing bytes")
    return header, arrays


def _group(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


# =============================================================================
# Bytes
# =============================================================================


def _blobs(ckpt: Checkpoint):
    for name in sorted(ckpt.params):
        yield _PARAM + name, ckpt.params[name]
    for name in sorted(ckpt.optimizer.exp_avg):
        yield _EXP_AVG + name, ckpt.optimizer.exp_avg[name]
    for name in sorted(ckpt.optimizer.exp_avg_sq):
        yield _EXP_AVG_SQ + name, ckpt.optimizer.exp_avg_sq[name]


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    o = ckpt.optimizer
    header = {
        "kind": MODEL_KIND,
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "dataset_seed": ckpt.dataset_seed,
        "optimizer": {
            "lr": o.lr,
            "weight_decay": o.weight_decay,
            "betas": list(o.betas),
            "eps": o.eps,
            "step": o.step,
        },
        "extra": ckpt.extra,
    }
    return pack_blobs(header, _blobs(ckpt))


def parse_checkpoint(data: bytes) -> Checkpoint:
    """
    Examples:
        >>> parse_checkpoint(b"NOTACKPT" + bytes(8))
        Traceback (most recent call last):
        ...
        gaze_world.checkpoint.CheckpointFormatError: not a checkpoint (magic b'NOTACKPT')
        >>> parse_checkpoint(b"GZWC")
        Traceback (most recent call last):
        ...
        gaze_world.checkpoint.CheckpointTruncatedError: checkpoint is 4 bytes, shorter than its 16-byte prefix
    """
    header, arrays = unpack_blobs(data, MODEL_KIND)
    try:
        config = ModelConfig(**header["config"])
        o = header["optimizer"]
        optimizer = OptimizerState(
            lr=o["lr"],
            weight_decay=o["weight_decay"],
            betas=tuple(o["betas"]),
            eps=o["eps"],
            step=o["step"],
            exp_avg=_group(arrays, _EXP_AVG),
            exp_avg_sq=_group(arrays, _EXP_AVG_SQ),
        )
        step, dataset_seed = header["step"], header["dataset_seed"]
    except (KeyError, TypeError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint header: {e!r}")
    return Checkpoint(
        config=config,
        params=_group(arrays, _PARAM),
        optimizer=optimizer,
        step=step,
        dataset_seed=dataset_seed,
        extra=header.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path: pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(ckpt))
    _logger.info("saved checkpoint at step %d to %s", ckpt.step, path)


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "no checkpoint", str(path))
    return parse_checkpoint(path.read_bytes())


# =============================================================================
# Scanpath decoders
# =============================================================================


def decoder_bytes(decoder: ScanpathDecoder) -> bytes:
    header = {
        "kind": DECODER_KIND,
        "config": decoder.config.to_dict(),
        "feature_dim": decoder.feature_dim,
        "grid": [decoder.grid.rows, decoder.grid.cols],
    }
    params = {_PARAM + name: p.data for name, p in decoder.named_parameters()}
    return pack_blobs(header, sorted(params.items(), key=lambda item: item[0]))


def parse_decoder(data: bytes) -> ScanpathDecoder:
    header, arrays = unpack_blobs(data, DECODER_KIND)
    try:
        config = ScanpathDecoderConfig(**header["config"])
        decoder = ScanpathDecoder(config, int(header["feature_dim"]), GridSpec(*header["grid"]))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"unreadable decoder header: {e!r}")
    _load_params(decoder.parameters(), _group(arrays, _PARAM))
    return decoder


def save_decoder(decoder: ScanpathDecoder, path: pathlib.Path) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(decoder_bytes(decoder))
    _logger.info("saved scanpath decoder to %s", path)


def load_decoder(path: pathlib.Path) -> ScanpathDecoder:
    path = pathlib.Path(path)
    if not path.exists():
        raise FileNotFoundError(errno.ENOENT, "no scanpath decoder", str(path))
    return parse_decoder(path.read_bytes())

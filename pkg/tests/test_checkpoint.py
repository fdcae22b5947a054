import json
import struct

import numpy as np
import pytest

from gaze_world.checkpoint import (
    MAGIC,
    CheckpointCorruptError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    capture,
    checkpoint_bytes,
    decoder_bytes,
    load_checkpoint,
    load_decoder,
    parse_checkpoint,
    parse_decoder,
    restore,
    save_checkpoint,
    save_decoder,
)
from gaze_world.gazedata import GridSpec, build_sequence
from gaze_world.model import GazeWorldModel
from gaze_world.optim import OptimizerState
from gaze_world.scanpath import ScanpathDecoder, ScanpathDecoderConfig
from gaze_world.train import pretrain_step

from tests.conftest import tiny_model_config


@pytest.fixture
def trained_checkpoint(tiny_world):
    model = GazeWorldModel(tiny_model_config(), seed=3)
    optimizer = OptimizerState(lr=1e-3)
    batch = [
        (img, build_sequence(r, GridSpec(2, 2)))
        for img, r in zip(tiny_world.images, tiny_world.records)
    ]
    for _ in range(2):
        pretrain_step(batch[:4], model, optimizer, tau=0.998)
    return capture(model, optimizer, step=2, dataset_seed=tiny_world.seed, extra={"note": "x"})


def test_save_load_save_is_byte_identical(tmp_path, trained_checkpoint):
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(trained_checkpoint, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_round_trip_restores_exact_state(trained_checkpoint):
    again = parse_checkpoint(checkpoint_bytes(trained_checkpoint))
    assert again.step == 2
    assert again.extra == {"note": "x"}
    assert again.config == trained_checkpoint.config
    model, optimizer = restore(again)
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, trained_checkpoint.params[name]), name
    assert optimizer.step == trained_checkpoint.optimizer.step
    for name, m in trained_checkpoint.optimizer.exp_avg.items():
        assert np.array_equal(optimizer.exp_avg[name], m)
        assert np.array_equal(optimizer.exp_avg_sq[name], trained_checkpoint.optimizer.exp_avg_sq[name])


def test_capture_copies_rather_than_aliases(trained_checkpoint):
    model, optimizer = restore(trained_checkpoint)
    snapshot = capture(model, optimizer, 0, 0)
    model.encoder.pos_embed.data += 1.0
    assert not np.array_equal(snapshot.params["encoder.pos_embed"], model.encoder.pos_embed.data)


def test_corruption_is_detected(trained_checkpoint):
    data = bytearray(checkpoint_bytes(trained_checkpoint))
    data[-3] ^= 0xFF
    with pytest.raises(CheckpointCorruptError):
        parse_checkpoint(bytes(data))


def test_truncation_is_detected(trained_checkpoint):
    data = checkpoint_bytes(trained_checkpoint)
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(data[:-10])
    with pytest.raises(CheckpointTruncatedError):
        parse_checkpoint(data[:20])


def test_magic_and_version_are_checked(trained_checkpoint):
    data = checkpoint_bytes(trained_checkpoint)
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(b"XXXXXXXX" + data[8:])
    _, _, header_length = struct.unpack_from("<8sII", data)
    bumped = struct.pack("<8sII", MAGIC, 99, header_length) + data[16:]
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(bumped)


def test_missing_checkpoint_names_the_path(tmp_path):
    with pytest.raises(FileNotFoundError) as info:
        load_checkpoint(tmp_path / "none.ckpt")
    assert info.value.filename.endswith("none.ckpt")


def _with_header(data, edit):
    _, _, header_length = struct.unpack_from("<8sII", data)
    header = json.loads(data[16 : 16 + header_length])
    edit(header)
    encoded = json.dumps(header).encode()
    return struct.pack("<8sII", MAGIC, 1, len(encoded)) + encoded + data[16 + header_length :]


def test_malformed_blob_tables_are_corrupt(trained_checkpoint):
    data = checkpoint_bytes(trained_checkpoint)
    with pytest.raises(CheckpointCorruptError):
        parse_checkpoint(_with_header(data, lambda h: h.pop("blobs")))
    with pytest.raises(CheckpointCorruptError):
        parse_checkpoint(_with_header(data, lambda h: h["blobs"][0].pop("crc32")))
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(_with_header(data, lambda h: h.pop("optimizer")))


def test_decoder_round_trip(tmp_path):
    grid = GridSpec(2, 2)
    config = ScanpathDecoderConfig(model_dim=8, heads=2, layers=1, dtype="float64")
    decoder = ScanpathDecoder(config, 6, grid, seed=4)
    save_decoder(decoder, tmp_path / "decoder.ckpt")
    again = load_decoder(tmp_path / "decoder.ckpt")
    assert again.config == config
    assert again.feature_dim == 6 and again.grid == grid
    for name, p in decoder.named_parameters():
        assert np.array_equal(again.parameters()[name].data, p.data), name
    assert decoder_bytes(again) == decoder_bytes(decoder)


def test_model_and_decoder_files_are_not_interchangeable(tmp_path, trained_checkpoint):
    decoder = ScanpathDecoder(ScanpathDecoderConfig(model_dim=8, heads=2), 4, GridSpec(2, 2))
    with pytest.raises(CheckpointFormatError):
        parse_checkpoint(decoder_bytes(decoder))
    with pytest.raises(CheckpointFormatError):
        parse_decoder(checkpoint_bytes(trained_checkpoint))
    with pytest.raises(FileNotFoundError):
        load_decoder(tmp_path / "none.ckpt")

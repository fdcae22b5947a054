import logging

import numpy as np
import pytest

from gaze_world.checkpoint import load_checkpoint
from gaze_world.gazedata import GridSpec, build_sequence, synth_world
from gaze_world.model import GazeWorldModel, ModelConfig, init_model
from gaze_world.optim import OptimizerState
from gaze_world.train import TrainConfig, prepare_sequences, pretrain_step, run_pretrain

from tests.conftest import small_model_config, tiny_model_config


def _batch(world, grid, n=4):
    return [(img, build_sequence(r, grid)) for img, r in zip(world.images[:n], world.records[:n])]


def test_step_moves_target_only_by_ema(tiny_world):
    model = GazeWorldModel(tiny_model_config(), seed=0)
    optimizer = OptimizerState(lr=1e-2)
    before = {k: p.data.copy() for k, p in model.target_parameters().items()}
    result = pretrain_step(_batch(tiny_world, GridSpec(2, 2)), model, optimizer, tau=0.9)
    assert result.applied and result.samples == 4
    online = model.encoder_parameters()
    for name, target in model.target_parameters().items():
        assert target.grad is None
        expected = before[name] * 0.9
        expected += 0.1 * online[name].data
        np.testing.assert_allclose(target.data, expected, rtol=1e-14, atol=1e-15)
        assert not np.array_equal(target.data, before[name])


def test_step_reports_mean_losses(tiny_world):
    model = GazeWorldModel(tiny_model_config(), seed=0)
    batch = _batch(tiny_world, GridSpec(2, 2), n=3)
    per_sample = [model.sample_losses(img, seq).l_total.item() for img, seq in batch]
    result = pretrain_step(batch, model, OptimizerState(), tau=1.0)
    assert result.l_total == pytest.approx(np.mean(per_sample), rel=1e-12)


def test_short_sequences_are_skipped(caplog):
    world = synth_world(1, 6, GridSpec(2, 2), patch_size=2, fixations_per_image=1)
    model = GazeWorldModel(tiny_model_config())
    with caplog.at_level(logging.WARNING):
        result = pretrain_step(_batch(world, GridSpec(2, 2)), model, OptimizerState(), tau=0.998)
    assert not result.applied
    assert result.skipped == 4
    assert "fewer than 2" in caplog.text


def test_run_with_only_short_sequences_skips_every_step():
    world = synth_world(1, 6, GridSpec(2, 2), patch_size=2, fixations_per_image=1)
    config = TrainConfig(epochs=2, batch_size=3)
    report = run_pretrain(config, tiny_model_config(), world).report
    assert report.records == []
    assert report.skipped_steps == 4
    assert report.skipped_samples == 12


def test_tau_trace_runs_from_start_to_end(tiny_world):
    config = TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3)
    report = run_pretrain(config, tiny_model_config(), tiny_world).report
    assert len(report.tau_trace) == 9
    assert report.tau_trace[0] == 0.998
    assert report.tau_trace[-1] == 1.0
    assert all(a <= b for a, b in zip(report.tau_trace, report.tau_trace[1:]))


def test_resume_reproduces_the_uninterrupted_run(tmp_path, tiny_world):
    config = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, checkpoint_every=3, ordering="random")
    full = run_pretrain(config, tiny_model_config(), tiny_world, checkpoint_dir=tmp_path)
    middle = load_checkpoint(tmp_path / "step_000003.ckpt")
    assert middle.step == 3
    resumed = run_pretrain(config, tiny_model_config(), tiny_world, resume_from=middle)
    assert resumed.report.losses() == full.report.losses()[3:]
    assert resumed.report.tau_trace == full.report.tau_trace[3:]
    for (name, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(p.data, q.data), name
    assert (tmp_path / "final.ckpt").exists()


def test_training_is_deterministic(tiny_world):
    config = TrainConfig(epochs=1, batch_size=5)
    a = run_pretrain(config, tiny_model_config(), tiny_world).report.losses()
    b = run_pretrain(config, tiny_model_config(), tiny_world).report.losses()
    assert a == b


def test_orderings_share_visited_sets(small_world):
    config = small_model_config()
    gaze = prepare_sequences(small_world, config, "gaze")
    for ordering in ("raster", "random"):
        other = prepare_sequences(small_world, config, ordering)
        assert [set(s.visited) for s in other] == [set(s.visited) for s in gaze]
    raster = prepare_sequences(small_world, config, "raster")
    assert all(list(s.visited) == sorted(s.visited) for s in raster)
    assert prepare_sequences(small_world, config, "random")[0] == prepare_sequences(
        small_world, config, "random"
    )[0]


def test_loss_log_lines(tiny_world, tmp_path):
    config = TrainConfig(epochs=1, batch_size=6)
    report = run_pretrain(config, tiny_model_config(), tiny_world).report
    path = tmp_path / "log.jsonl"
    report.write_jsonl(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert '"l_total"' in lines[0] and '"tau"' in lines[0]
    assert report.summary()["steps"] == 2


@pytest.mark.slow
def test_two_hundred_steps_halve_the_loss():
    world = synth_world(0, 200, GridSpec(4, 4))
    config = TrainConfig(epochs=32, batch_size=32, learning_rate=1e-3, max_steps=200)
    model_config = ModelConfig(embed_dim=32, dtype="float64")
    report = run_pretrain(config, model_config, world).report
    losses = report.losses()
    assert len(losses) == 200
    assert np.mean(losses[-10:]) <= 0.5 * losses[0]


def test_single_step_run_ends_the_schedule_at_one(tiny_world):
    config = TrainConfig(epochs=1, batch_size=len(tiny_world), learning_rate=1e-3)
    result = run_pretrain(config, tiny_model_config(), tiny_world)
    assert result.report.tau_trace == [1.0]
    for name, p in result.model.target_parameters().items():
        assert np.array_equal(p.data, init_model(tiny_model_config(), 0).target_parameters()[name].data)

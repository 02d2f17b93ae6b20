"""Schedule, optimizer, training step and checkpoints."""

import copy
import io
import json
import math

import numpy as np
import pytest

from constcl import cstt
from constcl.backbone import BackboneConfig
from constcl.gradcheck_suite import ToySetup
from constcl.losses import LossConfig
from constcl.regions import RegionGenConfig
from constcl.synth import SpriteWorld, generate_dataset
from constcl.tensor import ShapeError, Tensor
from constcl.train import (
    OptimizerState,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    compute_losses,
    decays,
    lr_at_step,
    model_init,
    sample_batch,
    sgd_momentum_step,
    train_loop,
    train_step,
)


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig(peak_lr=0.2, warmup_steps=50, total_steps=450)
        assert lr_at_step(0, cfg) == 0.0
        assert lr_at_step(50, cfg) == pytest.approx(0.2, abs=1e-12)
        assert lr_at_step(250, cfg) == pytest.approx(0.1, abs=1e-12)
        assert lr_at_step(450, cfg) == pytest.approx(0.0, abs=1e-12)
        assert lr_at_step(25, cfg) == pytest.approx(0.1, abs=1e-12)

    def test_large_batch_peak(self):
        cfg = TrainConfig(peak_lr=40.96, warmup_steps=5, total_steps=100)
        assert lr_at_step(5, cfg) == pytest.approx(40.96, abs=1e-12)

    def test_continuous_at_junction(self):
        cfg = TrainConfig(peak_lr=1.0, warmup_steps=10, total_steps=100)
        assert abs(lr_at_step(9, cfg) - lr_at_step(10, cfg)) < 0.11
        assert abs(lr_at_step(10, cfg) - lr_at_step(11, cfg)) < 1e-3

    def test_no_warmup(self):
        assert lr_at_step(0, TrainConfig(peak_lr=0.5, warmup_steps=0, total_steps=10)) == 0.5

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at_step(501, TrainConfig())
        with pytest.raises(ValueError):
            lr_at_step(-1, TrainConfig())

    @pytest.mark.parametrize("kw", [dict(total_steps=0), dict(warmup_steps=600), dict(batch_size=0),
                                    dict(momentum=1.0)])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()


def scalar_param(value, name):
    return Tensor(np.array([value]), requires_grad=True, name=name)


class TestSGD:
    def test_two_step_hand_recursion(self):
        params = {"w.kernel": scalar_param(1.0, "w.kernel")}
        state = OptimizerState()
        cfg = TrainConfig(momentum=0.9, weight_decay=0.0)
        sgd_momentum_step(params, {"w.kernel": np.array([1.0])}, state, 0.1, cfg)
        assert state.velocity["w.kernel"][0] == 1.0 and params["w.kernel"].data[0] == pytest.approx(0.9, abs=1e-15)
        sgd_momentum_step(params, {"w.kernel": np.array([1.0])}, state, 0.1, cfg)
        assert state.velocity["w.kernel"][0] == pytest.approx(1.9, abs=1e-15)
        assert params["w.kernel"].data[0] == pytest.approx(0.71, abs=1e-15)
        assert state.step == 2

    def test_decay_scoping(self):
        assert decays("trunk.stem.kernel") and not decays("trunk.res2.block0.norm1.beta")
        assert not decays("global_head.fc0.bias") and not decays("x.gamma")
        params = {"c.kernel": scalar_param(2.0, "c.kernel"), "n.beta": scalar_param(2.0, "n.beta")}
        state = OptimizerState()
        cfg = TrainConfig(momentum=0.0, weight_decay=1e-6)
        grads = {k: np.array([0.5]) for k in params}
        sgd_momentum_step(params, grads, state, 1.0, cfg)
        assert state.velocity["c.kernel"][0] == 0.5 + 2e-6
        assert state.velocity["n.beta"][0] == 0.5

    def test_shape_mismatch(self):
        params = {"w.kernel": scalar_param(1.0, "w.kernel")}
        with pytest.raises(ShapeError):
            sgd_momentum_step(params, {"w.kernel": np.ones(2)}, OptimizerState(), 0.1, TrainConfig())

    def test_missing_gradient_leaves_param(self):
        params = {"a.kernel": scalar_param(1.0, "a.kernel"), "b.kernel": scalar_param(1.0, "b.kernel")}
        state = OptimizerState()
        sgd_momentum_step(params, {"a.kernel": np.array([1.0])}, state, 0.1, TrainConfig())
        assert params["b.kernel"].data[0] == 1.0 and "b.kernel" not in state.velocity


@pytest.fixture(scope="module")
def toy():
    setup = ToySetup()
    world = SpriteWorld(height=12, width=12, sprite_count=2, num_classes=2, length=8, size_range=[3, 5])
    dataset = generate_dataset(world, 4, seed=0)
    return setup, dataset


def toy_run(toy, steps, loss=None, sampling=None, train=None, seed=0, model=None, state=None):
    setup, dataset = toy
    bcfg = copy.deepcopy(setup.backbone)
    bcfg.seed = seed
    model = model or model_init(bcfg, setup.heads)
    state = state or OptimizerState()
    train = train or TrainConfig(peak_lr=0.05, warmup_steps=2, total_steps=50, batch_size=2, seed=seed)
    reports = train_loop(model, dataset, state, train, loss or LossConfig(omega=0.1), sampling or setup.sampling,
                         setup.regions, steps=steps)
    return model, state, reports


def params_copy(model):
    return {k: v.data.copy() for k, v in model.parameters().items()}


class TestTrainStep:
    def test_deterministic(self, toy):
        _, _, a = toy_run(toy, 3)
        _, _, b = toy_run(toy, 3)
        assert [r.as_dict() for r in a] == [r.as_dict() for r in b]

    def test_zero_lr_changes_nothing(self, toy):
        setup, dataset = toy
        model = model_init(setup.backbone, setup.heads)
        before = params_copy(model)
        train = TrainConfig(peak_lr=0.0, warmup_steps=0, total_steps=5, batch_size=2)
        train_loop(model, dataset, OptimizerState(), train, LossConfig(), setup.sampling, setup.regions, steps=2)
        for k, v in model.parameters().items():
            np.testing.assert_array_equal(v.data, before[k])

    def test_omega_zero_freezes_region_branch(self, toy):
        setup, dataset = toy
        model = model_init(setup.backbone, setup.heads)
        before = params_copy(model)
        toy_run(toy, 3, loss=LossConfig(omega=0.0), model=model)
        frozen = [k for k in before if k.startswith(("branch_r.", "context_head.", "region_head."))]
        moved = [k for k in before if k.startswith(("branch_g.", "trunk.", "global_head."))]
        assert frozen and moved
        for k in frozen:
            np.testing.assert_array_equal(model.parameters()[k].data, before[k])
        assert any(not np.array_equal(model.parameters()[k].data, before[k]) for k in moved)

    def test_report_fields(self, toy):
        _, _, reports = toy_run(toy, 2)
        r = reports[1]
        assert r.step == 1 and r.lr == pytest.approx(0.025)
        assert r.L_total == pytest.approx(r.L_g + 0.1 * r.L_r, rel=1e-9)
        assert r.negatives_count == 2 * 4 and len(r.match_indices) == 2

    def test_overfits_fixed_batch(self, toy):
        setup, dataset = toy
        model = model_init(setup.backbone, setup.heads)
        ts = setup.backbone.temporal_stride
        batch = sample_batch(dataset, 0, setup.sampling, setup.regions, TrainConfig(batch_size=4), ts)
        train = TrainConfig(peak_lr=0.02, warmup_steps=0, total_steps=50, momentum=0.0)
        state = OptimizerState()
        losses = [train_step(model, batch, state, train, LossConfig(), setup.sampling).L_total for _ in range(50)]
        assert losses[-1] < losses[0]

    @pytest.mark.parametrize("mode", ["dense", "vanilla_region"])
    def test_other_modes_run(self, toy, mode):
        _, _, reports = toy_run(toy, 1, loss=LossConfig(mode=mode))
        assert math.isfinite(reports[0].L_total)

    def test_context_length_zero_equals_vanilla(self, toy):
        setup, _ = toy
        no_ctx = copy.deepcopy(setup.sampling)
        no_ctx.context_length = 0
        _, _, a = toy_run(toy, 3, sampling=no_ctx)
        _, _, b = toy_run(toy, 3, loss=LossConfig(omega=0.1, mode="vanilla_region"), sampling=no_ctx)
        assert [r.as_dict() for r in a] == [r.as_dict() for r in b]

    def test_segment_regions_fall_back_when_filtered_out(self, toy):
        setup, dataset = toy
        regions = RegionGenConfig(method="fh", fh_scale=1e6, fh_min_size=1)
        ts = setup.backbone.temporal_stride
        batch = sample_batch(dataset, 0, setup.sampling, regions, TrainConfig(batch_size=2), ts)
        assert all(len(r) == regions.boxes_per_frame for r in batch.regions_a)

    def test_log_lines(self, toy):
        setup, dataset = toy
        log = io.StringIO()
        model = model_init(setup.backbone, setup.heads)
        train = TrainConfig(peak_lr=0.01, warmup_steps=0, total_steps=4, batch_size=2)
        train_loop(model, dataset, OptimizerState(), train, LossConfig(), setup.sampling, setup.regions, log=log)
        rows = [json.loads(line) for line in log.getvalue().splitlines()]
        assert [r["step"] for r in rows] == [0, 1, 2, 3] and set(rows[0]) == {"step", "L_g", "L_r", "L_total", "lr"}


class TestCheckpoint:
    def test_round_trip_bytes(self, toy, tmp_path):
        model, state, _ = toy_run(toy, 2)
        checkpoint_save(model, state, tmp_path / "a", {"note": 1})
        loaded, lstate, extra = checkpoint_load(tmp_path / "a")
        checkpoint_save(loaded, lstate, tmp_path / "b", extra)
        for f in ("manifest.json", "tensors.bin"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert extra == {"note": 1} and lstate.step == 2

    def test_batch_norm_buffers_round_trip(self, tmp_path):
        model = model_init(BackboneConfig(widths=[4, 4, 4, 4], norm="batch"))
        model.backbone.buffers["trunk.res2.block0.norm1"].running_mean[:] = 3.0
        checkpoint_save(model, OptimizerState(), tmp_path)
        loaded, _, _ = checkpoint_load(tmp_path)
        np.testing.assert_array_equal(loaded.backbone.buffers["trunk.res2.block0.norm1"].running_mean, 3.0)

    def test_wrong_magic_names_file(self, toy, tmp_path):
        model, state, _ = toy_run(toy, 1)
        checkpoint_save(model, state, tmp_path)
        blob = tmp_path / "tensors.bin"
        blob.write_bytes(b"XXXX" + blob.read_bytes()[4:])
        with pytest.raises(cstt.FormatError, match="tensors.bin"):
            checkpoint_load(tmp_path)

    def test_truncated(self, toy, tmp_path):
        model, state, _ = toy_run(toy, 1)
        checkpoint_save(model, state, tmp_path)
        blob = tmp_path / "tensors.bin"
        blob.write_bytes(blob.read_bytes()[:-10])
        with pytest.raises(cstt.FormatError):
            checkpoint_load(tmp_path)

    def test_wrong_version(self, toy, tmp_path):
        model, state, _ = toy_run(toy, 1)
        checkpoint_save(model, state, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["version"] = 99
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(cstt.FormatError, match="version"):
            checkpoint_load(tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            checkpoint_load(tmp_path / "nope")

    def test_split_run_equivalence(self, toy, tmp_path):
        full_model, full_state, full_reports = toy_run(toy, 4)
        part_model, part_state, first = toy_run(toy, 2)
        checkpoint_save(part_model, part_state, tmp_path)
        model, state, _ = checkpoint_load(tmp_path)
        _, _, rest = toy_run(toy, 2, model=model, state=state)
        assert [r.as_dict() for r in first + rest] == [r.as_dict() for r in full_reports]
        for k, v in full_model.parameters().items():
            np.testing.assert_array_equal(model.parameters()[k].data, v.data)


def test_compute_losses_eval_mode_does_not_touch_buffers(toy):
    setup, dataset = toy
    bcfg = copy.deepcopy(setup.backbone)
    bcfg.norm = "batch"
    model = model_init(bcfg, setup.heads)
    batch = sample_batch(dataset, 0, setup.sampling, setup.regions, TrainConfig(batch_size=2), bcfg.temporal_stride)
    before = {k: b.running_mean.copy() for k, b in model.backbone.buffers.items()}
    compute_losses(model, batch, LossConfig(), setup.sampling, training=False)
    for k, b in model.backbone.buffers.items():
        np.testing.assert_array_equal(b.running_mean, before[k])

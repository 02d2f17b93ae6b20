"""Y-branch backbone: parameter layout, shapes, determinism and branch isolation."""

import copy

import numpy as np
import pytest

from constcl.backbone import BackboneConfig, ClipMeta, backbone_init, branch_parameters, parameter_count
from constcl.tensor import ShapeError, Tensor, backward, mean, tsum


def small_config(**kw):
    base = dict(widths=[4, 8, 8, 8], strides=[[1, 1, 1], [2, 2, 2], [1, 1, 1], [1, 1, 1]],
                stem_stride=[1, 2, 2], groups=2, dtype="float64")
    base.update(kw)
    return BackboneConfig(**base)


def conv_block(cin, cout, proj):
    """Two 3x3x3 kernels, two affine norms, optional 1x1x1 projection."""
    return 27 * cin * cout + 27 * cout * cout + 2 * cin + 2 * cout + (cin * cout if proj else 0)


class TestParameterCount:
    def test_default_config_hand_sum(self):
        stem = 27 * 3 * 8
        trunk = conv_block(8, 8, False) + conv_block(8, 16, True) + conv_block(16, 32, True)
        branch = conv_block(32, 64, True) + 2 * 64
        assert stem + trunk + 2 * branch == 393272
        assert parameter_count(BackboneConfig()) == 393272

    @pytest.mark.parametrize("widths", [[8, 16, 32, 64], [8, 16, 32, 32], [4, 4, 8, 8]])
    def test_matches_initialized_tensors(self, widths):
        cfg = BackboneConfig(widths=widths)
        model = backbone_init(cfg)
        assert sum(p.data.size for p in model.params.values()) == parameter_count(cfg)

    def test_equal_widths_skip_projection(self):
        cfg = BackboneConfig(widths=[8, 16, 32, 32], strides=[[1, 1, 1], [2, 2, 2], [1, 2, 2], [1, 1, 1]])
        names = backbone_init(cfg).params
        assert "branch_g.res5.block0.proj.kernel" not in names
        assert "trunk.res4.block0.proj.kernel" in names


class TestInit:
    def test_same_seed_bit_identical(self):
        a, b = backbone_init(BackboneConfig(seed=3)), backbone_init(BackboneConfig(seed=3))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

    def test_branches_initialized_independently(self):
        p = backbone_init(BackboneConfig()).params
        g = p["branch_g.res5.block0.conv1.kernel"].data
        r = p["branch_r.res5.block0.conv1.kernel"].data
        assert g.shape == r.shape and not np.array_equal(g, r)

    def test_norm_affine_init(self):
        p = backbone_init(BackboneConfig()).params
        np.testing.assert_array_equal(p["trunk.res2.block0.norm1.gamma"].data, 1.0)
        np.testing.assert_array_equal(p["trunk.res2.block0.norm1.beta"].data, 0.0)

    @pytest.mark.parametrize("kw", [dict(widths=[8, 16, 32]), dict(norm="layer"), dict(groups=3),
                                    dict(strides=[[1, 1, 1], [0, 2, 2], [1, 1, 1], [1, 1, 1]])])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            backbone_init(BackboneConfig(**kw))


class TestForward:
    def test_default_shapes(self):
        model = backbone_init(BackboneConfig())
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 16, 32, 32, 3)).astype(np.float32))
        out = model.forward(x)
        assert out.C4.shape == (2, 4, 4, 4, 32)
        assert out.C5_g.shape == out.C5_r.shape == (2, 4, 2, 2, 64)

    def test_deterministic(self):
        model = backbone_init(small_config())
        x = Tensor(np.random.default_rng(1).uniform(size=(1, 4, 8, 8, 3)))
        np.testing.assert_array_equal(model.forward(x).C5_r.values.data, model.forward(x).C5_r.values.data)

    def test_wrong_channels(self):
        model = backbone_init(small_config())
        with pytest.raises(ShapeError):
            model.forward(Tensor(np.zeros((1, 4, 8, 8, 4))))

    def test_clip_meta_maps_feature_frames(self):
        cfg = BackboneConfig()
        assert cfg.temporal_stride == 4
        model = backbone_init(cfg)
        x = Tensor(np.zeros((1, 16, 32, 32, 3), np.float32))
        out = model.forward(x, [ClipMeta(start=5, frame_stride=2)])
        assert [out.C5_r.video_frame(0, t) for t in range(4)] == [5, 13, 21, 29]

    def test_zero_gamma_gives_constant_beta(self):
        model = backbone_init(small_config())
        model.params["branch_r.final.gamma"] = Tensor(np.zeros(8), requires_grad=True)
        model.params["branch_r.final.beta"] = Tensor(np.arange(8.0), requires_grad=True)
        x = Tensor(np.random.default_rng(2).uniform(size=(2, 4, 8, 8, 3)))
        reference = model.forward(x).C5_g.values.data.copy()
        out = model.forward(x)
        np.testing.assert_array_equal(out.C5_r.values.data, np.broadcast_to(np.arange(8.0), out.C5_r.shape))
        np.testing.assert_array_equal(out.C5_g.values.data, reference)

    def test_batch_norm_mode_runs_and_updates_stats(self):
        model = backbone_init(small_config(norm="batch"))
        x = Tensor(np.random.default_rng(3).uniform(size=(2, 4, 8, 8, 3)))
        model.forward(x, training=True)
        assert np.any(model.buffers["trunk.res2.block0.norm1"].running_mean != 0)
        before = copy.deepcopy(model.buffers)
        model.forward(x, training=False)
        for k in before:
            np.testing.assert_array_equal(before[k].running_mean, model.buffers[k].running_mean)


class TestBranchIsolation:
    @pytest.mark.parametrize("used, unused", [("C5_g", "branch_r"), ("C5_r", "branch_g")])
    def test_gradients(self, used, unused):
        model = backbone_init(small_config())
        x = Tensor(np.random.default_rng(4).uniform(size=(2, 4, 8, 8, 3)))
        out = getattr(model.forward(x), used).values
        w = Tensor(np.random.default_rng(5).normal(size=out.shape))
        grads = backward(mean(out * w), model.params)
        for name in branch_parameters(model.params, unused):
            np.testing.assert_array_equal(grads[name].data, 0.0)
        trunk = branch_parameters(model.params, "trunk")
        assert all(np.any(grads[n].data != 0) for n in trunk if n.endswith("kernel"))

    def test_sum_of_branches_reaches_both(self):
        model = backbone_init(small_config())
        x = Tensor(np.random.default_rng(6).uniform(size=(1, 4, 8, 8, 3)))
        out = model.forward(x)
        w = Tensor(np.random.default_rng(7).normal(size=out.C5_g.shape))
        grads = backward(tsum(out.C5_g.values * w) + tsum(out.C5_r.values * w), model.params)
        for branch in ("branch_g", "branch_r"):
            assert np.any(grads[f"{branch}.res5.block0.conv1.kernel"].data != 0)

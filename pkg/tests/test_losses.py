"""Contrastive losses against unrolled scalar oracles, hand values and monotonicity properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constcl.losses import (
    LossConfig,
    LossReport,
    dense_loss,
    global_loss,
    info_nce,
    match_correspondence,
    region_loss,
    total_loss,
)
from constcl.tensor import Tensor, backward


def unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def nce_oracle(a, p, negs, tau):
    """Scalar loop with plain exp/log; fine for logits bounded by 1/tau."""
    num = math.exp(float(np.dot(a, p)) / tau)
    den = num + sum(math.exp(float(np.dot(a, n)) / tau) for n in negs)
    return -math.log(num / den)


def argmax_oracle(h, hp):
    out = []
    for i in range(len(h)):
        best, arg = -math.inf, 0
        for j in range(len(hp)):
            s = float(np.dot(h[i], hp[j]))
            if s > best:
                best, arg = s, j
        out.append(arg)
    return np.array(out)


class TestHandValues:
    def test_ln2(self):
        e = np.eye(3)
        assert info_nce(Tensor(e[0]), Tensor(e[1]), Tensor(e[2:3]), 0.7).item() == pytest.approx(math.log(2), abs=1e-9)

    def test_ln3_global(self):
        z = np.eye(4)
        assert global_loss(Tensor(z[:2]), Tensor(z[2:]), 0.1).item() == pytest.approx(math.log(3), abs=1e-9)

    def test_region_orthogonal_negative(self):
        # z_i equals its matched target, negative orthogonal: ln(1 + e^{-1/0.2})
        e = np.eye(3)
        loss, idx = region_loss(Tensor(e[:1]), Tensor(e[:1]), Tensor(e[:1]), Tensor(e[1:2]), 0.2)
        assert loss.item() == pytest.approx(math.log1p(math.exp(-5)), abs=1e-9)
        assert loss.item() == pytest.approx(0.006715, abs=1e-6)
        assert idx.tolist() == [0]

    def test_far_negative(self):
        a = np.array([1.0, 0.0])
        loss = info_nce(Tensor(a), Tensor(a), Tensor(-a[None]), 0.1).item()
        assert loss == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert loss == pytest.approx(2.061e-9, rel=1e-3)

    def test_no_negatives_is_zero(self):
        a = Tensor(np.array([0.6, 0.8]))
        assert info_nce(a, a, None, 0.1).item() == 0.0
        assert info_nce(a, Tensor(np.array([1.0, 0.0])), Tensor(np.zeros((0, 2))), 0.1).item() == 0.0

    def test_single_video_global_is_zero(self):
        assert global_loss(Tensor(np.eye(2)[:1]), Tensor(np.eye(2)[1:]), 0.1).item() == 0.0

    def test_total_loss_arithmetic(self):
        assert total_loss(0.7, 0.5, 0.01, 1).item() == pytest.approx(0.705, abs=1e-15)
        assert total_loss(np.array([1.0, 3.0]), np.array([2.0, 4.0]), 0.5, 2).item() == pytest.approx(3.5)

    def test_default_temperatures_and_weight(self):
        cfg = LossConfig()
        assert (cfg.tau_global, cfg.tau_region, cfg.omega) == (0.1, 0.2, 0.01)


class TestOracles:
    def test_info_nce_50_instances(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d, k = rng.integers(2, 9), rng.integers(1, 6)
            a, p, n = unit(rng, d), unit(rng, d), unit(rng, k, d)
            tau = rng.uniform(0.1, 1.0)
            got = info_nce(Tensor(a), Tensor(p), Tensor(n), tau).item()
            assert got == pytest.approx(nce_oracle(a, p, n, tau), abs=1e-10)

    def test_global_loss_50_instances(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n, d = rng.integers(2, 6), rng.integers(2, 8)
            z, zp = unit(rng, n, d), unit(rng, n, d)
            views = np.concatenate([z, zp])
            expect = 0.0
            for i in range(2 * n):
                pos = (i + n) % (2 * n)
                negs = [views[j] for j in range(2 * n) if j not in (i, pos)]
                expect += nce_oracle(views[i], views[pos], negs, 0.1)
            got = global_loss(Tensor(z), Tensor(zp), 0.1).item()
            assert got == pytest.approx(expect / (2 * n), abs=1e-10)

    def test_region_loss_50_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n, m, k, d = rng.integers(1, 6), rng.integers(1, 6), rng.integers(0, 5), rng.integers(2, 8)
            z, hp, hs, negs = unit(rng, n, d), unit(rng, m, d), unit(rng, n, d), unit(rng, k, d)
            idx = argmax_oracle(hs, hp)
            expect = np.mean([nce_oracle(z[i], hp[idx[i]], negs, 0.2) for i in range(n)])
            got, got_idx = region_loss(Tensor(z), Tensor(hp), Tensor(hs), Tensor(negs), 0.2)
            np.testing.assert_array_equal(got_idx, idx)
            assert got.item() == pytest.approx(expect, abs=1e-10)

    def test_dense_loss_50_instances(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            f, fp, negs = unit(rng, 1, 2, 2, 4), unit(rng, 1, 2, 2, 4), unit(rng, 3, 4)
            a, b = f.reshape(-1, 4), fp.reshape(-1, 4)
            idx = argmax_oracle(a, b)
            expect = sum(nce_oracle(a[i], b[idx[i]], negs, 0.2) for i in range(len(a)))
            got, _ = dense_loss(Tensor(f), Tensor(fp), Tensor(negs), 0.2)
            assert got.item() == pytest.approx(expect, abs=1e-10)

    def test_dense_single_voxel_is_info_nce(self):
        rng = np.random.default_rng(4)
        f, fp, negs = unit(rng, 1, 1, 1, 5), unit(rng, 1, 1, 1, 5), unit(rng, 2, 5)
        got, _ = dense_loss(Tensor(f), Tensor(fp), Tensor(negs), 0.3)
        assert got.item() == pytest.approx(info_nce(Tensor(f[0, 0, 0]), Tensor(fp[0, 0, 0]), Tensor(negs), 0.3).item())

    def test_dense_identical_maps(self):
        f = unit(np.random.default_rng(5), 2, 2, 2, 4)
        loss, idx = dense_loss(Tensor(f), Tensor(f), None, 0.2)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(idx, np.arange(8))

    def test_stable_at_extreme_logits(self):
        a = np.array([1.0, 0.0])
        assert np.isfinite(info_nce(Tensor(a), Tensor(-a), Tensor(a[None]), 1e-4).item())


class TestMatching:
    def test_identity(self):
        h = unit(np.random.default_rng(6), 5, 4)
        np.testing.assert_array_equal(match_correspondence(h, h), np.arange(5))

    def test_permuted_basis(self):
        perm = np.array([2, 0, 1])
        np.testing.assert_array_equal(match_correspondence(np.eye(3), np.eye(3)[perm]), np.argsort(perm))

    def test_random_against_double_loop(self):
        rng = np.random.default_rng(7)
        h, hp = unit(rng, 6, 8), unit(rng, 5, 8)
        np.testing.assert_array_equal(match_correspondence(h, hp), argmax_oracle(h, hp))

    def test_ties_take_lowest_index(self):
        assert match_correspondence(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [0.0, 1.0]])).tolist() == [0]

    def test_min_sim_rule(self):
        h = np.eye(2)
        assert match_correspondence(h, np.array([[1.0, 0.0], [-1.0, 0.0]]), "min_sim").tolist() == [1, 0]

    def test_empty(self):
        with pytest.raises(ValueError):
            match_correspondence(np.zeros((0, 2)), np.eye(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31))
    def test_invariant_to_positive_row_scaling(self, seed):
        rng = np.random.default_rng(seed)
        h, hp = unit(rng, 4, 3), unit(rng, 5, 3)
        scaled = h * rng.uniform(0.1, 10, size=(4, 1))
        np.testing.assert_array_equal(match_correspondence(h, hp), match_correspondence(scaled, hp))


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.05, 2.0))
    def test_nonnegative(self, seed, tau):
        rng = np.random.default_rng(seed)
        a, p, n = unit(rng, 4), unit(rng, 4), unit(rng, 3, 4)
        assert info_nce(Tensor(a), Tensor(p), Tensor(n), tau).item() > 0

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.1, 2.5), st.floats(0.1, 2.5), st.floats(0.2, 1.0))
    def test_monotone_in_similarities(self, theta, phi, tau):
        """Angles to the anchor: shrinking the positive's lowers the loss, shrinking a negative's raises it."""
        a = np.array([1.0, 0.0, 0.0])

        def loss(pos_angle, neg_angle):
            p = Tensor(np.array([math.cos(pos_angle), math.sin(pos_angle), 0.0]))
            n = Tensor(np.array([[math.cos(neg_angle), 0.0, math.sin(neg_angle)]]))
            return info_nce(Tensor(a), p, n, tau).item()

        assert loss(theta, phi) > loss(0.8 * theta, phi)
        assert loss(theta, phi) < loss(theta, 0.8 * phi)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31))
    def test_region_loss_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        z, hp, hs, negs = unit(rng, 4, 3), unit(rng, 3, 3), unit(rng, 4, 3), unit(rng, 2, 3)
        perm = rng.permutation(4)
        a, _ = region_loss(Tensor(z), Tensor(hp), Tensor(hs), Tensor(negs), 0.2)
        b, _ = region_loss(Tensor(z[perm]), Tensor(hp), Tensor(hs[perm]), Tensor(negs), 0.2)
        assert a.item() == pytest.approx(b.item(), abs=1e-12)

    def test_omega_scales_region_gradient(self):
        lr = Tensor(np.array(0.8), requires_grad=True, name="lr")
        lg = Tensor(np.array(1.2), requires_grad=True, name="lg")
        for omega in (0.0, 0.01, 1.0):
            g = backward(total_loss(lg, lr, omega, 1), [lr, lg])
            assert g["lr"].item() == pytest.approx(omega) and g["lg"].item() == 1.0


class TestConfigAndReport:
    @pytest.mark.parametrize("kw", [dict(tau_global=0), dict(omega=-1), dict(mode="pixel"), dict(match="x"),
                                    dict(region_negatives="some")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw).validate()

    def test_report_json(self):
        import json

        rep = LossReport(L_g=1.0, L_r=2.0, L_total=1.02, step=3, lr=0.1)
        assert json.loads(rep.to_json()) == {"step": 3, "L_g": 1.0, "L_r": 2.0, "L_total": 1.02, "lr": 0.1}

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            info_nce(Tensor(np.ones(2)), Tensor(np.ones(3)), None, 0.1)
        with pytest.raises(ValueError):
            global_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), 0.1)
        with pytest.raises(ValueError):
            dense_loss(Tensor(np.ones((1, 1, 1, 2))), Tensor(np.ones((1, 1, 1, 3))), None, 0.1)

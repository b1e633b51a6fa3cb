"""Guidance-fusion tests: channel attention, feature modulation, injection."""

import math

import numpy as np
import pytest

from mgsr.msfm import FuseStage, SaftBlock, fuse_dense, msfm_inject, saft_apply
from mgsr.tensor import Rng, Tensor, grad_check, layer_norm, transpose, tsum


def _gelu_ref(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def _conv_ref(x, w, b, pad):
    bn, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((bn, cin, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((bn, cout, h, wd), dtype=np.float64)
    for i in range(h):
        for j in range(wd):
            patch = xp[:, :, i:i + k, j:j + k]
            out[:, :, i, j] = np.einsum("bcij,ocij->bo", patch, w)
    return out + b.reshape(1, cout, 1, 1)


def _to64(obj):
    for t in obj.params("x").values():
        t.data = t.data.astype(np.float64)
    return obj


def _guidance(rng, b=2, k=2, h=6, w=6, dtype=np.float32):
    depth = Tensor(rng.uniform((b, 1, h, w)).astype(dtype))
    seg = Tensor(rng.uniform((b, k, h, w)).astype(dtype))
    return depth, seg


class TestFuseDense:
    def test_zeroed_excite_halves_guidance(self):
        # sigmoid(0) = 0.5 exactly, so zero excitation weights scale by half.
        rng = Rng(4)
        fuse = FuseStage(rng.spawn(1), channels=3)
        fuse.fc2.w.data[:] = 0.0
        fuse.fc2.b.data[:] = 0.0
        depth, seg = _guidance(rng.spawn(2))
        g_c, g_r = fuse_dense(depth, seg, fuse)
        assert np.array_equal(g_r.data, 0.5 * g_c.data)

    def test_concat_passthrough(self):
        rng = Rng(4)
        fuse = FuseStage(rng.spawn(1), channels=3)
        depth, seg = _guidance(rng.spawn(2))
        g_c, _ = fuse_dense(depth, seg, fuse)
        assert np.array_equal(g_c.data[:, :1], depth.data)
        assert np.array_equal(g_c.data[:, 1:], seg.data)

    def test_matches_independent_rederivation(self):
        rng = Rng(8)
        fuse = _to64(FuseStage(rng.spawn(1), channels=3))
        depth, seg = _guidance(rng.spawn(2), h=5, w=4, dtype=np.float64)
        _, g_r = fuse_dense(depth, seg, fuse)

        g_c = np.concatenate([depth.data, seg.data], axis=1)
        mixed = _conv_ref(g_c, fuse.mix.w.data, fuse.mix.b.data, pad=fuse.mix.pad)
        pooled = mixed.mean(axis=(2, 3))
        hid = _gelu_ref(pooled @ fuse.fc1.w.data + fuse.fc1.b.data)
        weights = 1.0 / (1.0 + np.exp(-(hid @ fuse.fc2.w.data + fuse.fc2.b.data)))
        ref = g_c * weights[:, :, None, None]
        assert np.allclose(g_r.data, ref, atol=1e-12)

    def test_weights_strictly_attenuate(self):
        rng = Rng(15)
        fuse = FuseStage(rng.spawn(1), channels=3)
        depth, seg = _guidance(rng.spawn(2))
        g_c, g_r = fuse_dense(depth, seg, fuse)
        nz = g_c.data != 0
        assert np.all(np.abs(g_r.data) <= np.abs(g_c.data))
        assert np.all(np.abs(g_r.data[nz]) < np.abs(g_c.data[nz]))

    def test_shape_validation(self):
        rng = Rng(1)
        fuse = FuseStage(rng.spawn(1), channels=3)
        depth, seg = _guidance(rng.spawn(2))
        with pytest.raises(ValueError):
            fuse_dense(seg, seg, fuse)  # depth must be single-channel
        small = Tensor(np.zeros((2, 2, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            fuse_dense(depth, small, fuse)
        wide = Tensor(np.zeros((2, 5, 6, 6), dtype=np.float32))
        with pytest.raises(ValueError):
            fuse_dense(depth, wide, fuse)  # channel count must match the stage

    def test_channel_permutation_equivariance(self):
        # Permuting guidance channels together with the stage weights permutes
        # the reweighted output identically.
        rng = Rng(33)
        fuse = FuseStage(rng.spawn(1), channels=3)
        for t in fuse.params("x").values():
            t.data = rng.spawn(5).normal(t.shape).astype(np.float32) * 0.3
        depth, seg = _guidance(rng.spawn(2), b=1)
        _, g_r = fuse_dense(depth, seg, fuse)

        perm = np.array([2, 0, 1])
        stacked = np.concatenate([depth.data, seg.data], axis=1)[:, perm]
        fuse2 = FuseStage(rng.spawn(1), channels=3)
        fuse2.mix.w.data = fuse.mix.w.data[perm][:, perm].copy()
        fuse2.mix.b.data = fuse.mix.b.data[perm].copy()
        fuse2.fc1.w.data = fuse.fc1.w.data[perm].copy()
        fuse2.fc1.b.data = fuse.fc1.b.data.copy()
        fuse2.fc2.w.data = fuse.fc2.w.data[:, perm].copy()
        fuse2.fc2.b.data = fuse.fc2.b.data[perm].copy()
        d2 = Tensor(stacked[:, :1].copy())
        s2 = Tensor(stacked[:, 1:].copy())
        _, g_r2 = fuse_dense(d2, s2, fuse2)
        assert np.allclose(g_r2.data, g_r.data[:, perm], atol=1e-6)


def _feature(rng, b=2, c=4, h=6, w=6, dtype=np.float32):
    return Tensor(rng.normal((b, c, h, w)).astype(dtype))


def _channel_ln_ref(x):
    t = transpose(x, (0, 2, 3, 1))
    return transpose(layer_norm(t), (0, 3, 1, 2)).data


class TestSaftApply:
    def test_zero_init_is_pure_normalization(self):
        rng = Rng(6)
        saft = SaftBlock(rng.spawn(1), in_ch=1, out_ch=4)
        f = _feature(rng.spawn(2))
        sig = Tensor(rng.spawn(3).uniform((2, 1, 6, 6)).astype(np.float32))
        out = saft_apply(f, sig, saft)
        assert np.array_equal(out.data, _channel_ln_ref(f))

    def test_gamma_minus_one_leaves_only_beta(self):
        rng = Rng(6)
        saft = SaftBlock(rng.spawn(1), in_ch=1, out_ch=4)
        saft.g2.b.data[:] = -1.0
        saft.b2.b.data[:] = 0.25
        f = _feature(rng.spawn(2))
        sig = Tensor(rng.spawn(3).uniform((2, 1, 6, 6)).astype(np.float32))
        out = saft_apply(f, sig, saft)
        assert np.allclose(out.data, 0.25, atol=1e-7)

    def test_modulation_tracks_signal(self):
        rng = Rng(16)
        saft = SaftBlock(rng.spawn(1), in_ch=2, out_ch=4)
        saft.g2.w.data[:] = rng.spawn(9).normal(saft.g2.w.shape).astype(np.float32)
        saft.b2.w.data[:] = rng.spawn(10).normal(saft.b2.w.shape).astype(np.float32)
        f = _feature(rng.spawn(2))
        sig_a = Tensor(rng.spawn(3).uniform((2, 2, 6, 6)).astype(np.float32))
        sig_b = Tensor(rng.spawn(4).uniform((2, 2, 6, 6)).astype(np.float32))
        out_a = saft_apply(f, sig_a, saft)
        out_b = saft_apply(f, sig_b, saft)
        assert not np.allclose(out_a.data, out_b.data)

    def test_shape_validation(self):
        rng = Rng(2)
        saft = SaftBlock(rng.spawn(1), in_ch=1, out_ch=4)
        f = _feature(rng.spawn(2))
        two_ch = Tensor(np.zeros((2, 2, 6, 6), dtype=np.float32))
        with pytest.raises(ValueError):
            saft_apply(f, two_ch, saft)
        coarse = Tensor(np.zeros((2, 1, 3, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            saft_apply(f, coarse, saft)
        thin = Tensor(np.zeros((2, 2, 6, 6), dtype=np.float32))
        saft2 = SaftBlock(rng.spawn(3), in_ch=2, out_ch=8)
        with pytest.raises(ValueError):
            saft_apply(f, thin, saft2)


class TestInject:
    def test_same_branches_average_exactly(self):
        rng = Rng(12)
        saft = SaftBlock(rng.spawn(1), in_ch=1, out_ch=4)
        saft.g2.w.data[:] = rng.spawn(5).normal(saft.g2.w.shape).astype(np.float32)
        f = _feature(rng.spawn(2))
        sig = Tensor(rng.spawn(3).uniform((2, 1, 6, 6)).astype(np.float32))
        single = saft_apply(f, sig, saft)
        merged = msfm_inject(f, sig, sig, saft, saft)
        assert np.array_equal(merged.data, single.data)

    def test_distinct_branches_average(self):
        rng = Rng(13)
        saft_h = SaftBlock(rng.spawn(1), in_ch=1, out_ch=4)
        saft_r = SaftBlock(rng.spawn(2), in_ch=3, out_ch=4)
        for s in (saft_h, saft_r):
            s.g2.b.data[:] = 0.0
            s.b2.b.data[:] = 0.0
        saft_h.b2.b.data[:] = 1.0   # branch h: LN + 1
        saft_r.g2.b.data[:] = -1.0  # branch r: exactly 3
        saft_r.b2.b.data[:] = 3.0
        f = _feature(rng.spawn(3))
        g_h = Tensor(rng.spawn(4).uniform((2, 1, 6, 6)).astype(np.float32))
        g_r = Tensor(rng.spawn(5).uniform((2, 3, 6, 6)).astype(np.float32))
        out = msfm_inject(f, g_h, g_r, saft_h, saft_r)
        expect = 0.5 * ((_channel_ln_ref(f) + 1.0) + 3.0)
        assert np.allclose(out.data, expect, atol=1e-6)


class TestGradients:
    def _setup(self):
        rng = Rng(22)
        saft = _to64(SaftBlock(rng.spawn(1), in_ch=2, out_ch=3, hidden=3))
        f = Tensor(rng.spawn(2).normal((1, 3, 4, 4)))
        sig = Tensor(rng.spawn(3).uniform((1, 2, 4, 4)))
        w = Tensor(rng.spawn(4).normal(f.shape))

        def loss(_):
            return tsum(saft_apply(f, sig, saft) * w)

        return saft, loss

    @pytest.mark.parametrize("name", ["g1/w", "g1/b", "g2/w", "g2/b",
                                      "b1/w", "b1/b", "b2/w", "b2/b"])
    def test_all_saft_params(self, name):
        saft, loss = self._setup()
        assert grad_check(loss, saft.params("p")[f"p/{name}"]) < 1e-6

    def test_fuse_params(self):
        rng = Rng(23)
        fuse = _to64(FuseStage(rng.spawn(1), channels=3))
        depth = Tensor(rng.spawn(2).uniform((1, 1, 4, 4)))
        seg = Tensor(rng.spawn(3).uniform((1, 2, 4, 4)))
        w = Tensor(rng.spawn(4).normal((1, 3, 4, 4)))

        def loss(_):
            _, g_r = fuse_dense(depth, seg, fuse)
            return tsum(g_r * w)

        for pname in ("mix/w", "fc1/w", "fc2/w", "fc2/b"):
            assert grad_check(loss, fuse.params("f")[f"f/{pname}"]) < 1e-6, pname

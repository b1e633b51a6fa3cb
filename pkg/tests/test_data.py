"""Scene generation, degradation pipeline, and corpus container tests."""

import math

import numpy as np
import pytest

from mgsr import data
from mgsr.data import (
    DegradationConfig, GuidanceSignals, bicubic_upsample, degrade, gaussian_kernel,
    generate_scene, load_corpus, make_scene_pair, scene_from_bytes, scene_to_bytes,
    write_corpus,
)
from mgsr.metrics import psnr_y


class TestSceneGeneration:
    def test_seg_partitions_image(self):
        for seed in (0, 5, 123, 999):
            p = generate_scene(seed)
            assert np.allclose(p.signals.seg.sum(axis=0), 1.0)
            assert ((p.signals.seg == 0) | (p.signals.seg == 1)).all()

    def test_empty_scene(self):
        p = generate_scene(7, n_primitives=0)
        assert p.signals.hed.max() == 0.0
        assert np.array_equal(p.signals.seg[0], np.ones((64, 64), dtype=np.float32))
        assert p.tags == []

    def test_deterministic(self):
        a, b = generate_scene(31), generate_scene(31)
        assert a.hr.tobytes() == b.hr.tobytes()
        assert a.signals.seg.tobytes() == b.signals.seg.tobytes()
        assert a.tags == b.tags

    def test_tags_cover_each_primitive(self):
        p = generate_scene(12)
        n = int(p.signals.seg[1:].max(axis=(1, 2)).sum())
        # shape + color + texture word per primitive; occluded ones may vanish
        # from the masks but are still listed
        assert len(p.tags) % 3 == 0 and len(p.tags) // 3 >= n
        for i in range(0, len(p.tags), 3):
            assert p.tags[i] in data.SHAPE_WORDS
            assert p.tags[i + 1] in data.COLOR_WORDS
            assert p.tags[i + 2] in data.TEXTURE_WORDS

    def test_vocab_is_small_and_total(self):
        assert len(data.VOCAB) <= 24
        p = generate_scene(3)
        assert all(t in data.VOCAB for t in p.tags)

    def test_edges_near_seg_boundaries(self):
        """Every edge pixel lies within 1 pixel of a class boundary (exhaustive)."""
        for seed in range(8):
            p = generate_scene(seed)
            ids = p.signals.seg.argmax(axis=0)
            boundary = data._boundary(ids)
            near = data._dilate3(boundary)
            edge_px = p.signals.hed[0] > 0
            assert (edge_px <= near).all()

    def test_depth_in_range_and_layered(self):
        p = generate_scene(77)
        d = p.signals.depth
        assert d.min() >= 0 and d.max() < 1
        # front-most instances carry larger z than background
        fg = p.signals.seg[1:].sum(axis=0) > 0
        if fg.any():
            assert d[0][fg].min() > 0


class TestGaussianKernel:
    def test_size_one(self):
        assert np.array_equal(gaussian_kernel(1, 0.5), [[1.0]])

    def test_normalized_and_symmetric(self):
        for size, sigma in ((3, 0.5), (5, 1.0), (9, 2.2)):
            k = gaussian_kernel(size, sigma)
            assert abs(k.sum() - 1.0) < 1e-9
            assert np.allclose(k, k[::-1, :]) and np.allclose(k, k[:, ::-1])
            assert np.allclose(k, k.T)

    def test_center_value_closed_form(self):
        # independent evaluation of exp(-(x^2+y^2)/(2 s^2)) / normalizer
        a = math.exp(-1 / (2 * 0.8 ** 2))
        b = math.exp(-2 / (2 * 0.8 ** 2))
        want = 1.0 / (1 + 4 * a + 4 * b)
        k = gaussian_kernel(3, 0.8)
        assert abs(k[1, 1] - want) < 1e-12
        assert abs(want - 0.272495973510728) < 1e-14  # frozen

    def test_even_size_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            gaussian_kernel(4, 1.0)


class TestDegrade:
    def test_area_downsample_closed_form(self):
        rng = np.random.default_rng(0)
        hr = rng.random((3, 16, 16)).astype(np.float32)
        cfg = DegradationConfig(blur_sigma_range=(1e-6, 1e-6), noise_sigma_range=(0.0, 0.0),
                                downsample_kernel="area", second_order=False)
        # size-1 kernel surrogate: sigma tiny still builds size-3; force size-1
        # by checking the pure pipeline pieces instead
        lr = data.resize(hr, (4, 4), "area")
        want = hr.reshape(3, 4, 4, 4, 4).mean(axis=(2, 4))
        assert np.allclose(lr, want, atol=1e-6)
        # and the degrade wrapper with no blur/noise stays close to block means
        out = degrade(hr, cfg, seed=1)
        assert np.allclose(out, want, atol=1e-3)

    def test_deterministic(self):
        hr = generate_scene(5).hr
        cfg = DegradationConfig()
        assert degrade(hr, cfg, 9).tobytes() == degrade(hr, cfg, 9).tobytes()

    def test_bad_dims_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            degrade(np.zeros((3, 30, 30), dtype=np.float32), DegradationConfig(), 0)

    def test_default_band_over_corpus(self):
        """PSNR of bicubic restoration lands in the 15-30 dB difficulty band."""
        vals = []
        for i in range(64):
            p = make_scene_pair(1000 + i)
            vals.append(psnr_y(bicubic_upsample(p.lr), p.hr))
        vals = np.array(vals)
        assert 15.0 < vals.mean() < 30.0
        assert vals.min() > 15.0 and vals.max() < 30.0

    def test_noise_monotonically_hurts(self):
        """More noise, strictly lower mean PSNR over a fixed 32-scene corpus."""
        means = []
        for sigma in (0.02, 0.06, 0.12):
            cfg = DegradationConfig(noise_sigma_range=(sigma, sigma))
            vals = [psnr_y(bicubic_upsample(p.lr), p.hr)
                    for p in (make_scene_pair(500 + i, cfg) for i in range(32))]
            means.append(np.mean(vals))
        assert means[0] > means[1] > means[2]

    def test_quantization_levels(self):
        hr = generate_scene(8).hr
        cfg = DegradationConfig(noise_sigma_range=(0.0, 0.0), second_order=False,
                                quantize_levels=8)
        lr = degrade(hr, cfg, 3)
        assert len(np.unique(lr)) <= 8 * 3  # at most 8 levels per channel
        assert np.allclose(lr * 7, np.round(lr * 7), atol=1e-5)


class TestCorpus:
    def test_record_roundtrip(self):
        p = make_scene_pair(99)
        q = scene_from_bytes(scene_to_bytes(p), tags=p.tags)
        assert np.array_equal(p.hr, q.hr)
        assert np.array_equal(p.lr, q.lr)
        assert np.array_equal(p.signals.seg, q.signals.seg)
        assert np.array_equal(p.signals.hed, q.signals.hed)
        assert np.array_equal(p.signals.depth, q.signals.depth)
        assert p.tags == q.tags and p.seed == q.seed

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            scene_from_bytes(b"XXXX" + bytes(64))

    def test_corpus_write_load(self, tmp_path):
        written = write_corpus(tmp_path / "c", count=4, seed=7)
        loaded = load_corpus(tmp_path / "c")
        assert len(loaded) == 4
        for a, b in zip(written, loaded):
            assert np.array_equal(a.hr, b.hr) and a.tags == b.tags

    def test_corpus_byte_stable(self, tmp_path):
        write_corpus(tmp_path / "a", count=3, seed=11)
        write_corpus(tmp_path / "b", count=3, seed=11)
        for name in ("manifest.txt", "scene_0000.msc", "scene_0002.msc"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestGuidanceSignals:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            GuidanceSignals(hed=np.zeros((1, 8, 8)), depth=np.zeros((1, 8, 8)),
                            seg=np.zeros((6, 4, 4)))

    def test_validate_catches_bad_seg(self):
        s = GuidanceSignals(hed=np.zeros((1, 8, 8)), depth=np.zeros((1, 8, 8)),
                            seg=np.zeros((6, 8, 8)))
        with pytest.raises(ValueError, match="sum to 1"):
            s.validate()

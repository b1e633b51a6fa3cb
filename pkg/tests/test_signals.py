"""Extractor tests: heads, adapters, trainable budget, alignment training."""

import numpy as np
import pytest

from mgsr import data
from mgsr.signals import (AlignmentPair, Extractor, alignment_loss, attach_adapters,
                          embedding_cosine, extract, finetune, make_alignment_pairs,
                          pgft_full, pgft_lowrank, signal_target, train_teacher,
                          trainable_fraction)
from mgsr.tensor import Rng, Tensor, grad_check


def _scenes(n, size=32, with_lr=True):
    cfg = data.DegradationConfig()
    out = []
    for i in range(n):
        if with_lr:
            out.append(data.make_scene_pair(900 + i, cfg, size=size))
        else:
            out.append(data.generate_scene(900 + i, size=size))
    return out


class TestHeads:
    def test_zero_init_edge_head_outputs_half(self):
        ext = Extractor("edge", Rng(1))
        img = Rng(2).uniform((3, 32, 32)).astype(np.float32)
        out = extract(ext, img)
        assert out.shape == (1, 32, 32)
        assert np.all(out == 0.5)

    def test_zero_init_depth_head_outputs_half(self):
        ext = Extractor("depth", Rng(1))
        img = Rng(2).uniform((3, 16, 16)).astype(np.float32)
        assert np.all(extract(ext, img) == 0.5)

    def test_seg_head_sums_to_one(self):
        ext = Extractor("seg", Rng(3), seg_classes=6)
        img = Rng(4).uniform((3, 16, 16)).astype(np.float32)
        out = extract(ext, img)
        assert out.shape == (6, 16, 16)
        assert np.allclose(out.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(out >= 0)

    def test_embed_token_grid(self):
        ext = Extractor("embed", Rng(5), embed_dim=24)
        img = Rng(6).uniform((3, 32, 32)).astype(np.float32)
        out = extract(ext, img)
        assert out.shape == (16, 24)
        batch = extract(ext, np.stack([img, img]))
        assert batch.shape == (2, 16, 24)
        assert np.array_equal(batch[0], batch[1])

    def test_unknown_task_rejected(self):
        with pytest.raises(ValueError):
            Extractor("flow", Rng(1))

    def test_extract_deterministic(self):
        ext = Extractor("seg", Rng(9))
        img = Rng(10).uniform((3, 16, 16)).astype(np.float32)
        assert np.array_equal(extract(ext, img), extract(ext, img))


class TestAdapters:
    def test_attach_preserves_outputs_bitwise(self):
        # B starts at zero, so base + A @ B must reproduce the base weights.
        ext = Extractor("embed", Rng(7))
        img = Rng(8).uniform((3, 16, 16)).astype(np.float32)
        before = extract(ext, img)
        attach_adapters(ext, 8, Rng(11))
        assert np.array_equal(extract(ext, img), before)

    def test_adapter_sites_and_sizes(self):
        ext = Extractor("embed", Rng(7), width=32, embed_dim=32)
        attach_adapters(ext, 8, Rng(11))
        named = ext.adapter_params()
        assert set(named) == {"backbone/c4/w.lora_a", "backbone/c4/w.lora_b",
                              "head/w.lora_a", "head/w.lora_b"}
        # 32x32 head at rank 8: 512 adapter params stand in for 1024 weights.
        head_adapter = named["head/w.lora_a"].size + named["head/w.lora_b"].size
        assert head_adapter == 512
        assert ext.head.w.size == 1024
        assert named["backbone/c4/w.lora_a"].shape == (32, 8)
        assert named["backbone/c4/w.lora_b"].shape == (8, 32 * 9)

    def test_small_head_skipped(self):
        ext = Extractor("edge", Rng(7))
        attach_adapters(ext, 8, Rng(11))
        assert set(ext.adapter_params()) == {"backbone/c4/w.lora_a",
                                             "backbone/c4/w.lora_b"}

    def test_rank_over_min_dim_rejected(self):
        ext = Extractor("edge", Rng(7), width=32)
        with pytest.raises(ValueError):
            attach_adapters(ext, 33, Rng(11))
        with pytest.raises(ValueError):
            attach_adapters(ext, 0, Rng(11))

    def test_double_attach_rejected(self):
        ext = Extractor("edge", Rng(7))
        attach_adapters(ext, 4, Rng(11))
        with pytest.raises(ValueError):
            attach_adapters(ext, 4, Rng(11))

    def test_trainable_fraction_under_budget(self):
        for task in ("edge", "embed"):
            ext = Extractor(task, Rng(7))
            attach_adapters(ext, 8, Rng(11))
            ext.freeze_base()
            assert trainable_fraction(ext) < 0.15, task


class TestTeacher:
    def test_edge_teacher_improves_over_constant(self):
        scenes = _scenes(6, with_lr=False)
        teacher = train_teacher("edge", scenes, steps=300, rng=Rng(40))
        err = 0.0
        base = 0.0
        for s in scenes:
            gt = signal_target("edge", s)
            pred = extract(teacher, s.hr.astype(np.float32))
            err += float(np.mean((pred - gt) ** 2))
            base += float(np.mean((0.5 - gt) ** 2))
        assert err < 0.6 * base

    def test_embed_targets_shape(self):
        s = _scenes(1, size=64, with_lr=False)[0]
        t = signal_target("embed", s)
        assert t.shape == (16, 5 + s.signals.seg.shape[0])
        # First three stat channels are the per-cell mean color.
        cell = s.hr.reshape(3, 4, 16, 4, 16).mean(axis=(2, 4)).reshape(3, 16).T
        assert np.allclose(t[:, :3], cell, atol=1e-6)

    def test_teacher_requires_scenes(self):
        with pytest.raises(ValueError):
            train_teacher("edge", [], steps=1, rng=Rng(1))


def _identity_pairs(teacher, scenes):
    """Pairs whose student input equals the teacher input."""
    pairs = make_alignment_pairs(teacher, scenes)
    return [AlignmentPair(lr_input=p.hr_input, hr_input=p.hr_input,
                          teacher_feats=p.teacher_feats,
                          teacher_signal=p.teacher_signal) for p in pairs]


class TestAlignment:
    def test_identical_student_on_clean_input_has_zero_loss(self):
        scenes = _scenes(2)
        teacher = Extractor("edge", Rng(50))
        pairs = _identity_pairs(teacher, scenes)
        student = teacher.clone()
        loss = alignment_loss(student, pairs)
        assert loss.item() == 0.0
        loss.backward()
        for name, p in student.base_params().items():
            if p.grad is not None:
                assert not p.grad.any(), name

    def test_lowrank_keeps_base_bytes(self):
        scenes = _scenes(3)
        teacher = train_teacher("edge", scenes, steps=30, rng=Rng(51))
        pairs = make_alignment_pairs(teacher, scenes)
        student = teacher.clone()
        before = {k: v.data.tobytes() for k, v in student.base_params().items()}
        pgft_lowrank(student, 8, pairs, steps=12, rng=Rng(52))
        after = {k: v.data.tobytes() for k, v in student.base_params().items()}
        assert before == after
        moved = any(student.adapters[s][1].data.any() for s in student.adapters)
        assert moved

    def test_full_finetune_moves_base(self):
        scenes = _scenes(3)
        teacher = train_teacher("edge", scenes, steps=30, rng=Rng(53))
        pairs = make_alignment_pairs(teacher, scenes)
        student = teacher.clone()
        before = student.c1.w.data.copy()
        pgft_full(student, pairs, steps=12, rng=Rng(54))
        assert not np.array_equal(student.c1.w.data, before)
        assert not student.adapters

    def test_full_rejects_adapted_student(self):
        teacher = Extractor("edge", Rng(55))
        attach_adapters(teacher, 4, Rng(56))
        with pytest.raises(ValueError):
            pgft_full(teacher, _identity_pairs(Extractor("edge", Rng(55)),
                                               _scenes(1)), 1, Rng(57))

    def test_alignment_reduces_heldout_loss(self):
        scenes = _scenes(20)
        teacher = train_teacher("edge", scenes[:16], steps=300, rng=Rng(58))
        train_pairs = make_alignment_pairs(teacher, scenes[:16])
        held_pairs = make_alignment_pairs(teacher, scenes[16:])
        student = teacher.clone()
        before = alignment_loss(student, held_pairs).item()
        pgft_full(student, train_pairs, steps=200, rng=Rng(59))
        after = alignment_loss(student, held_pairs).item()
        assert after < before

    def test_empty_pairs_rejected(self):
        teacher = Extractor("edge", Rng(60))
        with pytest.raises(ValueError):
            pgft_full(teacher.clone(), [], 1, Rng(61))

    def test_alignment_gradients(self):
        scenes = _scenes(1, size=8)
        teacher = Extractor("edge", Rng(62), width=4)
        pairs = make_alignment_pairs(teacher, scenes)
        student = teacher.clone()
        attach_adapters(student, 2, Rng(63))
        for p in student.params().values():
            p.data = p.data.astype(np.float64)
        pairs64 = [AlignmentPair(p.lr_input.astype(np.float64),
                                 p.hr_input.astype(np.float64),
                                 tuple(f.astype(np.float64) for f in p.teacher_feats),
                                 p.teacher_signal.astype(np.float64)) for p in pairs]

        def loss(_):
            return alignment_loss(student, pairs64)

        for target in (student.c4.w, student.head.w, student.c1.b,
                       student.adapters["backbone/c4/w"][0],
                       student.adapters["backbone/c4/w"][1]):
            assert grad_check(loss, target) < 1e-6


class TestFinetuneDispatch:
    def test_default_strategies(self):
        from mgsr.signals import STRATEGY
        assert STRATEGY == {"edge": "full", "seg": "full",
                            "depth": "lowrank", "embed": "lowrank"}

    def test_dispatch_lowrank_attaches_adapters(self):
        scenes = _scenes(2)
        teacher = train_teacher("depth", scenes, steps=10, rng=Rng(70))
        student = finetune("depth", teacher, scenes, steps=5, rng=Rng(71))
        assert student.adapters
        assert trainable_fraction(student) < 0.15

    def test_dispatch_rejects_unknown(self):
        teacher = Extractor("edge", Rng(72))
        with pytest.raises(ValueError):
            finetune("edge", teacher, _scenes(1), 1, Rng(73), strategy="distill")


class TestCosine:
    def test_identical_grids(self):
        a = Rng(80).normal((16, 32))
        assert embedding_cosine(a, a) == pytest.approx(1.0)

    def test_opposite_grids(self):
        a = Rng(81).normal((16, 32))
        assert embedding_cosine(a, -a) == pytest.approx(-1.0)

    def test_zero_grid(self):
        assert embedding_cosine(np.zeros((16, 4)), np.ones((16, 4))) == 0.0

"""Guidance-signal extractors and prior-guided fine-tuning.

A shared small backbone feeds one task head per signal kind (edge map, depth
map, segmentation planes, or patch embeddings). Teachers are trained against
ground-truth maps on clean images; students are aligned to frozen teachers
from degraded inputs, either by tuning every weight or by low-rank adapters
on designated layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data
from .nn import Adam, Conv2dLayer, LinearLayer
from .tensor import (Rng, Tensor, add, avg_pool2d, gelu, matmul, mse, mul,
                     reshape, sigmoid, softmax, transpose)

TASKS = ("edge", "depth", "seg", "embed")

# Layers that accept low-rank adapters: the last backbone conv always, the
# task head only when both of its matrix dims can hold the rank.
_ADAPTER_SITES = ("backbone/c4/w", "head/w")


@dataclass
class AlignmentPair:
    """One supervision item: degraded input vs frozen-teacher targets."""

    lr_input: np.ndarray
    hr_input: np.ndarray
    teacher_feats: tuple[np.ndarray, np.ndarray]
    teacher_signal: np.ndarray


class Extractor:
    def __init__(self, task: str, rng: Rng, width: int = 32, seg_classes: int = 6,
                 embed_dim: int = 32):
        if task not in TASKS:
            raise ValueError(f"unknown extractor task {task!r}, expected one of {TASKS}")
        self.task = task
        self.width = width
        self.seg_classes = seg_classes
        self.embed_dim = embed_dim
        self.c1 = Conv2dLayer(rng, 3, width, k=3)
        self.c2 = Conv2dLayer(rng, width, width, k=3)
        self.c3 = Conv2dLayer(rng, width, width, k=3)
        self.c4 = Conv2dLayer(rng, width, width, k=3)
        out_ch = {"edge": 1, "depth": 1, "seg": seg_classes, "embed": embed_dim}[task]
        # Zero head keeps sigmoid outputs at 0.5 until training moves them.
        self.head = Conv2dLayer(rng, width, out_ch, k=1, zero=task in ("edge", "depth"))
        self.adapters: dict[str, tuple[Tensor, Tensor]] = {}
        self.rank = 0

    def _conv_layers(self) -> dict[str, Conv2dLayer]:
        return {"backbone/c1": self.c1, "backbone/c2": self.c2,
                "backbone/c3": self.c3, "backbone/c4": self.c4, "head": self.head}

    def base_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, layer in self._conv_layers().items():
            out.update(layer.params(name))
        return out

    def adapter_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for site, (a, b) in self.adapters.items():
            out[f"{site}.lora_a"] = a
            out[f"{site}.lora_b"] = b
        return out

    def params(self) -> dict[str, Tensor]:
        out = self.base_params()
        out.update(self.adapter_params())
        return out

    def _effective_weight(self, site: str, layer: Conv2dLayer) -> Tensor | None:
        pair = self.adapters.get(f"{site}/w")
        if pair is None:
            return None
        a, b = pair
        delta = reshape(matmul(a, b), layer.w.shape)
        return add(layer.w, delta)

    def forward(self, x: Tensor) -> tuple[tuple[Tensor, Tensor], Tensor]:
        """Returns ((tap2, tap4), signal) for input (B, 3, H, W) in [0, 1]."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"extractor input must be (B, 3, H, W), got {x.shape}")
        h = gelu(self.c1(x))
        h = gelu(self.c2(h))
        tap2 = h
        h = gelu(self.c3(h))
        h = gelu(self.c4(h, w_override=self._effective_weight("backbone/c4", self.c4)))
        tap4 = h
        out = self.head(tap4, w_override=self._effective_weight("head", self.head))
        if self.task in ("edge", "depth"):
            signal = sigmoid(out)
        elif self.task == "seg":
            signal = softmax(out, axis=1)
        else:
            b, d, hh, ww = out.shape
            if hh % 4 or ww % 4:
                raise ValueError(f"embed extractor needs sides divisible by 4, got {out.shape}")
            pooled = avg_pool2d(out, hh // 4)
            signal = transpose(reshape(pooled, (b, d, 16)), (0, 2, 1))
        return (tap2, tap4), signal

    def clone(self) -> "Extractor":
        """Deep copy sharing no arrays; adapters are copied as well."""
        twin = Extractor(self.task, Rng(0), self.width, self.seg_classes, self.embed_dim)
        for name, layer in twin._conv_layers().items():
            src = self._conv_layers()[name]
            layer.w = Tensor(src.w.data.copy(), requires_grad=src.w.requires_grad)
            layer.b = Tensor(src.b.data.copy(), requires_grad=src.b.requires_grad)
        twin.rank = self.rank
        for site, (a, b) in self.adapters.items():
            twin.adapters[site] = (Tensor(a.data.copy(), requires_grad=a.requires_grad),
                                   Tensor(b.data.copy(), requires_grad=b.requires_grad))
        return twin

    def freeze_base(self) -> None:
        for p in self.base_params().values():
            p.requires_grad = False


def attach_adapters(ext: Extractor, rank: int, rng: Rng) -> Extractor:
    """Install low-rank (A, B) factors on the designated layers.

    A is Gaussian, B is zero, so the adapted model starts identical to the
    base. Rank must fit the smaller matrix dimension of every eligible site.
    """
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    if ext.adapters:
        raise ValueError("extractor already has adapters attached")
    layers = ext._conv_layers()
    for site in _ADAPTER_SITES:
        layer = layers[site.rsplit("/", 1)[0]]
        cout, cin, kh, kw = layer.w.shape
        rows, cols = cout, cin * kh * kw
        if site == "backbone/c4/w" and rank > min(rows, cols):
            raise ValueError(
                f"rank {rank} exceeds min dim {min(rows, cols)} of {site}")
        if min(rows, cols) < rank:
            continue  # head too small for this rank; adapter skipped
        a = rng.normal((rows, rank), dtype="f32", std=1.0 / math.sqrt(rank))
        b = np.zeros((rank, cols), dtype=np.float32)
        ext.adapters[site] = (Tensor(a, requires_grad=True),
                              Tensor(b, requires_grad=True))
    ext.rank = rank
    return ext


def trainable_fraction(ext: Extractor) -> float:
    total = 0
    trainable = 0
    for p in ext.params().values():
        total += p.size
        if p.requires_grad:
            trainable += p.size
    return trainable / total


def extract(ext: Extractor, image: np.ndarray) -> np.ndarray:
    """Run one image (3, H, W) or batch (B, 3, H, W); returns the signal map."""
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    _, out = ext.forward(Tensor(arr, requires_grad=False))
    return out.data[0] if single else out.data


def embedding_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity of two flattened token grids."""
    fa = np.asarray(a, dtype=np.float64).ravel()
    fb = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(fa) * np.linalg.norm(fb)
    if denom == 0.0:
        return 0.0
    return float(np.dot(fa, fb) / denom)


def _cell_stats(scene: data.ScenePair, grid: int = 4) -> np.ndarray:
    """Per-cell regression targets: mean RGB, mean depth, edge density,
    class histogram. Shape (grid*grid, 5 + K)."""
    hr = scene.hr
    sig = scene.signals
    k = sig.seg.shape[0]
    size = hr.shape[1]
    cell = size // grid
    feats = np.concatenate([hr, sig.depth, sig.hed, sig.seg], axis=0)
    c = feats.shape[0]
    blocks = feats.reshape(c, grid, cell, grid, cell).mean(axis=(2, 4))
    return blocks.reshape(c, grid * grid).T.astype(np.float32)


def signal_target(task: str, scene: data.ScenePair) -> np.ndarray:
    """Ground-truth supervision map for a teacher of the given task."""
    if task == "edge":
        return scene.signals.hed.astype(np.float32)
    if task == "depth":
        return scene.signals.depth.astype(np.float32)
    if task == "seg":
        return scene.signals.seg.astype(np.float32)
    if task == "embed":
        return _cell_stats(scene)
    raise ValueError(f"unknown extractor task {task!r}")


def train_teacher(task: str, scenes: list[data.ScenePair], steps: int, rng: Rng,
                  width: int = 32, seg_classes: int = 6, embed_dim: int = 32,
                  lr: float = 1e-3, batch: int = 4) -> Extractor:
    """Fit a teacher on clean images against ground-truth maps.

    The embedding teacher trains through a throwaway linear head that
    regresses per-cell scene statistics; the head is dropped afterwards.
    """
    if not scenes:
        raise ValueError("teacher training needs at least one scene")
    ext = Extractor(task, rng.spawn(1), width=width, seg_classes=seg_classes,
                    embed_dim=embed_dim)
    targets = np.stack([signal_target(task, s) for s in scenes])
    inputs = np.stack([s.hr for s in scenes]).astype(np.float32)
    aux = None
    if task == "embed":
        aux = LinearLayer(rng.spawn(2), embed_dim, targets.shape[-1])
    params = ext.base_params()
    if aux is not None:
        params = dict(params)
        params.update(aux.params("aux"))
    opt = Adam(lr=lr)
    batch = min(batch, len(scenes))
    for step in range(steps):
        idx = rng.spawn(10_000 + step).integers(0, len(scenes), batch)
        x = Tensor(inputs[idx], requires_grad=False)
        y = Tensor(targets[idx], requires_grad=False)
        _, out = ext.forward(x)
        pred = aux(out) if aux is not None else out
        loss = mse(pred, y)
        opt.zero_grad(params)
        loss.backward()
        opt.step(params)
    return ext


def make_alignment_pairs(teacher: Extractor,
                         scenes: list[data.ScenePair]) -> list[AlignmentPair]:
    """Precompute frozen-teacher targets on clean images.

    Scenes must carry a degraded input; the student will see its upsampled
    form while matching the teacher's view of the clean image.
    """
    pairs = []
    for scene in scenes:
        if scene.lr is None:
            raise ValueError("alignment scenes need a degraded input")
        up = data.bicubic_upsample(scene.lr, scene.hr.shape[1] // scene.lr.shape[1])
        feats, signal = teacher.forward(
            Tensor(scene.hr[None].astype(np.float32), requires_grad=False))
        pairs.append(AlignmentPair(
            lr_input=up.astype(np.float32),
            hr_input=scene.hr.astype(np.float32),
            teacher_feats=(feats[0].data[0].copy(), feats[1].data[0].copy()),
            teacher_signal=signal.data[0].copy()))
    return pairs


def _alignment_loss(ext: Extractor, pairs: list[AlignmentPair], idx) -> Tensor:
    x = Tensor(np.stack([pairs[i].lr_input for i in idx]), requires_grad=False)
    t2 = Tensor(np.stack([pairs[i].teacher_feats[0] for i in idx]), requires_grad=False)
    t4 = Tensor(np.stack([pairs[i].teacher_feats[1] for i in idx]), requires_grad=False)
    ts = Tensor(np.stack([pairs[i].teacher_signal for i in idx]), requires_grad=False)
    (f2, f4), sig = ext.forward(x)
    feat_term = mul(add(mse(f2, t2), mse(f4, t4)), 0.5)
    return add(feat_term, mse(sig, ts))


def alignment_loss(ext: Extractor, pairs: list[AlignmentPair]) -> Tensor:
    """Feature-and-signal alignment objective over all pairs (equal weight)."""
    if not pairs:
        raise ValueError("alignment needs at least one pair")
    return _alignment_loss(ext, pairs, list(range(len(pairs))))


def _run_alignment(ext: Extractor, params: dict[str, Tensor],
                   pairs: list[AlignmentPair], steps: int, rng: Rng,
                   lr: float, batch: int) -> Extractor:
    if not pairs:
        raise ValueError("alignment needs at least one pair")
    opt = Adam(lr=lr)
    batch = min(batch, len(pairs))
    for step in range(steps):
        idx = rng.spawn(20_000 + step).integers(0, len(pairs), batch)
        loss = _alignment_loss(ext, pairs, idx)
        opt.zero_grad(params)
        loss.backward()
        opt.step(params)
    return ext


def pgft_full(student: Extractor, pairs: list[AlignmentPair], steps: int,
              rng: Rng, lr: float = 1e-3, batch: int = 4) -> Extractor:
    """Align every student weight to the frozen teacher targets."""
    if student.adapters:
        raise ValueError("full fine-tuning expects a student without adapters")
    for p in student.base_params().values():
        p.requires_grad = True
    return _run_alignment(student, student.base_params(), pairs, steps, rng, lr, batch)


def pgft_lowrank(student: Extractor, rank: int, pairs: list[AlignmentPair],
                 steps: int, rng: Rng, lr: float = 1e-2,
                 batch: int = 4) -> Extractor:
    """Freeze the student and align only low-rank adapters."""
    attach_adapters(student, rank, rng.spawn(1))
    student.freeze_base()
    frac = trainable_fraction(student)
    if frac >= 0.15:
        raise AssertionError(f"adapter budget exceeded: {frac:.3f} of weights trainable")
    return _run_alignment(student, student.adapter_params(), pairs, steps, rng, lr, batch)


# Default fine-tuning strategy per task: dense map tasks move the whole
# network; structural/embedding tasks only adapt.
STRATEGY = {"edge": "full", "seg": "full", "depth": "lowrank", "embed": "lowrank"}


def finetune(task: str, teacher: Extractor, scenes: list[data.ScenePair],
             steps: int, rng: Rng, strategy: str | None = None,
             rank: int = 8, lr: float | None = None) -> Extractor:
    """Strategy dispatcher: builds the student from the teacher and aligns it."""
    mode = strategy or STRATEGY[task]
    pairs = make_alignment_pairs(teacher, scenes)
    student = teacher.clone()
    if mode == "full":
        return pgft_full(student, pairs, steps, rng,
                         lr=1e-3 if lr is None else lr)
    if mode == "lowrank":
        return pgft_lowrank(student, rank, pairs, steps, rng,
                            lr=1e-2 if lr is None else lr)
    raise ValueError(f"unknown fine-tuning strategy {mode!r}")

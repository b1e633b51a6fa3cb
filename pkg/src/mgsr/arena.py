"""Conditioning analytics: signal dominance tournaments and prompt routing.

Two experiment drivers live here. `arena_run` feeds the model contradictory
guidance (each modality sourced from a different scene) and lets a judge
decide which modality the output followed; aggregated counts rank modalities
by how strongly they steer generation. `probe_run` routes two different text
prompts to the wide (outer) and narrow (inner) blocks of the backbone and
judges which prompt won the low-level and high-level aspects of the output.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations
from typing import Callable

import numpy as np

from . import data
from .metrics import rgb_to_ycbcr
from .tensor import Rng, Tensor

CELL_ORDER = ("P1+P1", "P1+P2", "P2+P1", "P2+P2", "others")
COMBO_BEFORE = "P1+P2"   # P1 feeds wide blocks, P2 feeds narrow blocks
COMBO_AFTER = "P2+P1"    # prompts swapped


# ---------------------------------------------------------------------------
# outcome bookkeeping
# ---------------------------------------------------------------------------

class OutcomeMatrix:
    """Square win-count table; wins[i][j] = times signal i beat signal j."""

    def __init__(self, names: list[str], wins=None):
        self.names = list(names)
        n = len(self.names)
        if n < 1:
            raise ValueError("outcome matrix needs at least one signal")
        if len(set(self.names)) != n:
            raise ValueError(f"duplicate signal names: {self.names}")
        if wins is None:
            self.wins = np.zeros((n, n), dtype=np.int64)
        else:
            self.wins = np.asarray(wins, dtype=np.int64)
            if self.wins.shape != (n, n):
                raise ValueError(
                    f"wins must be {n}x{n} for {n} signals, got {self.wins.shape}")

    def record(self, winner: str, loser: str) -> None:
        self.wins[self.names.index(winner), self.names.index(loser)] += 1

    def total(self) -> int:
        return int(self.wins.sum())

    def to_text(self) -> str:
        lines = [",".join(self.names)]
        for row in self.wins:
            lines.append(",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "OutcomeMatrix":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        names = lines[0].split(",")
        rows = [[int(v) for v in ln.split(",")] for ln in lines[1:]]
        return cls(names, np.array(rows, dtype=np.int64))


@dataclass(frozen=True)
class Judgement:
    """One probe verdict: prompt routing plus per-aspect winners."""

    combo: str   # which prompt fed the wide blocks, which the narrow
    c_low: str   # prompt the output matched on low-level attributes
    c_high: str  # prompt the output matched on high-level structure

    def __post_init__(self):
        for field in (self.c_low, self.c_high):
            if field not in ("P1", "P2", "other"):
                raise ValueError(f"verdict must be P1/P2/other, got {field!r}")


@dataclass(frozen=True)
class ArenaReference:
    """What a judge may inspect for one side of a pairwise bout."""

    signal: str           # modality name
    target: np.ndarray    # that modality's ground-truth map in the source scene
    image: np.ndarray     # the source scene's clean image


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))


class OracleJudge:
    """Picks the reference whose ground-truth map better matches the output.

    `maps` holds one image->map extractor per modality; the judge compares
    each reference's target map against the map extracted from the generated
    image and picks the lower-MSE side. Exact ties abstain.
    """

    def __init__(self, maps: dict[str, Callable[[np.ndarray], np.ndarray]]):
        self.maps = dict(maps)

    def __call__(self, generated: np.ndarray,
                 refs: tuple[ArenaReference, ArenaReference]):
        scores = []
        for ref in refs:
            fn = self.maps.get(ref.signal)
            if fn is None:
                raise ValueError(f"no extractor map for signal {ref.signal!r}")
            scores.append(_mse(fn(generated), ref.target))
        if scores[0] == scores[1]:
            return "other"
        return 0 if scores[0] < scores[1] else 1


class PixelJudge:
    """Fallback judge: nearer source image in plain pixel MSE wins."""

    def __call__(self, generated: np.ndarray,
                 refs: tuple[ArenaReference, ArenaReference]):
        scores = [_mse(generated, ref.image) for ref in refs]
        if scores[0] == scores[1]:
            return "other"
        return 0 if scores[0] < scores[1] else 1


def _luma(img: np.ndarray) -> np.ndarray:
    return rgb_to_ycbcr(img)[0]


def proxy_maps(seg_classes: int = 6) -> dict[str, Callable]:
    """Cheap closed-form image->map stand-ins for the oracle judge.

    These are not trained extractors; they only need to be deterministic and
    directionally sensitive to the corresponding scene property.
    """

    def edge_map(img):
        y = _luma(img)
        gy = np.abs(np.diff(y, axis=0, prepend=y[:1]))
        gx = np.abs(np.diff(y, axis=1, prepend=y[:, :1]))
        g = gy + gx
        peak = float(g.max())
        return (g / peak if peak > 0 else g)[None].astype(np.float32)

    def depth_map(img):
        return (1.0 - _luma(img))[None].astype(np.float32)

    def seg_map(img):
        y = _luma(img)
        idx = np.clip((y * seg_classes).astype(np.int64), 0, seg_classes - 1)
        planes = np.zeros((seg_classes,) + y.shape, dtype=np.float32)
        for c in range(seg_classes):
            planes[c] = idx == c
        return planes

    return {"hed": edge_map, "depth": depth_map, "seg": seg_map}


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def rank_signals(matrix: OutcomeMatrix) -> list[tuple[str, int, int, int]]:
    """Order signals by wins; returns (name, success, failure, rank) rows."""
    wins = matrix.wins
    if (wins < 0).any():
        raise ValueError("win counts must be nonnegative")
    n = len(matrix.names)
    off = ~np.eye(n, dtype=bool)
    success = np.where(off, wins, 0).sum(axis=1)
    failure = np.where(off, wins, 0).sum(axis=0)
    for i in range(n):
        participations = int(sum(wins[i, j] + wins[j, i]
                                 for j in range(n) if j != i))
        if int(success[i] + failure[i]) != participations:
            raise ValueError(f"inconsistent totals for {matrix.names[i]!r}")
    order = sorted(range(n),
                   key=lambda i: (-int(success[i]), int(failure[i]), matrix.names[i]))
    return [(matrix.names[i], int(success[i]), int(failure[i]), r + 1)
            for r, i in enumerate(order)]


def block_semantics_table(judgements: list[Judgement]) -> dict[str, dict[str, float]]:
    """Percentage of (c_low + c_high) combinations per prompt routing."""
    if not judgements:
        raise ValueError("no judgements to aggregate")
    by_combo: dict[str, list[Judgement]] = {}
    for j in judgements:
        by_combo.setdefault(j.combo, []).append(j)
    table: dict[str, dict[str, float]] = {}
    for combo, rows in by_combo.items():
        counts = dict.fromkeys(CELL_ORDER, 0)
        for j in rows:
            cell = f"{j.c_low}+{j.c_high}"
            counts[cell if cell in counts else "others"] += 1
        table[combo] = {k: 100.0 * v / len(rows) for k, v in counts.items()}
    return table


def format_table(table: dict[str, dict[str, float]]) -> str:
    head = "combo".ljust(10) + "".join(c.rjust(9) for c in CELL_ORDER)
    lines = [head]
    for combo, row in table.items():
        lines.append(combo.ljust(10) + "".join(f"{row[c]:9.1f}" for c in CELL_ORDER))
    return "\n".join(lines) + "\n"


def format_ranking(rows: list[tuple[str, int, int, int]]) -> str:
    head = f"{'signal':<10}{'success':>9}{'failure':>9}{'rank':>6}"
    lines = [head]
    for name, s, f, r in rows:
        lines.append(f"{name:<10}{s:>9}{f:>9}{r:>6}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def _mixed_signals(base: data.GuidanceSignals, other: data.GuidanceSignals,
                   modality: str) -> data.GuidanceSignals:
    if modality not in ("hed", "depth", "seg"):
        raise ValueError(f"unknown modality {modality!r}")
    return replace(base, **{modality: getattr(other, modality)})


def arena_run(signals: list[str], scenes: list[data.ScenePair], judge,
              model, steps: int = 8, eta: float = 0.0) -> OutcomeMatrix:
    """Pairwise bouts: modality i comes from each scene, modality j from the
    next scene in the corpus, and the judge decides which one the output
    followed. Abstentions are excluded from the counts.
    """
    matrix = OutcomeMatrix(signals)
    if not scenes:
        return matrix
    n = len(scenes)
    for p, (a_name, b_name) in enumerate(combinations(signals, 2)):
        for idx, scene in enumerate(scenes):
            donor = scenes[(idx + 1) % n]
            mixed = _mixed_signals(scene.signals, donor.signals, b_name)
            sr = model.sample(scene.lr, steps=steps,
                              rng=Rng(scene.seed).spawn(7000 + p), eta=eta,
                              tags=None, signals=mixed)
            refs = (ArenaReference(a_name, getattr(scene.signals, a_name), scene.hr),
                    ArenaReference(b_name, getattr(donor.signals, b_name), donor.hr))
            verdict = judge(sr, refs)
            if verdict == 0:
                matrix.record(a_name, b_name)
            elif verdict == 1:
                matrix.record(b_name, a_name)
            elif verdict != "other":
                raise ValueError(f"judge returned {verdict!r}")
    return matrix


_SHAPE_TEMPLATES: dict[tuple[str, int], np.ndarray] = {}


def _shape_template(word: str, size: int) -> np.ndarray:
    """Edge map of a canonical centered primitive, for structure matching."""
    key = (word, size)
    cached = _SHAPE_TEMPLATES.get(key)
    if cached is not None:
        return cached
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    r = size * 0.28
    if word == "disc":
        mask = (xx - c) ** 2 + (yy - c) ** 2 <= r * r
    elif word == "box":
        mask = (np.abs(xx - c) <= r) & (np.abs(yy - c) <= r)
    elif word == "wedge":
        mask = ((yy - c) <= r) & ((yy - c) >= -r) & \
               (np.abs(xx - c) <= (yy - c + r) / 2.0)
    else:
        raise ValueError(f"no template for shape {word!r}")
    m = mask.astype(np.float64)
    gy = np.abs(np.diff(m, axis=0, prepend=m[:1]))
    gx = np.abs(np.diff(m, axis=1, prepend=m[:, :1]))
    edge = gy + gx
    edge -= edge.mean()
    norm = np.sqrt((edge * edge).sum())
    tpl = edge / norm if norm > 0 else edge
    _SHAPE_TEMPLATES[key] = tpl
    return tpl


def _structure_score(img: np.ndarray, shape_word: str) -> float:
    """Translation-invariant correlation between the output's edge energy and
    a canonical shape template, via FFT cross-correlation."""
    y = _luma(img).astype(np.float64)
    gy = np.abs(np.diff(y, axis=0, prepend=y[:1]))
    gx = np.abs(np.diff(y, axis=1, prepend=y[:, :1]))
    edge = gy + gx
    edge -= edge.mean()
    norm = np.sqrt((edge * edge).sum())
    if norm == 0:
        return 0.0
    edge /= norm
    tpl = _shape_template(shape_word, edge.shape[0])
    corr = np.fft.irfft2(np.fft.rfft2(edge) * np.conj(np.fft.rfft2(tpl)),
                         s=edge.shape)
    return float(corr.max())


def _prompt_words(tags: list[str]) -> tuple[str, str]:
    color = next((t for t in tags if t in data.COLOR_WORDS), None)
    shape = next((t for t in tags if t in data.SHAPE_WORDS), None)
    if color is None or shape is None:
        raise ValueError(f"prompt needs one color and one shape word, got {tags}")
    return color, shape


def _judge_low(img: np.ndarray, p1: list[str], p2: list[str]) -> str:
    """Low-level verdict: whose palette color the output's mean color matches."""
    mean = img.reshape(3, -1).mean(axis=1)
    d1 = float(np.sum((mean - np.array(data.palette_rgb(_prompt_words(p1)[0]))) ** 2))
    d2 = float(np.sum((mean - np.array(data.palette_rgb(_prompt_words(p2)[0]))) ** 2))
    if d1 == d2:
        return "other"
    return "P1" if d1 < d2 else "P2"


def _judge_high(img: np.ndarray, p1: list[str], p2: list[str]) -> str:
    """High-level verdict: whose shape template correlates with the output."""
    s1 = _structure_score(img, _prompt_words(p1)[1])
    s2 = _structure_score(img, _prompt_words(p2)[1])
    if s1 == s2:
        return "other"
    return "P1" if s1 > s2 else "P2"


def probe_run(model, scenes: list[data.ScenePair], p1: list[str], p2: list[str],
              steps: int = 8) -> list[Judgement]:
    """Route prompt pairs to wide vs narrow blocks and judge both aspects.

    Wide blocks are the outer two resolution levels; narrow blocks are the
    innermost level plus the bottleneck. Runs each scene twice: once with
    (P1 wide, P2 narrow) and once swapped.
    """
    levels = len(model.cfg.widths)
    narrow_level = levels - 1
    wide, narrow = [], []
    for info in model.block_info:
        (narrow if info.level == narrow_level else wide).append(info.name)
    if not wide or not narrow:
        raise ValueError("probe needs both wide and narrow blocks; "
                         f"got widths {model.cfg.widths}")
    out: list[Judgement] = []
    for scene in scenes:
        for combo, wide_p, narrow_p in ((COMBO_BEFORE, p1, p2),
                                        (COMBO_AFTER, p2, p1)):
            overrides = {}
            for name in wide:
                overrides[name] = _embed_prompt(model, wide_p)
            for name in narrow:
                overrides[name] = _embed_prompt(model, narrow_p)
            sr = model.sample(scene.lr, steps=steps,
                              rng=Rng(scene.seed).spawn(8000), eta=0.0,
                              tags=None, signals=scene.signals,
                              e_t_overrides=overrides)
            out.append(Judgement(combo=combo,
                                 c_low=_judge_low(sr, p1, p2),
                                 c_high=_judge_high(sr, p1, p2)))
    return out


def _embed_prompt(model, tags: list[str]) -> Tensor:
    arr = model.text.embed(tags, length=model.cfg.text_len)
    return Tensor(arr[None], requires_grad=False)

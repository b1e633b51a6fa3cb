"""Procedural scene generator, degradation pipeline, and corpus container.

Scenes are stacks of 2-5 colored, optionally textured primitives (discs,
boxes, triangular wedges) at distinct depths over a vertical gradient
background. Every scene carries exact ground-truth guidance maps derived from
the rasterizer itself: an edge map (instance boundaries dilated by one
pixel), a depth map (z of the front-most surface, background 0), and one-hot
instance segmentation planes (plane 0 = background).

Everything here is plain numpy; nothing in the data path needs gradients.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import Rng

SCALE = 4  # fixed LR factor for the whole pipeline

SHAPE_WORDS = ("disc", "box", "wedge")
COLOR_WORDS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "teal")
TEXTURE_WORDS = ("plain", "striped", "dotted")
NULL_WORD = "scene"  # stands in when a caller has no tags
VOCAB = (NULL_WORD,) + SHAPE_WORDS + COLOR_WORDS + TEXTURE_WORDS

_PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "cyan": (0.10, 0.80, 0.80),
    "magenta": (0.85, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "teal": (0.05, 0.50, 0.45),
}


def palette_rgb(word: str) -> tuple[float, float, float]:
    """RGB triple a color word renders as."""
    try:
        return _PALETTE[word]
    except KeyError:
        raise ValueError(f"not a color word: {word!r}") from None


@dataclass
class GuidanceSignals:
    """Aligned per-image guidance maps: edge/depth in [0,1], one-hot seg planes."""

    hed: np.ndarray    # (1, H, W)
    depth: np.ndarray  # (1, H, W)
    seg: np.ndarray    # (K, H, W)

    def __post_init__(self):
        h = self.hed.shape[-2:]
        if self.depth.shape[-2:] != h or self.seg.shape[-2:] != h:
            raise ValueError(
                f"signal maps disagree: hed {self.hed.shape}, depth {self.depth.shape}, "
                f"seg {self.seg.shape}")

    @property
    def seg_classes(self) -> int:
        return self.seg.shape[0]

    def validate(self):
        for name, m in (("hed", self.hed), ("depth", self.depth)):
            if m.min() < 0 or m.max() > 1:
                raise ValueError(f"{name} outside [0,1]")
        if not np.allclose(self.seg.sum(axis=0), 1.0, atol=1e-6):
            raise ValueError("seg planes do not sum to 1")
        return self


@dataclass
class ScenePair:
    """One training unit: HR image, degraded LR, ground-truth signals, tags."""

    hr: np.ndarray                  # (3, H, W) in [0,1]
    lr: np.ndarray | None           # (3, H/4, W/4) or None before degradation
    signals: GuidanceSignals
    tags: list[str]
    seed: int


@dataclass
class DegradationConfig:
    blur_sigma_range: tuple[float, float] = (1.2, 2.2)
    noise_sigma_range: tuple[float, float] = (0.04, 0.10)
    downsample_kernel: str = "bicubic"   # bicubic | bilinear | area
    second_order: bool = True
    quantize_levels: int | None = None

    def __post_init__(self):
        for name, (lo, hi) in (("blur_sigma_range", self.blur_sigma_range),
                               ("noise_sigma_range", self.noise_sigma_range)):
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be 0 <= lo <= hi, got ({lo}, {hi})")
        if self.downsample_kernel not in ("bicubic", "bilinear", "area"):
            raise ValueError(f"unknown downsample kernel {self.downsample_kernel!r}")
        if self.quantize_levels is not None and self.quantize_levels < 2:
            raise ValueError("quantize_levels must be >= 2")


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def _dilate3(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1)
    out = np.zeros_like(mask)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out |= p[dy:dy + mask.shape[0], dx:dx + mask.shape[1]]
    return out


def _boundary(ids: np.ndarray) -> np.ndarray:
    b = np.zeros(ids.shape, dtype=bool)
    b[:-1, :] |= ids[:-1, :] != ids[1:, :]
    b[1:, :] |= ids[1:, :] != ids[:-1, :]
    b[:, :-1] |= ids[:, :-1] != ids[:, 1:]
    b[:, 1:] |= ids[:, 1:] != ids[:, :-1]
    return b


def _texture_map(color: np.ndarray, texture: str, xx, yy) -> np.ndarray:
    c = np.broadcast_to(color.reshape(3, 1, 1), (3,) + xx.shape).copy()
    if texture == "striped":
        stripe = (((xx + yy) // 4) % 2).astype(np.float32)
        c *= 1.0 - 0.45 * stripe
    elif texture == "dotted":
        dots = ((xx % 5 == 2) & (yy % 5 == 2)).astype(np.float32)
        c = c * (1.0 - dots) + dots * (0.7 + 0.3 * c)
    return c


def generate_scene(seed: int, n_primitives: int | None = None, size: int = 64,
                   seg_classes: int = 6) -> ScenePair:
    """Deterministic scene for a seed; lr is left unset (see degrade)."""
    rng = Rng(seed)
    draw = rng.spawn(1)
    if n_primitives is None:
        n = 2 + int(draw.integers(0, 4, ()))
    else:
        n = int(n_primitives)
    if not 0 <= n <= seg_classes - 1:
        raise ValueError(f"n_primitives must fit the {seg_classes - 1} instance planes, got {n}")

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    # background: vertical blend of two muted palette colors
    names = list(_PALETTE)
    bi = draw.integers(0, len(names), (2,))
    top = np.array(_PALETTE[names[int(bi[0])]], dtype=np.float32) * 0.4 + 0.3
    bot = np.array(_PALETTE[names[int(bi[1])]], dtype=np.float32) * 0.4 + 0.3
    ramp = (yy / max(size - 1, 1))[None]
    hr = top.reshape(3, 1, 1) * (1 - ramp) + bot.reshape(3, 1, 1) * ramp

    ids = np.zeros((size, size), dtype=np.int32)
    depth = np.zeros((size, size), dtype=np.float32)
    tags: list[str] = []

    for i in range(n):
        z = (i + 1) / (n + 1)
        shape = SHAPE_WORDS[int(draw.integers(0, 3, ()))]
        color_word = names[int(draw.integers(0, len(names), ()))]
        texture = TEXTURE_WORDS[int(draw.integers(0, 3, ()))]
        cx = size * (0.2 + 0.6 * float(draw.uniform(())))
        cy = size * (0.2 + 0.6 * float(draw.uniform(())))
        if shape == "disc":
            r = size * (0.10 + 0.15 * float(draw.uniform(())))
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        elif shape == "box":
            w = size * (0.08 + 0.14 * float(draw.uniform(())))
            h = size * (0.08 + 0.14 * float(draw.uniform(())))
            mask = (np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= h)
        else:  # wedge: jittered near-equilateral triangle, never degenerate
            base = 2 * np.pi * float(draw.uniform(()))
            verts = []
            for j in range(3):
                ang = base + j * 2 * np.pi / 3 + 0.5 * (float(draw.uniform(())) - 0.5)
                rad = size * (0.10 + 0.14 * float(draw.uniform(())))
                verts.append((cx + rad * np.cos(ang), cy + rad * np.sin(ang)))
            mask = np.ones((size, size), dtype=bool)
            for j in range(3):
                x0, y0 = verts[j]
                x1, y1 = verts[(j + 1) % 3]
                cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
                mask &= cross >= 0
            if not mask.any():  # winding was clockwise; flip
                mask = np.ones((size, size), dtype=bool)
                for j in range(3):
                    x0, y0 = verts[j]
                    x1, y1 = verts[(j + 1) % 3]
                    cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
                    mask &= cross <= 0
        color = np.array(_PALETTE[color_word], dtype=np.float32)
        painted = _texture_map(color, texture, xx, yy)
        hr = np.where(mask[None], painted, hr)
        ids[mask] = i + 1
        depth[mask] = z
        tags += [shape, color_word, texture]

    hr = np.clip(hr, 0.0, 1.0).astype(np.float32)

    seg = np.zeros((seg_classes, size, size), dtype=np.float32)
    for c in range(seg_classes):
        seg[c] = ids == c
    edges = _dilate3(_boundary(ids)).astype(np.float32) if n else np.zeros((size, size),
                                                                           dtype=np.float32)
    signals = GuidanceSignals(hed=edges[None], depth=depth[None], seg=seg)
    return ScenePair(hr=hr, lr=None, signals=signals, tags=tags, seed=int(seed))


# ---------------------------------------------------------------------------
# resampling and degradation
# ---------------------------------------------------------------------------

def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-d Gaussian, values proportional to exp(-(x^2+y^2)/(2 sigma^2))."""
    if size % 2 == 0:
        raise ValueError(f"gaussian_kernel size must be odd, got {size}")
    if sigma <= 0:
        raise ValueError(f"gaussian_kernel sigma must be > 0, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g1 = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g1, g1)
    return k / k.sum()


def _blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Depthwise blur with reflect padding; img is (C, H, W)."""
    k = kernel.shape[0]
    if k == 1:
        return img * float(kernel[0, 0])
    p = k // 2
    out = np.zeros_like(img, dtype=np.float64)
    padded = np.pad(img.astype(np.float64), ((0, 0), (p, p), (p, p)), mode="reflect")
    for dy in range(k):
        for dx in range(k):
            w = kernel[dy, dx]
            if w:
                out += w * padded[:, dy:dy + img.shape[1], dx:dx + img.shape[2]]
    return out.astype(img.dtype)


def _cubic(t: np.ndarray) -> np.ndarray:
    # Catmull-Rom style cubic, a = -0.5
    a = -0.5
    t = np.abs(t)
    out = np.where(t <= 1, (a + 2) * t**3 - (a + 3) * t**2 + 1,
                   np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0))
    return out


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int, kind: str) -> np.ndarray:
    """Row-stochastic 1-d resampling matrix (n_out, n_in), pixel-center aligned."""
    scale = n_in / n_out
    if kind == "area":
        if n_in % n_out:
            raise ValueError("area resize needs an integer factor")
        f = n_in // n_out
        m = np.zeros((n_out, n_in))
        for o in range(n_out):
            m[o, o * f:(o + 1) * f] = 1.0 / f
        return m
    support = {"bicubic": 2.0, "bilinear": 1.0}[kind]
    widen = max(1.0, scale)  # widen the kernel when minifying
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        center = (o + 0.5) * scale - 0.5
        lo = int(np.floor(center - support * widen)) + 1
        hi = int(np.ceil(center + support * widen))
        idx = np.arange(lo, hi + 1)
        t = (center - idx) / widen
        w = _cubic(t) if kind == "bicubic" else np.maximum(0.0, 1.0 - np.abs(t))
        idx = np.clip(idx, 0, n_in - 1)  # replicate edges
        for i, wi in zip(idx, w):
            m[o, i] += wi
        m[o] /= m[o].sum()
    return m


def resize(img: np.ndarray, out_hw: tuple[int, int], kind: str = "bicubic") -> np.ndarray:
    """Separable resample of (..., H, W) to out_hw; deterministic, f32 result."""
    h, w = img.shape[-2:]
    mh = _resize_matrix(h, out_hw[0], kind)
    mw = _resize_matrix(w, out_hw[1], kind)
    out = np.einsum("oh,...hw,pw->...op", mh, img.astype(np.float64), mw)
    return out.astype(np.float32)


def bicubic_upsample(img: np.ndarray, factor: int = SCALE) -> np.ndarray:
    h, w = img.shape[-2:]
    return resize(img, (h * factor, w * factor), "bicubic")


def degrade(hr: np.ndarray, cfg: DegradationConfig, seed: int) -> np.ndarray:
    """blur -> 4x downsample -> noise -> clip (+ optional lighter second pass)."""
    c, h, w = hr.shape
    if h % SCALE or w % SCALE:
        raise ValueError(f"hr dims must be divisible by {SCALE}, got {h}x{w}")
    rng = Rng(seed)

    def _draw(lo, hi):
        return lo + (hi - lo) * float(rng.uniform(()))

    s1 = _draw(*cfg.blur_sigma_range)
    size1 = max(3, 2 * int(np.ceil(2 * s1)) + 1)
    x = _blur(hr.astype(np.float32), gaussian_kernel(size1, s1))
    x = resize(x, (h // SCALE, w // SCALE), cfg.downsample_kernel)
    n1 = _draw(*cfg.noise_sigma_range)
    x = x + rng.normal(x.shape, dtype="f32") * np.float32(n1)
    x = np.clip(x, 0.0, 1.0)

    if cfg.second_order:
        s2 = 0.5 * _draw(*cfg.blur_sigma_range)
        size2 = max(3, 2 * int(np.ceil(2 * s2)) + 1)
        x = _blur(x, gaussian_kernel(size2, s2))
        n2 = 0.5 * _draw(*cfg.noise_sigma_range)
        x = x + rng.normal(x.shape, dtype="f32") * np.float32(n2)
        x = np.clip(x, 0.0, 1.0)

    if cfg.quantize_levels:
        q = cfg.quantize_levels - 1
        x = np.round(x * q) / q

    return np.clip(x, 0.0, 1.0).astype(np.float32)


def make_scene_pair(seed: int, cfg: DegradationConfig | None = None, size: int = 64,
                    seg_classes: int = 6) -> ScenePair:
    cfg = cfg or DegradationConfig()
    pair = generate_scene(seed, size=size, seg_classes=seg_classes)
    pair.lr = degrade(pair.hr, cfg, seed=Rng(seed).spawn(2).seed)
    return pair


# ---------------------------------------------------------------------------
# corpus container
# ---------------------------------------------------------------------------

_MAGIC = b"MSCN"
_VERSION = 1


def _write_plane(buf: io.BytesIO, name: str, plane: np.ndarray) -> None:
    nb = name.encode("utf-8")
    c, h, w = plane.shape
    buf.write(struct.pack("<I", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<III", c, h, w))
    buf.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def scene_to_bytes(pair: ScenePair) -> bytes:
    if pair.lr is None:
        raise ValueError("scene has no lr plane; degrade it first")
    h, w = pair.hr.shape[-2:]
    k = pair.signals.seg_classes
    planes = [("hr", pair.hr), ("lr", pair.lr), ("hed", pair.signals.hed),
              ("depth", pair.signals.depth)] + \
             [(f"seg{i}", pair.signals.seg[i:i + 1]) for i in range(k)]
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<IQIIII", _VERSION, pair.seed & (1 << 64) - 1, h, w, k, len(planes)))
    for name, plane in planes:
        _write_plane(buf, name, plane)
    return buf.getvalue()


def scene_from_bytes(raw: bytes, tags: list[str] | None = None) -> ScenePair:
    if raw[:4] != _MAGIC:
        raise ValueError(f"bad scene record magic {raw[:4]!r}")
    ver, seed, h, w, k, n_planes = struct.unpack_from("<IQIIII", raw, 4)
    if ver != _VERSION:
        raise ValueError(f"unsupported scene record version {ver}")
    off = 4 + struct.calcsize("<IQIIII")
    planes: dict[str, np.ndarray] = {}
    for _ in range(n_planes):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        c, ph, pw = struct.unpack_from("<III", raw, off)
        off += 12
        count = c * ph * pw
        plane = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(c, ph, pw)
        off += count * 4
        planes[name] = plane.copy()
    if off != len(raw):
        raise ValueError(f"scene record length mismatch: parsed {off} of {len(raw)} bytes")
    seg = np.concatenate([planes[f"seg{i}"] for i in range(k)], axis=0)
    signals = GuidanceSignals(hed=planes["hed"], depth=planes["depth"], seg=seg)
    return ScenePair(hr=planes["hr"], lr=planes["lr"], signals=signals,
                     tags=list(tags or []), seed=seed)


def write_corpus(out_dir, count: int, seed: int, cfg: DegradationConfig | None = None,
                 size: int = 64, seg_classes: int = 6) -> list[ScenePair]:
    """Write `count` scene records plus a manifest; deterministic per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = Rng(seed)
    pairs = []
    lines = [f"# corpus count={count} seed={seed} size={size} seg_classes={seg_classes}"]
    for i in range(count):
        scene_seed = root.spawn(i).seed
        pair = make_scene_pair(scene_seed, cfg, size=size, seg_classes=seg_classes)
        name = f"scene_{i:04d}.msc"
        (out / name).write_bytes(scene_to_bytes(pair))
        lines.append(f"{name} seed={scene_seed} tags={','.join(pair.tags)}")
        pairs.append(pair)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return pairs


def load_corpus(corpus_dir) -> list[ScenePair]:
    root = Path(corpus_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ValueError(f"no manifest.txt under {root}")
    pairs = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, *fields = line.split(" ")
        meta = dict(f.split("=", 1) for f in fields)
        tags = [t for t in meta.get("tags", "").split(",") if t]
        pairs.append(scene_from_bytes((root / name).read_bytes(), tags=tags))
    if not pairs:
        raise ValueError(f"corpus at {root} is empty")
    return pairs

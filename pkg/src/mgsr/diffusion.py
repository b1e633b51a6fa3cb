"""Conditional diffusion super-resolver.

Pixel-space epsilon-prediction U-Net at toy resolution. The low-res image is
bicubically upsampled and channel-concatenated at the input. Every block runs
its own text/image conditioning module; encoder entries and the bottleneck
apply guidance modulation (plain channel layer-norm when conditioning is
disabled, which zero-initialized modulation reproduces bit-for-bit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import data
from .csm import DpcaBlock, TextEmbedder, dpca_forward
from .msfm import FuseStage, SaftBlock, _channel_norm, fuse_dense, msfm_inject
from .nn import Adam, Conv2dLayer, LinearLayer
from .signals import Extractor, extract
from .tensor import (Rng, Tensor, add, avg_pool2d, concat, gelu, mse, reshape,
                     upsample_nearest)


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def t(self) -> int:
        return len(self.betas)


def make_schedule(t: int, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    if t < 1:
        raise ValueError(f"schedule needs at least one step, got {t}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta range must satisfy 0 < start <= end < 1, got "
            f"[{beta_start}, {beta_end}]")
    return NoiseSchedule(np.linspace(beta_start, beta_end, t, dtype=np.float64))


def add_noise(schedule: NoiseSchedule, x0: np.ndarray, t: np.ndarray,
              eps: np.ndarray) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, batched over leading axis."""
    ab = schedule.alpha_bars[np.asarray(t)].reshape(-1, 1, 1, 1)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype)


def sinusoidal_time_embed(t, dim: int) -> np.ndarray:
    """Standard sin/cos position features for integer timesteps; (B, dim)."""
    if dim < 2 or dim % 2:
        raise ValueError(f"time embedding dim must be even and >= 2, got {dim}")
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = tv[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def _d4(arr: np.ndarray, view: int) -> np.ndarray:
    """One of the 8 axis-aligned flips/rotations, over the last two axes."""
    out = np.rot90(arr, view & 3, axes=(-2, -1))
    if view & 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def _d4_signals(sig: data.GuidanceSignals, view: int) -> data.GuidanceSignals:
    if not view:
        return sig
    return data.GuidanceSignals(hed=_d4(sig.hed, view),
                                depth=_d4(sig.depth, view),
                                seg=_d4(sig.seg, view))


@dataclass(frozen=True)
class BlockId:
    index: int
    name: str
    level: int
    width: int

    def __str__(self):
        return self.name


@dataclass
class UNetConfig:
    size: int = 64
    scale: int = 4
    widths: tuple = (12, 24, 48)
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    embed_dim: int = 16       # token dim shared by both conditioning paths
    raw_embed_dim: int = 32   # image-prompt embedding width before the connector
    mlp_hidden: int = 16
    time_dim: int = 32
    text_len: int = 4
    # The diffusion variable is the upsampling residual scaled by this gain,
    # so sampler error shrinks by the same factor when mapped back to pixels.
    residual_gain: float = 4.0
    seg_classes: int = 6
    conditioning: str = "full"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        levels = len(self.widths)
        if levels < 1:
            raise ValueError("at least one U-Net level required")
        if any(a > b for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"widths must be nondecreasing toward the "
                             f"bottleneck, got {self.widths}")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.size % (1 << (levels - 1)):
            raise ValueError(f"size {self.size} not divisible by "
                             f"2^{levels - 1} levels")
        if self.size % self.scale:
            raise ValueError(f"size {self.size} not divisible by scale {self.scale}")
        if self.conditioning not in ("full", "none"):
            raise ValueError(f"conditioning must be 'full' or 'none', "
                             f"got {self.conditioning!r}")


class SignalBatch:
    """Stacked guidance maps for a batch, kept as frozen tensors."""

    def __init__(self, hed: np.ndarray, depth: np.ndarray, seg: np.ndarray):
        if hed.ndim != 4 or depth.ndim != 4 or seg.ndim != 4:
            raise ValueError("signal batch expects (B, C, H, W) stacks")

        def lift(a):
            a = np.asarray(a)
            return a if a.dtype == np.float64 else a.astype(np.float32)

        self.hed = Tensor(lift(hed), requires_grad=False)
        self.depth = Tensor(lift(depth), requires_grad=False)
        self.seg = Tensor(lift(seg), requires_grad=False)

    @classmethod
    def from_signals(cls, sigs: list[data.GuidanceSignals]) -> "SignalBatch":
        return cls(np.stack([s.hed for s in sigs]),
                   np.stack([s.depth for s in sigs]),
                   np.stack([s.seg for s in sigs]))

    @property
    def spatial(self):
        return self.hed.shape[2:]


class UNet:
    """3-level encoder/bottleneck/decoder with per-block conditioning."""

    def __init__(self, cfg: UNetConfig, rng: Rng):
        self.cfg = cfg
        self.schedule = make_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)
        levels = len(cfg.widths)
        self.levels = levels
        w = cfg.widths
        self.text = TextEmbedder(rng.spawn(1), cfg.embed_dim)
        self.stem = Conv2dLayer(rng.spawn(2), 6, w[0], k=3)
        self.head = Conv2dLayer(rng.spawn(3), w[0], 3, k=3, zero=True)

        names = [f"enc{l}" for l in range(levels)] + ["mid"] + \
                [f"dec{l}" for l in reversed(range(levels))]
        block_levels = list(range(levels)) + [levels - 1] + \
            list(reversed(range(levels)))
        self.block_info = [BlockId(i, n, lv, w[lv]) for i, (n, lv) in
                           enumerate(zip(names, block_levels))]
        self.block_ids = [b.name for b in self.block_info]
        self.convs: list[Conv2dLayer] = []
        self.tprojs: list[LinearLayer] = []
        self.csm_blocks: list[DpcaBlock] = []
        for bid in self.block_info:
            sub = rng.spawn(100 + bid.index)
            self.convs.append(Conv2dLayer(sub.spawn(1), bid.width, bid.width, k=3))
            self.tprojs.append(LinearLayer(sub.spawn(2), cfg.time_dim, bid.width))
            self.csm_blocks.append(DpcaBlock(sub.spawn(3), bid.width, cfg.embed_dim,
                                             cfg.raw_embed_dim, cfg.mlp_hidden))
        self.downs = [Conv2dLayer(rng.spawn(200 + l), w[l], w[l + 1], k=1)
                      for l in range(levels - 1)]
        self.ups = [Conv2dLayer(rng.spawn(300 + l), w[l + 1], w[l], k=1)
                    for l in range(levels - 1)]
        self.merges = [Conv2dLayer(rng.spawn(400 + l), 2 * w[l], w[l], k=1)
                       for l in range(levels)]
        s = cfg.seg_classes + 1
        self.fuse = FuseStage(rng.spawn(500), s)
        self.saft_h = [SaftBlock(rng.spawn(600 + l), 1, w[l]) for l in range(levels)]
        self.saft_r = [SaftBlock(rng.spawn(700 + l), s, w[l]) for l in range(levels)]
        self.embedder: Extractor | None = None
        self.opt = Adam()
        self._cond_cache: dict[tuple[int, int],
                               tuple[np.ndarray, np.ndarray | None]] = {}

    # ------------------------------------------------------------------
    # parameter bookkeeping
    # ------------------------------------------------------------------
    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.stem.params("stem"))
        out.update(self.head.params("head"))
        out["text/table"] = self.text.table
        for bid, conv, tproj, csmb in zip(self.block_info, self.convs,
                                          self.tprojs, self.csm_blocks):
            p = f"block/{bid.name}"
            out.update(conv.params(f"{p}/conv"))
            out.update(tproj.params(f"{p}/time"))
            out.update(csmb.params(f"{p}/csm"))
        for l, layer in enumerate(self.downs):
            out.update(layer.params(f"down{l}"))
        for l, layer in enumerate(self.ups):
            out.update(layer.params(f"up{l}"))
        for l, layer in enumerate(self.merges):
            out.update(layer.params(f"merge{l}"))
        out.update(self.fuse.params("msfm/fuse"))
        for l in range(self.levels):
            out.update(self.saft_h[l].params(f"msfm/l{l}/h"))
            out.update(self.saft_r[l].params(f"msfm/l{l}/r"))
        if self.embedder is not None:
            for name, t in self.embedder.params().items():
                out[f"embedder/{name}"] = t
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if v.requires_grad}

    def set_embedder(self, ext: Extractor) -> None:
        if ext.task != "embed":
            raise ValueError(f"embedder must be an embed extractor, got {ext.task!r}")
        if ext.embed_dim != self.cfg.raw_embed_dim:
            raise ValueError(
                f"embedder width {ext.embed_dim} does not match configured "
                f"raw embedding dim {self.cfg.raw_embed_dim}")
        for p in ext.params().values():
            p.requires_grad = False
        self.embedder = ext
        self._cond_cache.clear()

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------
    def forward(self, x_t: Tensor, t, lr_cond: Tensor, e_t: Tensor,
                e_i: Tensor | None, signals: SignalBatch | None,
                e_t_overrides: dict[str, Tensor] | None = None) -> Tensor:
        cfg = self.cfg
        if x_t.ndim != 4 or x_t.shape[1] != 3:
            raise ValueError(f"x_t must be (B, 3, H, W), got {x_t.shape}")
        if x_t.shape[2] != cfg.size or x_t.shape[3] != cfg.size:
            raise ValueError(f"model built for {cfg.size}x{cfg.size}, "
                             f"got {x_t.shape}")
        if lr_cond.shape != x_t.shape:
            raise ValueError(
                f"lr conditioning must be upsampled to {x_t.shape}, "
                f"got {lr_cond.shape}")
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t_arr.min() < 0 or t_arr.max() >= self.schedule.t:
            raise ValueError(f"timesteps outside [0, {self.schedule.t})")
        full = cfg.conditioning == "full"
        b = x_t.shape[0]
        if full:
            if e_i is None:
                raise ValueError("full conditioning requires image-prompt embeddings")
            if signals is None:
                raise ValueError("full conditioning requires guidance signals")
            if tuple(signals.spatial) != (cfg.size, cfg.size):
                raise ValueError(
                    f"guidance maps must be {cfg.size}x{cfg.size} before "
                    f"per-level pooling, got {signals.spatial}")
        temb = Tensor(sinusoidal_time_embed(
            np.broadcast_to(t_arr, (b,)), cfg.time_dim).astype(x_t.dtype),
            requires_grad=False)

        g_h_lv: list[Tensor] = []
        g_r_lv: list[Tensor] = []
        if full:
            _, g_r = fuse_dense(signals.depth, signals.seg, self.fuse)
            g_h = signals.hed
            for l in range(self.levels):
                k = 1 << l
                g_h_lv.append(g_h if k == 1 else avg_pool2d(g_h, k))
                g_r_lv.append(g_r if k == 1 else avg_pool2d(g_r, k))

        def inject(level: int, h: Tensor) -> Tensor:
            if not full:
                return _channel_norm(h)
            return msfm_inject(h, g_h_lv[level], g_r_lv[level],
                               self.saft_h[level], self.saft_r[level])

        def run_block(index: int, h: Tensor) -> Tensor:
            h = gelu(self.convs[index](h, sample_bias=self.tprojs[index](temb)))
            etb = e_t
            if e_t_overrides:
                etb = e_t_overrides.get(self.block_info[index].name, e_t)
            return dpca_forward(h, etb, e_i, self.csm_blocks[index],
                                text_only=not full)

        h = self.stem(concat([x_t, lr_cond], axis=1))
        skips: list[Tensor] = []
        for l in range(self.levels):
            h = inject(l, h)
            h = run_block(l, h)
            skips.append(h)
            if l < self.levels - 1:
                h = self.downs[l](avg_pool2d(h, 2))
        h = inject(self.levels - 1, h)
        h = run_block(self.levels, h)
        for l in reversed(range(self.levels)):
            if l < self.levels - 1:
                h = self.ups[l](upsample_nearest(h, 2))
            h = self.merges[l](concat([h, skips[l]], axis=1))
            h = run_block(2 * self.levels - l, h)
        return self.head(h)

    # ------------------------------------------------------------------
    # training and sampling
    # ------------------------------------------------------------------
    def _conditioning_for(self, scene: data.ScenePair,
                          view: int = 0) -> tuple[np.ndarray,
                                                  np.ndarray | None]:
        cached = self._cond_cache.get((scene.seed, view))
        if cached is not None:
            return cached
        if scene.lr is None:
            raise ValueError("scene has no degraded input")
        up = data.bicubic_upsample(scene.lr, self.cfg.scale).astype(np.float32)
        if view:
            up = _d4(up, view)
        tokens = None
        if self.cfg.conditioning == "full":
            if self.embedder is None:
                raise ValueError("full conditioning requires an attached embedder")
            tokens = extract(self.embedder, up)
        self._cond_cache[(scene.seed, view)] = (up, tokens)
        return up, tokens

    def _text_tokens(self, batch: list[data.ScenePair]) -> Tensor:
        arr = self.text.embed_batch([s.tags for s in batch], self.cfg.text_len)
        return Tensor(arr, requires_grad=False)

    def train_step(self, batch: list[data.ScenePair], rng: Rng) -> float:
        if not batch:
            raise ValueError("train_step needs a non-empty batch")
        b = len(batch)
        # Each sample trains under one of 8 axis-aligned views; a desk-scale
        # corpus memorizes its scenes within a couple thousand steps otherwise.
        views = rng.spawn(3).integers(0, 8, b)
        conds = [self._conditioning_for(s, int(v)) for s, v in zip(batch, views)]
        up01 = np.stack([c[0] for c in conds])
        hr01 = np.stack([_d4(s.hr, int(v)) for s, v in zip(batch, views)])
        hr01 = hr01.astype(np.float32)
        x0 = np.clip(self.cfg.residual_gain * (hr01 - up01), -1.0, 1.0)
        x0 = x0.astype(np.float32)
        lr_up = up01 * 2.0 - 1.0
        full = self.cfg.conditioning == "full"
        e_i = None
        sig = None
        if full:
            e_i = Tensor(np.stack([c[1] for c in conds]), requires_grad=False)
            sig = SignalBatch.from_signals(
                [_d4_signals(s.signals, int(v))
                 for s, v in zip(batch, views)])
        e_t = self._text_tokens(batch)
        t = rng.spawn(1).integers(0, self.schedule.t, b)
        eps = rng.spawn(2).normal(x0.shape, dtype="f32")
        x_t = add_noise(self.schedule, x0, t, eps)
        pred = self.forward(Tensor(x_t, requires_grad=False), t,
                            Tensor(lr_up, requires_grad=False), e_t, e_i, sig)
        loss = mse(pred, Tensor(eps, requires_grad=False))
        params = self.trainable_params()
        self.opt.zero_grad(params)
        loss.backward()
        self.opt.step(params)
        return loss.item()

    def sample(self, lr: np.ndarray, steps: int, rng: Rng, eta: float = 0.0,
               tags: list[str] | None = None,
               signals: data.GuidanceSignals | None = None,
               e_t_overrides: dict[str, Tensor] | None = None) -> np.ndarray:
        cfg = self.cfg
        t_total = self.schedule.t
        if steps < 1 or steps > t_total:
            raise ValueError(f"steps must lie in [1, {t_total}], got {steps}")
        if lr.ndim != 3 or lr.shape[0] != 3:
            raise ValueError(f"lr image must be (3, h, w), got {lr.shape}")
        if lr.shape[1] * cfg.scale != cfg.size or lr.shape[2] * cfg.scale != cfg.size:
            raise ValueError(
                f"lr {lr.shape[1]}x{lr.shape[2]} does not scale to "
                f"{cfg.size}x{cfg.size}")
        up01 = data.bicubic_upsample(lr.astype(np.float32), cfg.scale)
        lr_cond = Tensor(up01[None] * 2.0 - 1.0, requires_grad=False)
        full = cfg.conditioning == "full"
        e_i = None
        sig = None
        if full:
            if self.embedder is None:
                raise ValueError("full conditioning requires an attached embedder")
            if signals is None:
                raise ValueError("full conditioning requires guidance signals")
            e_i = Tensor(extract(self.embedder, up01)[None], requires_grad=False)
            sig = SignalBatch.from_signals([signals])
        e_t = Tensor(self.text.embed(tags or [], length=cfg.text_len)[None],
                     requires_grad=False)

        ts = list(range(0, t_total, t_total // steps))[::-1]
        ab = self.schedule.alpha_bars
        x = rng.spawn(1).normal((1, 3, cfg.size, cfg.size), dtype="f32")
        for i, t in enumerate(ts):
            eps = self.forward(Tensor(x, requires_grad=False), t, lr_cond,
                               e_t, e_i, sig, e_t_overrides=e_t_overrides).data
            ab_t = ab[t]
            ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0_pred = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
            x0_pred = np.clip(x0_pred, -1.0, 1.0)
            sigma = 0.0
            if eta > 0.0 and i + 1 < len(ts):
                sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * \
                    math.sqrt(1.0 - ab_t / ab_prev)
            dir_coef = math.sqrt(max(0.0, 1.0 - ab_prev - sigma * sigma))
            x = math.sqrt(ab_prev) * x0_pred + dir_coef * eps
            if sigma > 0.0:
                x = x + sigma * rng.spawn(1000 + t).normal(x.shape, dtype="f32")
            x = x.astype(np.float32)
        out = np.clip(up01 + x[0] / cfg.residual_gain, 0.0, 1.0)
        return out.astype(np.float32)


def unet_forward(model: UNet, x_t: Tensor, t, lr_cond: Tensor, e_t: Tensor,
                 e_i: Tensor | None,
                 signals: data.GuidanceSignals | SignalBatch | None) -> Tensor:
    """Free-function entry point; accepts a single signal set or a batch."""
    if isinstance(signals, data.GuidanceSignals):
        signals = SignalBatch.from_signals([signals])
    return model.forward(x_t, t, lr_cond, e_t, e_i, signals)


def ablated_clone(model: UNet, rng: Rng) -> UNet:
    """Same-architecture model with conditioning disabled, freshly seeded."""
    cfg = replace(model.cfg, conditioning="none")
    return UNet(cfg, rng)

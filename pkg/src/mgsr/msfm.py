"""Two-stage spatial guidance fusion.

Stage one fuses dense maps (depth plus segmentation planes) with a learned
channel reweighting. Stage two turns each guidance stack into per-channel
scale and shift maps applied to a normalized feature map. Injection averages
the edge-guided and fused-guided branches.
"""

from __future__ import annotations

from .nn import Conv2dLayer, LinearLayer
from .tensor import (Rng, Tensor, add, concat, gelu, layer_norm, mul, reshape,
                     sigmoid, tmean, transpose)


class SaftBlock:
    """Predicts gamma/beta maps from a guidance stack and modulates features."""

    def __init__(self, rng: Rng, in_ch: int, out_ch: int, hidden: int = 8):
        self.in_ch = in_ch
        self.out_ch = out_ch
        # guidance maps are already spatially dense; pointwise stacks keep the
        # per-pixel transform cheap at full resolution
        self.g1 = Conv2dLayer(rng, in_ch, hidden, k=1)
        self.g2 = Conv2dLayer(rng, hidden, out_ch, k=1, zero=True)
        self.b1 = Conv2dLayer(rng, in_ch, hidden, k=1)
        self.b2 = Conv2dLayer(rng, hidden, out_ch, k=1, zero=True)

    def gamma(self, signal: Tensor) -> Tensor:
        return self.g2(gelu(self.g1(signal)))

    def beta(self, signal: Tensor) -> Tensor:
        return self.b2(gelu(self.b1(signal)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.g1.params(f"{prefix}/g1"))
        out.update(self.g2.params(f"{prefix}/g2"))
        out.update(self.b1.params(f"{prefix}/b1"))
        out.update(self.b2.params(f"{prefix}/b2"))
        return out


def _channel_norm(x: Tensor) -> Tensor:
    """Layer norm across the channel axis of a (B, C, H, W) map."""
    t = transpose(x, (0, 2, 3, 1))
    return transpose(layer_norm(t), (0, 3, 1, 2))


def saft_apply(f_hidden: Tensor, signal: Tensor, saft: SaftBlock) -> Tensor:
    """norm(F) * (1 + gamma(signal)) + beta(signal), all shapes (B, C, H, W)."""
    if signal.shape[1] != saft.in_ch:
        raise ValueError(f"saft expects {saft.in_ch} guidance channels, got {signal.shape}")
    if f_hidden.shape[1] != saft.out_ch:
        raise ValueError(f"saft modulates {saft.out_ch} channels, got {f_hidden.shape}")
    if f_hidden.shape[2:] != signal.shape[2:]:
        raise ValueError(
            f"guidance resolution {signal.shape[2:]} does not match features "
            f"{f_hidden.shape[2:]}")
    normed = _channel_norm(f_hidden)
    gamma = saft.gamma(signal)
    beta = saft.beta(signal)
    return add(mul(normed, add(gamma, 1.0)), beta)


class FuseStage:
    """Dense-guidance fusion: channel mix then squeeze-excite weights."""

    def __init__(self, rng: Rng, channels: int, reduction: int = 2):
        hidden = max(1, channels // reduction)
        self.channels = channels
        # the mix feeds a global average pool, so a pointwise mix loses nothing
        self.mix = Conv2dLayer(rng, channels, channels, k=1)
        self.fc1 = LinearLayer(rng, channels, hidden)
        self.fc2 = LinearLayer(rng, hidden, channels)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        out.update(self.mix.params(f"{prefix}/mix"))
        out.update(self.fc1.params(f"{prefix}/fc1"))
        out.update(self.fc2.params(f"{prefix}/fc2"))
        return out


def fuse_dense(depth: Tensor, seg: Tensor, fuse: FuseStage) -> tuple[Tensor, Tensor]:
    """Concatenate dense maps and reweight channels.

    depth: (B, 1, H, W); seg: (B, K, H, W). Returns (g_c, g_r) where g_c is
    the channel concatenation and g_r = g_c scaled by learned per-channel
    attention weights in (0, 1).
    """
    if depth.ndim != 4 or seg.ndim != 4 or depth.shape[1] != 1:
        raise ValueError(f"expected depth (B,1,H,W) and seg (B,K,H,W), "
                         f"got {depth.shape} and {seg.shape}")
    if depth.shape[2:] != seg.shape[2:] or depth.shape[0] != seg.shape[0]:
        raise ValueError(f"depth/seg shapes disagree: {depth.shape} vs {seg.shape}")
    g_c = concat([depth, seg], axis=1)
    if g_c.shape[1] != fuse.channels:
        raise ValueError(f"fusion stage built for {fuse.channels} channels, "
                         f"got {g_c.shape[1]}")
    mixed = fuse.mix(g_c)
    b, s = mixed.shape[:2]
    pooled = reshape(_gap(mixed), (b, s))
    weights = sigmoid(fuse.fc2(gelu(fuse.fc1(pooled))))
    g_r = mul(g_c, reshape(weights, (b, s, 1, 1)))
    return g_c, g_r


def _gap(x: Tensor) -> Tensor:
    return tmean(x, axis=(2, 3), keepdims=True)


def msfm_inject(f_hidden: Tensor, g_h: Tensor, g_r: Tensor,
                saft_h: SaftBlock, saft_r: SaftBlock) -> Tensor:
    """Average of the edge-modulated and fused-modulated feature maps."""
    f_h = saft_apply(f_hidden, g_h, saft_h)
    f_r = saft_apply(f_hidden, g_r, saft_r)
    return mul(add(f_h, f_r), 0.5)

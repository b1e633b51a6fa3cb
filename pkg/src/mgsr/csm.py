"""Dual-path token conditioning with per-block learnable gates.

Each conditioned block turns its feature map into a token stream, attends
over text embeddings and (optionally) image-prompt embeddings with separate
frozen projections, scales the image path by a zero-initialized gate vector,
and folds the fused result back through a small trainable MLP plus residual.
"""

from __future__ import annotations

import numpy as np

from . import data
from .nn import LinearLayer, glorot
from .tensor import Rng, Tensor, add, attention, gelu, matmul, mul, reshape, transpose


class TextEmbedder:
    """Frozen word-embedding table over the scene vocabulary."""

    def __init__(self, rng: Rng, dim: int, vocab: tuple[str, ...] = data.VOCAB):
        self.dim = dim
        self.vocab = tuple(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        v = len(self.vocab)
        if v <= dim:
            # Orthonormal rows: distinct words stay maximally distinguishable.
            a = rng.normal((dim, v), dtype="f64")
            q, _ = np.linalg.qr(a)
            table = q.T.astype(np.float32)
        else:
            a = rng.normal((v, dim), dtype="f64")
            table = (a / np.linalg.norm(a, axis=1, keepdims=True)).astype(np.float32)
        self.table = Tensor(table, requires_grad=False)

    def embed(self, tags: list[str], length: int | None = None) -> np.ndarray:
        """Token matrix (L, dim); empty tag lists fall back to the null word."""
        words = list(tags) if tags else [data.NULL_WORD]
        for w in words:
            if w not in self.index:
                raise ValueError(f"unknown tag {w!r}; vocabulary has {len(self.vocab)} words")
        if length is not None:
            if length < 1:
                raise ValueError(f"embed length must be >= 1, got {length}")
            words = [words[i % len(words)] for i in range(length)]
        rows = np.stack([self.table.data[self.index[w]] for w in words])
        return rows.astype(np.float32)

    def embed_batch(self, tag_lists: list[list[str]], length: int) -> np.ndarray:
        return np.stack([self.embed(t, length=length) for t in tag_lists])


def connector_apply(e_raw: Tensor, connector: Tensor) -> Tensor:
    """Map raw image-prompt embeddings (B, L, raw) into the shared token space."""
    if e_raw.shape[-1] != connector.shape[0]:
        raise ValueError(
            f"connector expects trailing dim {connector.shape[0]}, got {e_raw.shape}")
    return matmul(e_raw, connector)


def lgwam_scale(f_i: Tensor, gate: Tensor) -> Tensor:
    """Per-channel gate on the last axis: out[..., d] = gate[d] * f_i[..., d]."""
    if gate.ndim != 1 or gate.shape[0] != f_i.shape[-1]:
        raise ValueError(f"gate shape {gate.shape} does not match features {f_i.shape}")
    return mul(f_i, gate)


class DpcaBlock:
    """Per-block conditioning module: frozen attention paths, trainable fusion."""

    def __init__(self, rng: Rng, channels: int, dim: int, raw_dim: int,
                 mlp_hidden: int = 32):
        self.channels = channels
        self.dim = dim
        self.raw_dim = raw_dim
        self.wq_t = Tensor(glorot(rng, (channels, dim), channels, dim), requires_grad=False)
        self.wk_t = Tensor(glorot(rng, (dim, dim), dim, dim), requires_grad=False)
        self.wv_t = Tensor(glorot(rng, (dim, dim), dim, dim), requires_grad=False)
        # Visual path starts as byte-identical copies and stays frozen too.
        self.wq_v = Tensor(self.wq_t.data.copy(), requires_grad=False)
        self.wk_v = Tensor(self.wk_t.data.copy(), requires_grad=False)
        self.wv_v = Tensor(self.wv_t.data.copy(), requires_grad=False)
        if raw_dim == dim:
            conn = np.eye(dim, dtype=np.float32)
        else:
            conn = glorot(rng, (raw_dim, dim), raw_dim, dim)
        self.connector = Tensor(conn, requires_grad=True)
        self.gate = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self.fc1 = LinearLayer(rng, dim, mlp_hidden)
        self.fc2 = LinearLayer(rng, mlp_hidden, channels)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}/wq_t": self.wq_t, f"{prefix}/wk_t": self.wk_t,
            f"{prefix}/wv_t": self.wv_t, f"{prefix}/wq_v": self.wq_v,
            f"{prefix}/wk_v": self.wk_v, f"{prefix}/wv_v": self.wv_v,
            f"{prefix}/connector": self.connector, f"{prefix}/gate": self.gate,
        }
        out.update(self.fc1.params(f"{prefix}/fc1"))
        out.update(self.fc2.params(f"{prefix}/fc2"))
        return out

    def trainable(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params(prefix).items() if v.requires_grad}


def dpca_forward(f_hidden: Tensor, e_t: Tensor, e_i_raw: Tensor | None,
                 block: DpcaBlock, text_only: bool = False) -> Tensor:
    """Condition a feature map on text (and optionally image-prompt) tokens.

    f_hidden: (B, C, H, W); e_t: (B, Lt, dim); e_i_raw: (B, Li, raw_dim).
    Returns a tensor of the same shape as f_hidden.
    """
    b, c, h, w = f_hidden.shape
    if c != block.channels:
        raise ValueError(f"block built for {block.channels} channels, got {c}")
    if e_t.ndim != 3 or e_t.shape[-1] != block.dim:
        raise ValueError(f"text tokens must be (B, L, {block.dim}), got {e_t.shape}")
    tokens = transpose(reshape(f_hidden, (b, c, h * w)), (0, 2, 1))
    f_t = attention(matmul(tokens, block.wq_t),
                    matmul(e_t, block.wk_t),
                    matmul(e_t, block.wv_t))
    if text_only:
        fused = f_t
    else:
        if e_i_raw is None:
            raise ValueError("image-prompt embeddings required unless text_only=True")
        e_i = connector_apply(e_i_raw, block.connector)
        f_i = attention(matmul(tokens, block.wq_v),
                        matmul(e_i, block.wk_v),
                        matmul(e_i, block.wv_v))
        fused = add(lgwam_scale(f_i, block.gate), f_t)
    out = block.fc2(gelu(block.fc1(fused)))
    out = reshape(transpose(out, (0, 2, 1)), (b, c, h, w))
    return add(out, f_hidden)


def gate_ratio_report(model) -> list[tuple[int, str, int, float]]:
    """Rows of (block index, block name, width, mean |gate|) in block order.

    Accepts any object exposing `csm_blocks` (list of DpcaBlock) and
    `block_ids` (matching list of printable block names).
    """
    blocks = model.csm_blocks
    ids = model.block_ids
    if len(blocks) != len(ids):
        raise ValueError("model block ids do not match its conditioning blocks")
    report = []
    for i, (bid, blk) in enumerate(zip(ids, blocks)):
        report.append((i, str(bid), blk.channels, float(np.mean(np.abs(blk.gate.data)))))
    return report

"""Portable tensor container plus model pack/unpack helpers.

Layout: magic "MGSR", format version u32, tensor count u32, then per tensor
a u32 name length, UTF-8 name, one dtype byte (0 = f32, 1 = f64), one ndim
byte, u32 dims, and the row-major little-endian payload. Everything a model
needs to resume, parameters, optimizer slots, and architecture scalars, is
stored as named tensors in one file.
"""

from __future__ import annotations

import struct

import numpy as np

from .diffusion import UNet, UNetConfig
from .signals import TASKS, Extractor, attach_adapters
from .tensor import Rng, Tensor

MAGIC = b"MGSR"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def checkpoint_to_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        code = _CODES.get(data.dtype)
        if code is None:
            raise ValueError(f"tensor {name!r} has unsupported dtype {data.dtype}")
        if data.ndim > 255:
            raise ValueError(f"tensor {name!r} has too many dimensions")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data).astype(_DTYPES[code], copy=False)
                     .tobytes(order="C"))
    return b"".join(parts)


def checkpoint_from_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 12:
        raise ValueError("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if off + 4 > len(blob):
            raise ValueError("truncated tensor record")
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        if off + 2 > len(blob):
            raise ValueError(f"truncated record for {name!r}")
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise ValueError(f"tensor {name!r} has unknown dtype code {code}")
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(blob):
            raise ValueError(f"payload for {name!r} runs past the end")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=off).reshape(dims)
        out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        off += nbytes
    if off != len(blob):
        raise ValueError(f"{len(blob) - off} trailing bytes after the last tensor")
    if len(out) != count:
        raise ValueError("duplicate tensor names in container")
    return out


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# model <-> tensor-dict bridges
# ---------------------------------------------------------------------------

def _meta(value) -> np.ndarray:
    return np.atleast_1d(np.asarray(value, dtype=np.float64))


def pack_model(model: UNet) -> dict[str, np.ndarray]:
    cfg = model.cfg
    out: dict[str, np.ndarray] = {
        "meta/kind": _meta(0.0),
        "meta/size": _meta(cfg.size),
        "meta/scale": _meta(cfg.scale),
        "meta/widths": _meta(list(cfg.widths)),
        "meta/t_steps": _meta(cfg.t_steps),
        "meta/beta_start": _meta(cfg.beta_start),
        "meta/beta_end": _meta(cfg.beta_end),
        "meta/embed_dim": _meta(cfg.embed_dim),
        "meta/raw_embed_dim": _meta(cfg.raw_embed_dim),
        "meta/mlp_hidden": _meta(cfg.mlp_hidden),
        "meta/time_dim": _meta(cfg.time_dim),
        "meta/text_len": _meta(cfg.text_len),
        "meta/residual_gain": _meta(cfg.residual_gain),
        "meta/seg_classes": _meta(cfg.seg_classes),
        "meta/conditioning": _meta(1.0 if cfg.conditioning == "full" else 0.0),
    }
    if model.embedder is not None:
        out["meta/embedder_width"] = _meta(model.embedder.width)
        out["meta/embedder_dim"] = _meta(model.embedder.embed_dim)
    for name, t in model.named_params().items():
        out[name] = t.data
    for name, t in model.opt.state_tensors().items():
        out[name] = t.data
    return out


def unpack_model(tensors: dict[str, np.ndarray]) -> UNet:
    if "meta/kind" not in tensors or tensors["meta/kind"][0] != 0.0:
        raise ValueError("container does not hold a super-resolver model")

    def scalar(name):
        return tensors[name][0]

    cfg = UNetConfig(
        size=int(scalar("meta/size")), scale=int(scalar("meta/scale")),
        widths=tuple(int(w) for w in tensors["meta/widths"]),
        t_steps=int(scalar("meta/t_steps")),
        beta_start=float(scalar("meta/beta_start")),
        beta_end=float(scalar("meta/beta_end")),
        embed_dim=int(scalar("meta/embed_dim")),
        raw_embed_dim=int(scalar("meta/raw_embed_dim")),
        mlp_hidden=int(scalar("meta/mlp_hidden")),
        time_dim=int(scalar("meta/time_dim")),
        text_len=int(scalar("meta/text_len")),
        residual_gain=float(scalar("meta/residual_gain")),
        seg_classes=int(scalar("meta/seg_classes")),
        conditioning="full" if scalar("meta/conditioning") == 1.0 else "none")
    model = UNet(cfg, Rng(0))
    if "meta/embedder_width" in tensors:
        model.set_embedder(Extractor(
            "embed", Rng(0), width=int(scalar("meta/embedder_width")),
            seg_classes=cfg.seg_classes, embed_dim=int(scalar("meta/embedder_dim"))))
    params = model.named_params()
    for name, t in params.items():
        arr = tensors.get(name)
        if arr is None:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arr.shape != t.data.shape:
            raise ValueError(f"parameter {name!r} has shape {arr.shape}, "
                             f"model expects {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    extras = [k for k in tensors
              if not k.startswith(("meta/", "opt/")) and k not in params]
    if extras:
        raise ValueError(f"checkpoint holds unknown tensors: {sorted(extras)[:4]}")
    opt_state = {k: Tensor(v, requires_grad=False)
                 for k, v in tensors.items() if k.startswith("opt/")}
    if opt_state:
        model.opt.load_state(opt_state)
    return model


def pack_extractor(ext: Extractor) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {
        "meta/kind": _meta(1.0),
        "meta/task": _meta(TASKS.index(ext.task)),
        "meta/width": _meta(ext.width),
        "meta/seg_classes": _meta(ext.seg_classes),
        "meta/embed_dim": _meta(ext.embed_dim),
        "meta/rank": _meta(ext.rank),
    }
    for name, t in ext.params().items():
        out[name] = t.data
    return out


def unpack_extractor(tensors: dict[str, np.ndarray]) -> Extractor:
    if "meta/kind" not in tensors or tensors["meta/kind"][0] != 1.0:
        raise ValueError("container does not hold an extractor")

    def scalar(name):
        return tensors[name][0]

    ext = Extractor(TASKS[int(scalar("meta/task"))], Rng(0),
                    width=int(scalar("meta/width")),
                    seg_classes=int(scalar("meta/seg_classes")),
                    embed_dim=int(scalar("meta/embed_dim")))
    rank = int(scalar("meta/rank"))
    if rank:
        attach_adapters(ext, rank, Rng(0))
    params = ext.params()
    for name, t in params.items():
        arr = tensors.get(name)
        if arr is None:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        if arr.shape != t.data.shape:
            raise ValueError(f"parameter {name!r} has shape {arr.shape}, "
                             f"extractor expects {t.data.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)
    extras = [k for k in tensors if not k.startswith("meta/") and k not in params]
    if extras:
        raise ValueError(f"checkpoint holds unknown tensors: {sorted(extras)[:4]}")
    return ext

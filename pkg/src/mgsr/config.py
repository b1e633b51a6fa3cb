"""Run configuration: INI files with strict keys and logged defaults."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

from .diffusion import UNetConfig


@dataclass
class DataSection:
    size: int = 64
    scale: int = 4
    seg_classes: int = 6


@dataclass
class ModelSection:
    widths: tuple = (12, 24, 48)
    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    embed_dim: int = 16
    raw_embed_dim: int = 32
    mlp_hidden: int = 16
    time_dim: int = 32
    text_len: int = 4
    residual_gain: float = 4.0
    conditioning: str = "full"


@dataclass
class TrainSection:
    # desk-scale training; a production run of this recipe would use
    # roughly 10x the lr-steps budget (smaller lr, many more steps)
    batch_size: int = 8
    lr: float = 2.5e-4
    steps: int = 5000
    seed: int = 1
    log_every: int = 50


@dataclass
class EvalSection:
    sample_steps: int = 50
    eta: float = 0.0


@dataclass
class RunConfig:
    data: DataSection
    model: ModelSection
    train: TrainSection
    eval: EvalSection


_SECTIONS = {"data": DataSection, "model": ModelSection,
             "train": TrainSection, "eval": EvalSection}


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            raise TypeError("no boolean keys in the schema")
        if isinstance(default, tuple):
            items = [p for p in raw.replace(",", " ").split() if p]
            return tuple(int(p) for p in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value for {name}: {raw!r}") from None


def default_config() -> RunConfig:
    return RunConfig(DataSection(), ModelSection(), TrainSection(), EvalSection())


def load_config(path) -> RunConfig:
    """Parse an INI file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",),
                                       interpolation=None)
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    cfg = default_config()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        known = {f.name: f for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            default = getattr(type(target)(), key)
            setattr(target, key, _parse_value(f"[{section}] {key}", raw, default))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    d, m, t, e = cfg.data, cfg.model, cfg.train, cfg.eval
    if d.size < 8 or d.size % d.scale:
        raise ValueError(f"size {d.size} must be >= 8 and divisible by scale {d.scale}")
    if not m.widths or any(w < 1 for w in m.widths):
        raise ValueError(f"widths must be positive, got {m.widths}")
    if d.size % (1 << (len(m.widths) - 1)):
        raise ValueError(f"size {d.size} not divisible by the "
                         f"{len(m.widths)}-level downsampling")
    if m.conditioning not in ("full", "none"):
        raise ValueError(f"conditioning must be full or none, got {m.conditioning!r}")
    if not 0 < m.beta_start < m.beta_end < 1:
        raise ValueError(f"betas must satisfy 0 < start < end < 1, "
                         f"got {m.beta_start}, {m.beta_end}")
    for label, val in (("batch_size", t.batch_size), ("steps", t.steps),
                       ("log_every", t.log_every), ("sample_steps", e.sample_steps)):
        if val < 1:
            raise ValueError(f"{label} must be >= 1, got {val}")
    if t.lr <= 0:
        raise ValueError(f"lr must be positive, got {t.lr}")
    if m.residual_gain <= 0:
        raise ValueError(f"residual_gain must be positive, got {m.residual_gain}")
    if e.sample_steps > m.t_steps:
        raise ValueError(f"sample_steps {e.sample_steps} exceeds "
                         f"schedule length {m.t_steps}")


def render_config(cfg: RunConfig) -> str:
    """Full resolved config as INI text, defaults included."""
    out = io.StringIO()
    for section, _ in _SECTIONS.items():
        target = getattr(cfg, section)
        out.write(f"[{section}]\n")
        for f in fields(target):
            val = getattr(target, f.name)
            if isinstance(val, tuple):
                val = ",".join(str(v) for v in val)
            out.write(f"{f.name} = {val}\n")
        out.write("\n")
    return out.getvalue()


def to_unet_config(cfg: RunConfig) -> UNetConfig:
    m, d = cfg.model, cfg.data
    return UNetConfig(size=d.size, scale=d.scale, widths=tuple(m.widths),
                      t_steps=m.t_steps, beta_start=m.beta_start,
                      beta_end=m.beta_end, embed_dim=m.embed_dim,
                      raw_embed_dim=m.raw_embed_dim, mlp_hidden=m.mlp_hidden,
                      time_dim=m.time_dim, text_len=m.text_len,
                      residual_gain=m.residual_gain,
                      seg_classes=d.seg_classes, conditioning=m.conditioning)

"""Run configuration: a flat dataclass and its key=value file format.

Config files are flat text, one ``key = value`` per line, ``#`` comments.
Values parse as bool/int/float/string; comma-separated numbers parse as
tuples. Unknown keys are rejected so typos fail loudly. CLI flags and
``--set key=value`` overrides take precedence over file values.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

BRIDGE_MODES = ("none", "canny_fixed", "hed_fixed", "learned", "learned_no_pretrain")


@dataclass
class LossWeights:
    """Coefficients of the composite objective (contrast, bridge, adversary)."""

    contrast: float = 1.0
    bridge: float = 1.0
    adversary: float = 1.0

    def __post_init__(self):
        for name in ("contrast", "bridge", "adversary"):
            v = getattr(self, name)
            if not (v >= 0 and v == v):  # finite and non-negative
                raise ValueError(f"loss weight '{name}' must be finite and >= 0, got {v}")


@dataclass
class TrainConfig:
    # data
    data_root: str = ""
    image_size: int = 64
    train_domains: tuple[str, ...] | None = None  # None = all domains in root
    workers: int = 0

    # optimization
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 0.03
    final_lr: float = 0.002
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4

    # encoder
    arch: str = "small"
    proj_dim: int = 128
    proj_hidden: int = 0  # 0 = same as feature dim
    ema_m: float = 0.999

    # contrastive
    temperature: float = 0.2
    exclude_own_cached: bool = True
    cap_max: int = 4096

    # bridge
    use_bridge: str = "learned"
    bridge_variant: str = "l2_canny_blur"
    mapper_stages: int = 3
    mapper_widths: tuple[int, ...] = (16, 32, 64)
    blur_kernel: int = 5
    blur_sigma: float = 0.15
    canny_low: float = 0.1
    canny_high: float = 0.2
    edge_weights_path: str = ""

    # adversary
    use_adversary: bool = True
    disc_hidden: tuple[int, ...] = (1024, 512, 256)

    # queues
    multi_queue: bool = True

    # loss weights
    loss_w_contrast: float = 1.0
    loss_w_bridge: float = 1.0
    loss_w_adversary: float = 1.0

    # augmentation
    crop_scale: tuple[float, float] = (0.2, 1.0)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    jitter_strength: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    gray_p: float = 0.2
    blur_p: float = 0.5

    # full-scale switches, OFF in all desk/acceptance runs
    imagenet_init: bool = False
    transductive: bool = False

    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 0  # steps; 0 = only final
    log_every: int = 1

    def __post_init__(self):
        if self.use_bridge not in BRIDGE_MODES:
            raise ValueError(
                f"use_bridge must be one of {BRIDGE_MODES}, got '{self.use_bridge}'"
            )
        if self.use_bridge == "hed_fixed" and not self.edge_weights_path:
            raise ValueError("use_bridge=hed_fixed requires edge_weights_path")
        if self.bridge_variant == "l2_hed" and not self.edge_weights_path:
            raise ValueError("bridge_variant=l2_hed requires edge_weights_path")

    def loss_weights(self) -> LossWeights:
        w = LossWeights(self.loss_w_contrast, self.loss_w_bridge, self.loss_w_adversary)
        return w

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out = {k: (list(v) if isinstance(v, tuple) else v) for k, v in out.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


_TUPLE_FIELDS = {
    "train_domains": str,
    "mapper_widths": int,
    "disc_hidden": int,
    "crop_scale": float,
    "jitter_strength": float,
}

_FIELD_TYPES = {f.name: f for f in fields(TrainConfig)}


def _parse_scalar(raw: str):
    raw = raw.strip()
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines into a raw dict."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno} is not 'key = value': {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        raw = raw.strip()
        if key in _TUPLE_FIELDS and ("," in raw or key == "train_domains"):
            cast = _TUPLE_FIELDS[key]
            out[key] = tuple(cast(_parse_scalar(part)) for part in raw.split(",") if part.strip())
        elif key in _TUPLE_FIELDS:
            cast = _TUPLE_FIELDS[key]
            val = _parse_scalar(raw)
            out[key] = None if val is None else (cast(val),)
        else:
            out[key] = _parse_scalar(raw)
    return out


def config_from_mapping(raw: dict) -> TrainConfig:
    unknown = set(raw) - set(_FIELD_TYPES)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if value is None and key != "train_domains":
            continue  # keep dataclass default
        if key in _TUPLE_FIELDS and isinstance(value, (list, tuple)):
            value = tuple(_TUPLE_FIELDS[key](v) for v in value)
        kwargs[key] = value
    return TrainConfig(**kwargs)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    raw = parse_config_text(Path(path).read_text())
    if overrides:
        raw.update(overrides)
    return config_from_mapping(raw)


def dump_config(cfg: TrainConfig) -> str:
    """Render a config back to the flat key=value format."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if value is None:
            rendered = "none"
        elif isinstance(value, tuple):
            rendered = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            rendered = "true" if value else "false"
        elif isinstance(value, str):
            rendered = f'"{value}"'
        else:
            rendered = str(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"

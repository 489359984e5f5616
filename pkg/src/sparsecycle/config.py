"""Training configuration, presets and the ``key = value`` config format.

Every field of :class:`NetworkSpec` and :class:`TrainConfig` is addressable
as ``net.<field>`` / ``train.<field>``; run-level options (``data``, ``out``,
``save_every``, ``resume``) are bare keys. ``preset`` and ``ablation`` are
directives applied before explicit keys.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Mapping, Tuple

from .losses import LossWeights
from .networks import NetworkSpec


@dataclass
class TrainConfig:
    epochs: int = 200
    lr0: float = 2e-4
    decay_start_epoch: int = 100
    batch_size: int = 1
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    n_critic: int = 1
    lambda_cyc: float = 10.0
    lambda_perc: float = 100.0
    lambda_gp: float = 10.0
    perceptual: bool = True
    perceptual_blur_side: bool = False
    perceptual_tap: int = 3
    perceptual_weights: str = ""
    augment_flip: bool = True
    augment_min_crop: float = 1.0
    resize: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.decay_start_epoch <= self.epochs:
            raise ValueError(
                f"decay_start_epoch must be in [0, epochs={self.epochs}], got {self.decay_start_epoch}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.n_critic < 1:
            raise ValueError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0.0 < self.augment_min_crop <= 1.0:
            raise ValueError(f"augment_min_crop must be in (0, 1], got {self.augment_min_crop}")
        LossWeights(self.lambda_cyc, self.lambda_perc, self.lambda_gp)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cyc, self.lambda_perc, self.lambda_gp)

    @property
    def augment(self) -> bool:
        return self.augment_flip or self.augment_min_crop < 1.0


@dataclass
class RunOptions:
    data: str = ""
    out: str = "run"
    save_every: int = 0
    resume: str = ""


DESK_EPOCHS = 200

PRESETS: Dict[str, Dict[str, object]] = {
    "desk": {
        "net.base_channels": 8,
        "net.n_res_blocks": 3,
        "train.epochs": DESK_EPOCHS,
        "train.decay_start_epoch": DESK_EPOCHS // 2,
        "train.lr0": 2e-4,
        "train.resize": 0,
    },
    "paper": {
        "net.base_channels": 64,
        "net.n_res_blocks": 9,
        "train.epochs": 200,
        "train.decay_start_epoch": 100,
        "train.lr0": 2e-4,
        "train.batch_size": 1,
        "train.adam_beta2": 0.999,
        "train.lambda_cyc": 10.0,
        "train.lambda_perc": 100.0,
        "train.lambda_gp": 10.0,
        "train.resize": 256,
    },
}

# the four ablation configurations, from plain CycleGAN to the full model
ABLATIONS: Dict[str, Dict[str, object]] = {
    "cyclegan": {"net.sparse_res_blocks": False, "net.kwinner": False, "train.perceptual": False},
    "sparse": {"net.sparse_res_blocks": True, "net.kwinner": False, "train.perceptual": False},
    "perceptual_sparse": {"net.sparse_res_blocks": True, "net.kwinner": False, "train.perceptual": True},
    "full": {"net.sparse_res_blocks": True, "net.kwinner": True, "train.perceptual": True},
}

SECTIONS = (("net", NetworkSpec), ("train", TrainConfig), ("", RunOptions))
DIRECTIVES = ("preset", "ablation")


class ConfigError(ValueError):
    """Unknown key, bad value or inconsistent configuration."""


def all_keys() -> Dict[str, dataclasses.Field]:
    out = {}
    for prefix, cls in SECTIONS:
        for f in fields(cls):
            out[f"{prefix}.{f.name}" if prefix else f.name] = f
    return out


def _coerce(key: str, value, f: dataclasses.Field):
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def resolve(values: Mapping[str, object]) -> Tuple[NetworkSpec, TrainConfig, RunOptions]:
    """Build the three config objects from raw key/value pairs."""
    known = all_keys()
    unknown = [k for k in values if k not in known and k not in DIRECTIVES]
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    merged: Dict[str, object] = {}
    preset = values.get("preset")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        merged.update(PRESETS[preset])
    ablation = values.get("ablation")
    if ablation:
        if ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablation!r}; choose from {sorted(ABLATIONS)}")
        merged.update(ABLATIONS[ablation])
    merged.update({k: v for k, v in values.items() if k not in DIRECTIVES})

    built = []
    for prefix, cls in SECTIONS:
        kwargs = {}
        for f in fields(cls):
            key = f"{prefix}.{f.name}" if prefix else f.name
            if key in merged:
                kwargs[f.name] = _coerce(key, merged[key], known[key])
        try:
            built.append(cls(**kwargs))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return tuple(built)


def flatten(net: NetworkSpec, train: TrainConfig, run: RunOptions = None) -> Dict[str, object]:
    out = {}
    for prefix, obj in (("net", net), ("train", train), ("", run)):
        if obj is None:
            continue
        for k, v in asdict(obj).items():
            out[f"{prefix}.{k}" if prefix else k] = v
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(net: NetworkSpec, train: TrainConfig, run: RunOptions = None) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in flatten(net, train, run).items())


def load_config(text: str, source: str = "<config>"):
    return resolve(parse_config_text(text, source))


def describe_keys() -> Iterable[str]:
    """One line per config key with its default, for ``--help``."""
    for prefix, cls in SECTIONS:
        for f in fields(cls):
            key = f"{prefix}.{f.name}" if prefix else f.name
            yield f"  {key:<28} (default: {_format(f.default)})"
    yield f"  {'preset':<28} one of: {', '.join(sorted(PRESETS))}"
    yield f"  {'ablation':<28} one of: {', '.join(ABLATIONS)}"

"""Run configuration: dataclasses, the ``key = value`` file format, and
``--set key=value`` overrides.

Config files are flat: one assignment per line, ``#`` starts a comment,
blank lines are skipped. Unknown keys are rejected rather than ignored so
a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ConfigError

FUSION_TYPES = ("adaptive", "concat", "add", "hadamard")
SCHEMES = ("C3", "C9")

# Transition codes shared by the generator and the label schemes. Order is
# load-bearing: stable transitions first, then conversions, then reversion.
TRANSITIONS = (
    ("NC", "NC"), ("MCI", "MCI"), ("AD", "AD"),
    ("NC", "MCI"), ("MCI", "AD"), ("NC", "AD"),
    ("MCI", "NC"),
)
# Marginal frequencies (percent) observed in longitudinal cohorts: stable
# 65.3, conversion 33.0, reversion 1.7, with NC->NC at 33.5, MCI->AD at
# 21.3 and AD->AD at 17.8 pinning the within-group split.
TRANSITION_PRIORS = (0.335, 0.140, 0.178, 0.100, 0.213, 0.017, 0.017)

DIAG_NAMES = ("NC", "MCI", "AD")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The defaults describe the full-size network (embed 96, depths 2/2/6/2).
    Tests and the acceptance suite run a reduced copy; nothing in the code
    depends on the defaults beyond validation.
    """

    patch_size: int = 4
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    window: int = 8
    num_experts: int = 8
    num_shared_experts: int = 2
    expert_hidden_ratio: int = 4
    gate_temp: float = 1.0
    shared_expert_weight: float = 0.3
    fusion_stage: int = 2
    fusion_type: str = "adaptive"
    num_change_classes: int = 3
    mask_unit: int = 8
    mask_ratio: float = 0.6
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("depths and num_heads must list exactly 4 stages")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"stage depths must be positive, got {self.depths}")
        for s, h in enumerate(self.num_heads):
            dim = self.embed_dim * (1 << s)
            if h < 1 or dim % h:
                raise ConfigError(f"stage {s} channels {dim} not divisible by {h} heads")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be positive, got {self.patch_size}")
        if self.window < 2 or self.window % 2:
            raise ConfigError(f"window must be even and >= 2, got {self.window}")
        if self.num_shared_experts < 1 or self.num_shared_experts >= self.num_experts:
            raise ConfigError("need at least one shared and one class expert")
        if (self.num_experts - self.num_shared_experts) % len(DIAG_NAMES):
            raise ConfigError(
                f"{self.num_experts - self.num_shared_experts} class experts do not split "
                f"evenly over {len(DIAG_NAMES)} classes")
        if not 0.0 < self.shared_expert_weight < 1.0:
            raise ConfigError(f"shared_expert_weight must lie in (0, 1), got {self.shared_expert_weight}")
        if self.gate_temp <= 0.0:
            raise ConfigError(f"gate_temp must be positive, got {self.gate_temp}")
        if self.fusion_stage not in (0, 1, 2, 3):
            raise ConfigError(f"fusion_stage must be one of 0..3, got {self.fusion_stage}")
        if self.fusion_type not in FUSION_TYPES:
            raise ConfigError(f"fusion_type must be one of {FUSION_TYPES}, got {self.fusion_type!r}")
        if self.num_change_classes not in (3, 7):
            raise ConfigError(f"num_change_classes must be 3 or 7, got {self.num_change_classes}")
        if self.mask_unit < 1:
            raise ConfigError(f"mask_unit must be positive, got {self.mask_unit}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    def stage_dim(self, stage: int) -> int:
        return self.embed_dim * (1 << stage)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    epochs: int = 30
    batch_size: int = 16
    patience: int = 10
    seed: int = 0
    lambda_expert: float = 0.5
    alpha: float = 1.0
    beta: float = 1.0
    min_lr_ratio: float = 0.01
    deterministic: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs, batch_size and patience must be positive")
        if not 0.0 <= self.min_lr_ratio <= 1.0:
            raise ConfigError(f"min_lr_ratio must lie in [0, 1], got {self.min_lr_ratio}")
        if self.lambda_expert < 0 or self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be >= 0")
        return self


@dataclass
class DataConfig:
    n: int = 600
    size: int = 64
    scheme: str = "C3"
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    label_priors: tuple[float, ...] = TRANSITION_PRIORS

    def validate(self) -> "DataConfig":
        if self.n < 1:
            raise ConfigError(f"n must be positive, got {self.n}")
        if self.size < 32 or self.size % 32:
            raise ConfigError(f"size must be a positive multiple of 32, got {self.size}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ConfigError(f"fractions must be 3 non-negative values, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"fractions must sum to 1, got {self.fractions}")
        if len(self.label_priors) != len(TRANSITIONS) or any(p < 0 for p in self.label_priors):
            raise ConfigError(f"label_priors must be {len(TRANSITIONS)} non-negative values")
        if sum(self.label_priors) <= 0:
            raise ConfigError("label_priors must not all be zero")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        return self


# -- parsing -----------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as err:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from err


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as err:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from err


def _typed(section: str, name: str, kind):
    def setter(cfg: RunConfig, text: str):
        try:
            value = kind(text)
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(f"bad value for {name}: {text!r}") from err
        setattr(getattr(cfg, section), name, value)
    return setter


_KEYS = {
    # model
    "patch_size": _typed("model", "patch_size", int),
    "embed_dim": _typed("model", "embed_dim", int),
    "depths": _typed("model", "depths", _parse_int_tuple),
    "num_heads": _typed("model", "num_heads", _parse_int_tuple),
    "window": _typed("model", "window", int),
    "num_experts": _typed("model", "num_experts", int),
    "num_shared_experts": _typed("model", "num_shared_experts", int),
    "expert_hidden_ratio": _typed("model", "expert_hidden_ratio", int),
    "gate_temp": _typed("model", "gate_temp", float),
    "shared_expert_weight": _typed("model", "shared_expert_weight", float),
    "fusion_stage": _typed("model", "fusion_stage", int),
    "fusion_type": _typed("model", "fusion_type", str),
    "num_change_classes": _typed("model", "num_change_classes", int),
    "mask_unit": _typed("model", "mask_unit", int),
    "mask_ratio": _typed("model", "mask_ratio", float),
    "dtype": _typed("model", "dtype", str),
    # train
    "lr": _typed("train", "lr", float),
    "weight_decay": _typed("train", "weight_decay", float),
    "clip_norm": _typed("train", "clip_norm", float),
    "epochs": _typed("train", "epochs", int),
    "batch_size": _typed("train", "batch_size", int),
    "patience": _typed("train", "patience", int),
    "seed": _typed("train", "seed", int),
    "lambda_expert": _typed("train", "lambda_expert", float),
    "alpha": _typed("train", "alpha", float),
    "beta": _typed("train", "beta", float),
    "min_lr_ratio": _typed("train", "min_lr_ratio", float),
    "deterministic": _typed("train", "deterministic", _parse_bool),
    # data
    "n": _typed("data", "n", int),
    "size": _typed("data", "size", int),
    "scheme": _typed("data", "scheme", str),
    "fractions": _typed("data", "fractions", _parse_float_tuple),
    "label_priors": _typed("data", "label_priors", _parse_float_tuple),
}


def known_keys() -> tuple[str, ...]:
    return tuple(_KEYS)


def apply_assignment(cfg: RunConfig, key: str, value: str) -> None:
    setter = _KEYS.get(key)
    if setter is None:
        raise ConfigError(f"unknown config key {key!r}")
    setter(cfg, value)


def parse_config_text(text: str, cfg: RunConfig | None = None,
                      source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            apply_assignment(cfg, key, value)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from err
    return cfg


def load_config(path, cfg: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), cfg=cfg, source=str(path))


def apply_overrides(cfg: RunConfig, assignments: Sequence[str]) -> RunConfig:
    """Apply ``key=value`` strings from the command line, last one wins."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        apply_assignment(cfg, key, value)
    return cfg


def config_as_dict(cfg: ModelConfig) -> dict:
    out = dataclasses.asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def model_config_from_dict(raw: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"unknown model config keys in checkpoint: {sorted(unknown)}")
    kwargs = dict(raw)
    for key in ("depths", "num_heads"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ModelConfig(**kwargs).validate()

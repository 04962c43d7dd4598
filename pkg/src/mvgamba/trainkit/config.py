"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..loss import LossWeights
from ..model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    # model
    image_size: int = 64
    patch: int = 8
    dim: int = 64
    depth: int = 2
    d_state: int = 8
    d_conv: int = 4
    expand: int = 2
    n_bins: int = 32
    mode: str = "3d"
    # data
    k_gaussians: int = 64
    n_train_scenes: int = 0  # 0 draws a fresh scene every sample
    n_novel: int = 6
    resample_inputs: bool = True
    held_out_seed: int = 1_000_003
    # schedule
    epochs: int = 300
    steps_per_epoch: int = 10
    warmup_epochs: int = 15
    batch_size: int = 4
    lr: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    tau_start: float = 2.0
    tau_end: float = 0.01
    straight_through: bool = False
    # loss
    mask_weight: float = 1.0
    perceptual_weight: float = 0.6
    perceptual_impl: str = "off"
    reg_weight: float = 0.001
    # augmentation
    aug_prob: float = 0.3
    grid_strength: float = 0.5
    jitter_magnitude: float = 0.5
    # bookkeeping
    tile_size: int = 8
    eval_every: int = 10
    checkpoint_every: int = 100
    out_dir: str = "runs/default"
    threads: int = 1

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide image size {self.image_size}")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")
        if self.mode not in ("3d", "2d"):
            raise ConfigError(f"mode must be 3d or 2d, got {self.mode!r}")
        if min(self.grid_strength, self.jitter_magnitude) < 0 or max(self.grid_strength, self.jitter_magnitude) > 1:
            raise ConfigError("augmentation strengths must lie in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.image_size, self.patch, self.dim, self.depth, self.d_state, self.d_conv,
                           self.expand, self.n_bins, 4, self.mode)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.mask_weight, self.perceptual_weight, self.reg_weight)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(kind: type, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_KINDS = {"int": int, "float": float, "str": str, "bool": bool}


def parse_config(text: str, source: str = "<config>", **overrides) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keyword overrides win over the file."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(_KINDS[_TYPES[key]], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(), str(path), **overrides)

"""Model and training configuration.

Defaults are the final tuned values of the reference setup; the
acceptance and unit suites override them with desk-scale sizes.  Configs
round-trip through UTF-8 ``key=value`` files so every run can echo its
resolved configuration.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .exceptions import ConfigError

TOKENIZER_METHODS = ("sliding_window", "conv2d", "spt", "cct")
POSITIONAL_MODES = ("learned", "sinusoidal")
MODEL_MODES = ("v1t", "vit", "linear")
BIAS_INITS = ("zero", "mean")


@dataclass
class CoreConfig:
    """Architecture hyperparameters for the shared core and readouts."""

    mode: str = "v1t"                      # v1t | vit | linear
    tokenizer: str = "sliding_window"
    patch_size: int = 8
    patch_stride: int = 1
    embed_dim: int = 155
    n_blocks: int = 4
    n_heads: int = 4
    mlp_dim: int = 488
    patch_dropout: float = 0.0229
    mha_dropout: float = 0.2544
    mlp_dropout: float = 0.2544
    stochastic_depth: float = 0.0
    lsa: bool = False
    positional: str = "learned"            # learned | sinusoidal
    use_cls_token: bool = False
    # behavior-module variants (worse-performing alternatives kept selectable)
    bmlp_shared: bool = False              # one module reused at every block
    bmlp_first_block_only: bool = False
    # vanilla-ViT behavior handling
    vit_behavior_channels: bool = True     # concatenate behaviors as image channels
    vit_include_pupil_channels: bool = False  # pupil center normally goes to the shifter only
    # readout
    pos_hidden_layers: int = 1
    pos_hidden_size: int = 30
    readout_bias_init: str = "zero"        # zero | mean
    sigma_init: float = 0.25
    use_shifter: bool = True

    def validate(self):
        if self.mode not in MODEL_MODES:
            raise ConfigError(f"unknown mode: {self.mode}")
        if self.tokenizer not in TOKENIZER_METHODS:
            raise ConfigError(f"unknown tokenizer: {self.tokenizer}")
        if self.positional not in POSITIONAL_MODES:
            raise ConfigError(f"unknown positional mode: {self.positional}")
        if self.readout_bias_init not in BIAS_INITS:
            raise ConfigError(f"unknown readout_bias_init: {self.readout_bias_init}")
        if not 1 <= self.patch_stride <= self.patch_size:
            raise ConfigError("patch_stride must satisfy 1 <= stride <= patch_size")
        if self.embed_dim < self.n_heads:
            raise ConfigError("embed_dim must be at least n_heads")
        if self.pos_hidden_layers < 1:
            raise ConfigError("pos_hidden_layers must be >= 1")
        for name in ("patch_dropout", "mha_dropout", "mlp_dropout", "stochastic_depth"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.sigma_init <= 0:
            raise ConfigError("sigma_init must be positive")
        return self


@dataclass
class TrainConfig:
    """Optimization recipe: loss epsilon, AdamW, LR schedule, L1 weights."""

    initial_lr: float = 0.0016
    lr_decay: float = 0.3
    patience: int = 10
    max_reductions: int = 2
    max_epochs: int = 200
    l1_core: float = 0.5379
    l1_readout: float = 0.0076
    eps: float = 1e-8                      # added to responses and predictions in the loss
    batch_size: int = 64
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    improvement_tol: float = 1e-6          # relative margin counting as improvement

    def validate(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigError("lr_decay must lie in (0, 1)")
        if self.max_epochs < 1 or self.max_reductions < 0:
            raise ConfigError("max_epochs >= 1 and max_reductions >= 0 required")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        return self


@dataclass
class PreprocessConfig:
    """Center-crop fraction and target resolution for input images."""

    alpha: float = 1.0
    target_h: int = 36
    target_w: int = 64

    def validate(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.target_h < 1 or self.target_w < 1:
            raise ConfigError("target size must be positive")
        return self


def _coerce(value: str, field_type):
    if field_type is bool:
        low = value.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from {value!r}")
    return field_type(value)


def apply_overrides(cfg, overrides: dict):
    """Set dataclass fields from string values; unknown keys are rejected."""
    fields = {f.name for f in dataclasses.fields(cfg)}
    for key, raw in overrides.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {key}")
        try:
            setattr(cfg, key, _coerce(str(raw), type(getattr(cfg, key))))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {key}: {raw!r}") from err
    return cfg


def config_lines(*cfgs) -> str:
    """Serialize dataclasses as sorted key=value lines."""
    lines = []
    for cfg in cfgs:
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name}={getattr(cfg, f.name)}")
    return "\n".join(sorted(lines)) + "\n"


def read_config_file(path) -> dict:
    """Parse key=value lines; '#' starts a comment, blank lines skipped."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def split_overrides(overrides: dict):
    """Split a flat key=value mapping into (core, train, preprocess) dicts."""
    core_fields = {f.name for f in dataclasses.fields(CoreConfig)}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    pp_fields = {f.name for f in dataclasses.fields(PreprocessConfig)}
    core, train, pp = {}, {}, {}
    for key, value in overrides.items():
        if key in core_fields:
            core[key] = value
        elif key in train_fields:
            train[key] = value
        elif key in pp_fields:
            pp[key] = value
        else:
            raise ConfigError(f"unknown config key: {key}")
    return core, train, pp

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from dotenv import load_dotenv, dotenv_values

from errors import ConfigError

# Load environment variables
load_dotenv()

LOG_LEVEL = os.getenv("FNR_LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("FNR_OUTPUT_DIR", "runs")

MODES = ("text_only", "image_only", "fused_ws", "fused_s")
PRECISIONS = ("standard", "extended")

# ═══════════════════════════════════════════════════════════════════
# MODEL - FNR head
# ═══════════════════════════════════════════════════════════════════
PROJECTION_SIZE = 64     # k
HIDDEN_SIZE = 64         # classifier shrinks 2k -> h -> 2
DROPOUT_RATE = 0.3
LAMBDA = 1.0             # weight of the similarity loss

# ═══════════════════════════════════════════════════════════════════
# OPTIMIZER - AdamW with one group per part of the network
# ═══════════════════════════════════════════════════════════════════
CLASSIFIER_LR = 0.005
CLASSIFIER_WEIGHT_DECAY = 0.07
PROJECTOR_LR = 1e-3
PROJECTOR_WEIGHT_DECAY = 1e-3
BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

# Reduce-on-plateau + early stopping
LR_PATIENCE = 5
LR_DECAY = 0.5
MIN_LR = 1e-6
EARLY_STOP_PATIENCE = 10
MIN_DELTA = 1e-4

# ═══════════════════════════════════════════════════════════════════
# TRAINING
# ═══════════════════════════════════════════════════════════════════
BATCH_SIZE = 256
MAX_EPOCHS = 100
VAL_FRACTION = 0.1       # stratified share of train held out for validation
SEED = 0


@dataclass(frozen=True)
class RunConfig:
    """Everything a train / evaluate / ablate run depends on."""

    dataset: str = ""
    mode: str = "fused_s"
    k: int = PROJECTION_SIZE
    hidden: int = HIDDEN_SIZE
    dropout: float = DROPOUT_RATE
    lam: float = LAMBDA
    precision: str = "standard"
    classifier_lr: float = CLASSIFIER_LR
    classifier_weight_decay: float = CLASSIFIER_WEIGHT_DECAY
    projector_lr: float = PROJECTOR_LR
    projector_weight_decay: float = PROJECTOR_WEIGHT_DECAY
    beta1: float = BETA1
    beta2: float = BETA2
    epsilon: float = EPSILON
    batch_size: int = BATCH_SIZE
    max_epochs: int = MAX_EPOCHS
    val_fraction: float = VAL_FRACTION
    seed: int = SEED
    output_dir: str = OUTPUT_DIR
    lr_patience: int = LR_PATIENCE
    lr_decay: float = LR_DECAY
    min_lr: float = MIN_LR
    early_stop_patience: int = EARLY_STOP_PATIENCE
    min_delta: float = MIN_DELTA

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"MODE must be one of {', '.join(MODES)}, got {self.mode!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"PRECISION must be one of {', '.join(PRECISIONS)}, got {self.precision!r}")
        if self.k < 1 or self.hidden < 1:
            raise ConfigError("K and HIDDEN must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"DROPOUT must be in [0, 1), got {self.dropout}")
        if self.lam < 0:
            raise ConfigError(f"LAMBDA must be >= 0, got {self.lam}")
        for name in ("classifier_lr", "projector_lr", "epsilon", "lr_decay", "min_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{_key(name)} must be > 0")
        for name in ("classifier_weight_decay", "projector_weight_decay", "min_delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{_key(name)} must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{_key(name)} must be in (0, 1)")
        if self.lr_decay >= 1.0:
            raise ConfigError("LR_DECAY must be < 1")
        if self.batch_size < 2:
            raise ConfigError(f"BATCH_SIZE must be >= 2, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError("MAX_EPOCHS must be >= 1")
        if not 0.0 < self.val_fraction < 0.5:
            raise ConfigError(f"VAL_FRACTION must be in (0, 0.5), got {self.val_fraction}")
        if self.seed < 0:
            raise ConfigError("SEED must be a non-negative integer")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("LR_PATIENCE and EARLY_STOP_PATIENCE must be >= 1")
        return self


# Config file key (upper case) for each RunConfig field
_KEYS = {
    "lam": "LAMBDA",
}


def _key(field_name):
    return _KEYS.get(field_name, field_name.upper())


_FIELDS = {_key(f.name): f for f in fields(RunConfig)}


def _convert(key, raw, kind):
    if raw is None:
        raise ConfigError(f"{key} has no value")
    text = raw.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {kind.__name__}") from None
    return text


def parse_overrides(values):
    """Map KEY -> raw string to RunConfig field -> typed value."""
    parsed = {}
    for raw_key, raw in values.items():
        key = raw_key.strip().upper()
        if key not in _FIELDS:
            raise ConfigError(f"Unknown config key: {raw_key}")
        field = _FIELDS[key]
        kind = {"int": int, "float": float, "str": str}.get(field.type, field.type)
        parsed[field.name] = _convert(key, raw, kind)
    return parsed


def load_run_config(path=None, **overrides):
    """
    Resolve a RunConfig: defaults, then the config file, then CLI overrides.
    Overrides with value None are ignored.
    """
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        values.update(parse_overrides(dotenv_values(path)))

    values.update({k: v for k, v in overrides.items() if v is not None})
    config = replace(RunConfig(), **values)
    return config.validate()


def dump_run_config(config):
    """Render a RunConfig as KEY=VALUE lines (the config file format)."""
    lines = []
    for f in fields(RunConfig):
        value = getattr(config, f.name)
        lines.append(f"{_key(f.name)}={value!r}" if isinstance(value, float) else f"{_key(f.name)}={value}")
    return "\n".join(lines) + "\n"


def write_resolved_config(config, run_dir):
    path = Path(run_dir) / "config.resolved.env"
    path.write_text(dump_run_config(config), encoding="utf-8")
    return path

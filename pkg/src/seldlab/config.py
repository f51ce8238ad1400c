"""Experiment configuration, presets and ``--key value`` overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .model import ConfigError, ModelConfig

PRESETS = {
    # full-length schedule: 100 epochs over ten seeds
    "full": {"epochs": 100, "batch_size": 32, "seeds": list(range(10)), "clips": 600},
    # desk scale: small synthetic set, short runs
    "desk": {"epochs": 15, "batch_size": 4, "seeds": [0, 1, 2], "clips": 60},
}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    seeds: list = field(default_factory=lambda: list(range(10)))
    threshold: float = 0.5
    selection: str = "loss"
    clips: int = 60
    data_dir: str = "data"
    out_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.model.feature_frames % 5:
            raise ConfigError("chunk length must be divisible by 5")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.selection not in ("loss", "seld"):
            raise ConfigError("selection must be 'loss' or 'seld'")
        self.model.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.model.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("yes", "true"):
            return True
        if low in ("no", "false"):
            return False
        return text


def apply_overrides(base: dict, pairs: list[str]) -> dict:
    """Apply ``--key value`` pairs; ``model.x`` or a bare model field name reach the model."""
    out = json.loads(json.dumps(base))
    model_fields = {f.name for f in fields(ModelConfig)}
    exp_fields = {f.name for f in fields(ExperimentConfig)}
    if len(pairs) % 2:
        raise ConfigError(f"override flags must come in --key value pairs: {pairs}")
    for flag, raw in zip(pairs[::2], pairs[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        key = flag[2:].replace("-", "_")
        value = _parse_value(raw)
        if key.startswith("model."):
            key = key[len("model."):]
            target = out.setdefault("model", {})
        elif key in exp_fields:
            target = out
        elif key in model_fields:
            target = out.setdefault("model", {})
        else:
            raise ConfigError(f"unknown config key {key!r}")
        target[key] = value
    return out


def build_config(path: str | None = None, preset: str | None = None,
                 overrides: list[str] | None = None) -> ExperimentConfig:
    base: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base.update(json.loads(json.dumps(PRESETS[preset])))
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        model = {**base.get("model", {}), **loaded.pop("model", {})}
        base.update(loaded)
        if model:
            base["model"] = model
    base = apply_overrides(base, overrides or [])
    return ExperimentConfig.from_dict(base)

"""Run configuration: one JSON document covering the model, the metrics, and
the dataset/output paths. Every field has a default, so ``{}`` is a complete
config; unknown keys anywhere in the document are rejected."""

import json
import os
from dataclasses import asdict, dataclass, field

from .data import ClipSpec, preset_specs
from .errors import ConfigError
from .metrics import MetricsConfig
from .model import ModelConfig

_TOP_KEYS = ("model", "metrics", "preset", "clips", "data_dir", "out_dir")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    preset: str = "overfit"
    clips: list = field(default_factory=list)  # explicit ClipSpecs override the preset
    data_dir: str = "data"
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(_TOP_KEYS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            metrics=MetricsConfig.from_dict(d.get("metrics", {})),
            preset=d.get("preset", "overfit"),
            clips=[ClipSpec.from_dict(c) for c in d.get("clips", [])],
            data_dir=d.get("data_dir", "data"),
            out_dir=d.get("out_dir", "out"),
        )

    def specs(self):
        """Clip specs to generate: explicit list if given, else the preset."""
        return list(self.clips) if self.clips else preset_specs(self.preset)

    def resolved(self):
        return asdict(self)


def load_config(path=None):
    """Parse a JSON run config; a missing path means all defaults."""
    if path is None:
        return RunConfig.from_dict({})
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except ValueError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a JSON object")
    return RunConfig.from_dict(doc)


def echo_config(cfg, out_dir):
    """Write the fully resolved config next to the run's outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "config.json")
    with open(path, "w") as fh:
        json.dump(cfg.resolved(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path

"""Declarative run configuration: INI-style file with typed, validated keys.

Four sections cover phantom sampling, model architecture, training schedule
and run orchestration. Unknown sections or keys are rejected outright so a
typo never silently falls back to a default. Command-line flags override
file values; the fully resolved configuration is echoed into the output
directory for reproducibility.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Malformed run configuration (unknown key, bad type, missing file)."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_optional_float(text: str):
    t = text.strip().lower()
    return None if t in ("", "none") else float(t)


# section -> key -> (parser, default)
SCHEMA = {
    "phantom": {
        "subjects": (int, 24),
        "seed": (int, 0),
        "image_size": (int, 80),
        "frames": (int, 20),
        "inner_radius_min": (float, 12.0), "inner_radius_max": (float, 18.0),
        "base_thickness_min": (float, 6.0), "base_thickness_max": (float, 14.0),
        "amplitude_min": (float, 2.0), "amplitude_max": (float, 6.0),
        "noise_sigma_min": (float, 0.02), "noise_sigma_max": (float, 0.05),
        "contraction_min": (float, 1.0), "contraction_max": (float, 3.0),
        "phase_min": (float, 0.0), "phase_max": (float, 1.0),
    },
    "model": {
        "variant": (str, "resrnn_circle"),
        "frames": (int, 20),
        "regions": (int, 6),
        "input_size": (int, 75),
        "embed_dim": (int, 100),
        "temporal_depth": (int, 20),
        "spatial_depth": (int, 6),
        "use_spatial": (_parse_bool, True),
    },
    "train": {
        "base_lr": (float, 0.05),
        "weight_decay": (float, 0.0005),
        "momentum": (float, 0.9),
        "lr_gamma": (float, 0.5),
        "lr_step": (int, 2500),
        "max_iters": (int, 7500),
        "batch_subjects": (int, 4),
        "grad_clip": (_parse_optional_float, None),
        "seed": (int, 0),
        "log_every": (int, 50),
    },
    "run": {
        "workers": (int, 0),  # 0 means "number of available processors"
        "spacing_mm": (_parse_optional_float, None),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.values:
            self.values = {sec: {k: d for k, (_, d) in keys.items()}
                           for sec, keys in SCHEMA.items()}

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        self.values[section][key] = value

    def to_ini(self) -> str:
        lines = []
        for sec in SCHEMA:
            lines.append(f"[{sec}]")
            for key in SCHEMA[sec]:
                v = self.values[sec][key]
                lines.append(f"{key} = {'' if v is None else v}")
            lines.append("")
        return "\n".join(lines)


def load_config(path: str | None) -> RunConfig:
    """Read an INI file into a RunConfig; missing path gives pure defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read configuration file {path}")
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown configuration section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown configuration key [{section}] {key}")
            parse, _ = SCHEMA[section][key]
            try:
                cfg.values[section][key] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {raw!r} ({exc})") from None
    return cfg

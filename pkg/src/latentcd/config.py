"""Flat run configuration: `key = value` file merged with CLI flags.

Flags win over file values; unknown keys are rejected so typos fail loudly.
The effective configuration is echoed next to every output artifact.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: '{text}'")


def _parse_int_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)


# key -> (parser, default)
KNOWN_KEYS = {
    "model": (str, "small"),                 # preset name or "custom"
    "in_channels": (int, 10),
    "tile_size": (int, 32),
    "hidden_channels": (_parse_int_list, (16, 32, 64)),
    "extra_depth": (int, 0),
    "latent_dim": (int, 128),
    "beta": (float, 1.0),
    "learning_rate": (float, 1e-3),
    "batch_size": (int, 32),
    "steps": (int, 2000),
    "seed": (int, 0),
    "optimizer": (str, "adam"),
    "checkpoint_interval": (int, 500),
    "kind": (str, "cosine_latent"),
    "k": (int, 3),
    "symmetric_kl": (_parse_bool, False),
    "cloud_threshold": (float, 0.0),
    "history_skip_threshold": (float, 0.5),
    "tile_positive_threshold": (float, 0.5),
    "per_scene_average": (_parse_bool, False),
    "max_cloud_fraction": (float, 0.2),
    "budget_bytes": (int, 0),
    "bytes_per_tile": (int, 20480),          # one raw uint16 10-band tile
    "repetitions": (int, 5),
    "k_max": (int, 4),
}


@dataclass
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key)

    def echo(self, path):
        with open(path, "w") as f:
            for key in sorted(self.values):
                v = self.values[key]
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                f.write(f"{key} = {v}\n")


def parse_config_file(path):
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            parser, _ = KNOWN_KEYS[key]
            try:
                values[key] = parser(raw)
            except (ValueError, ConfigError) as e:
                raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {e}")
    return values


def build_run_config(config_path=None, overrides=None):
    """Defaults <- config file <- explicit flag overrides."""
    values = {k: d for k, (_, d) in KNOWN_KEYS.items()}
    if config_path:
        values.update(parse_config_file(config_path))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key '{key}'")
        parser, _ = KNOWN_KEYS[key]
        values[key] = parser(raw) if isinstance(raw, str) else raw
    return RunConfig(values)


def model_config_from(run):
    """ModelConfig from the run config (preset unless model=custom)."""
    from .model import PRESETS, ModelConfig

    if run.model != "custom":
        if run.model not in PRESETS:
            raise ConfigError(f"unknown model preset '{run.model}'")
        base = PRESETS[run.model]
        return ModelConfig(in_channels=run.in_channels, tile_size=run.tile_size,
                           hidden_channels=base.hidden_channels,
                           extra_depth=base.extra_depth,
                           latent_dim=run.latent_dim, beta=run.beta)
    return ModelConfig(in_channels=run.in_channels, tile_size=run.tile_size,
                       hidden_channels=run.hidden_channels, extra_depth=run.extra_depth,
                       latent_dim=run.latent_dim, beta=run.beta)

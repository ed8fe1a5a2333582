"""Flat key=value run configuration and the run record every command emits."""

from __future__ import annotations

import time
from pathlib import Path

from . import storage


class ConfigError(ValueError):
    pass


class RunConfig:
    """Typed view over defaults <- config file <- flag overrides.

    Unknown keys are rejected; values are coerced to the type of each
    default. The fully-resolved mapping is written back next to the run's
    outputs so a run can always be replayed.
    """

    def __init__(self, defaults, config_path=None, overrides=None):
        self.defaults = dict(defaults)
        self.values = dict(defaults)
        if config_path:
            for key, raw in storage.load_kv(config_path).items():
                self._set(key, raw, source=str(config_path))
        for key, raw in (overrides or {}).items():
            if raw is not None:
                self._set(key, raw, source="flags")

    def _set(self, key, raw, source):
        if key not in self.defaults:
            raise ConfigError(f"unknown config key {key!r} (from {source})")
        default = self.defaults[key]
        try:
            if isinstance(default, bool):
                value = str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                value = int(raw)
            elif isinstance(default, float):
                value = float(raw)
            else:
                value = str(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def write_resolved(self, path):
        storage.save_kv(path, {k: self.values[k] for k in sorted(self.values)})


class RunRecord:
    """Resolved config, seed, version, wall time, and output digests."""

    def __init__(self, command, config, out_dir):
        self.command = command
        self.config = config
        self.out_dir = Path(out_dir)
        self.start = time.time()
        self.outputs = []

    def add(self, path):
        self.outputs.append(Path(path))
        return path

    def write(self):
        from . import __version__
        record = {
            "command": self.command,
            "version": __version__,
            "wall_seconds": f"{time.time() - self.start:.3f}",
        }
        for key in sorted(self.config.values):
            record[f"config.{key}"] = self.config.values[key]
        for path in sorted(set(self.outputs)):
            rel = path.relative_to(self.out_dir) if path.is_relative_to(
                self.out_dir) else path
            record[f"digest.{rel}"] = storage.file_digest(path)
        storage.save_kv(self.out_dir / "run_record.txt", record)
        return self.out_dir / "run_record.txt"

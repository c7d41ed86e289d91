"""Flat key-value run configuration.

The format is one `dotted.key = value` pair per line, `#` comments, blank
lines ignored.  Values stay strings until a stage asks for them through a
typed accessor, which is where validation errors get a key name attached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

STAGE_ORDER = ("make-data", "poison", "train-ebm", "train-ddpm", "purify",
               "train-cls", "eval", "diagnose")


def parse_config_text(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read(), source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


@dataclass
class RunConfig:
    """Raw key-value store plus the handful of globals every stage needs."""

    values: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path, overrides=None):
        values = load_config_file(path)
        values.update(overrides or {})
        return cls(values)

    # ------------------------------------------------------------- accessors

    def _fetch(self, key, default, required):
        if key in self.values:
            return self.values[key]
        if required:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def get_str(self, key, default=None, required=False):
        v = self._fetch(key, default, required)
        return v if v is None else str(v)

    def get_int(self, key, default=None, required=False):
        v = self._fetch(key, default, required)
        if v is None or isinstance(v, int):
            return v
        try:
            return int(str(v), 0)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {v!r} is not an integer") from exc

    def get_float(self, key, default=None, required=False):
        v = self._fetch(key, default, required)
        if v is None or isinstance(v, float):
            return v
        try:
            return float(v)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {v!r} is not a number") from exc

    def get_bool(self, key, default=None, required=False):
        v = self._fetch(key, default, required)
        if v is None or isinstance(v, bool):
            return v
        s = str(v).lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: {v!r} is not a boolean")

    def get_floats(self, key, default=None, required=False):
        v = self._fetch(key, default, required)
        if v is None or isinstance(v, (list, tuple)):
            return v
        try:
            return [float(p) for p in str(v).split(",") if p.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {v!r} is not a number list") from exc

    # --------------------------------------------------------------- globals

    @property
    def seed(self):
        return self.get_int("seed", required=True)

    @property
    def workers(self):
        return self.get_int("workers", 1)

    @property
    def stages(self):
        raw = self.get_str("stages", ",".join(STAGE_ORDER))
        stages = [s.strip() for s in raw.split(",") if s.strip()]
        for s in stages:
            if s not in STAGE_ORDER:
                raise ConfigError(f"unknown stage {s!r}; valid: {STAGE_ORDER}")
        # Execution always follows the canonical order regardless of listing order.
        return [s for s in STAGE_ORDER if s in stages]

    def stage_seed(self, stage):
        """Deterministic per-stage seed derived from the global seed."""
        idx = STAGE_ORDER.index(stage)
        return int(np.random.SeedSequence([self.seed, idx]).generate_state(1)[0])

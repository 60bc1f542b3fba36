"""Experiment configuration: flat `key = value` lines plus one [disks]
table (per pair: center1_re center1_im radius1 center2_re center2_im
radius2, decimal strings round-tripping exactly)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .bundled import BUNDLED_PAIRS
from .errors import ConfigError

_RANGES = {
    "max_len": (6, 14),
    "s_offset": (1e-4, 0.5),
    "atom_budget": (1000, 2_000_000),
    "depth": (1, 60),
    "count": (1, 10_000_000),
    "dt": (1e-4, 1.0),
    "T": (1.0, 100000.0),
    "r": (1e-6, 0.999999),
    "bins": (16, 100000),
    "directions": (4, 4096),
    "rho": (1e-6, 10.0),
    "h_step": (1e-4, 1e-2),
}

_INT_KEYS = {"max_len", "atom_budget", "depth", "count", "bins",
             "directions", "seed"}
_FLOAT_KEYS = {"s_offset", "dt", "T", "r", "rho", "h_step"}
_STR_KEYS = {"name", "group", "out"}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    group: str = ""                      # bundled name, or "" with disks
    disks: list = field(default_factory=list)
    max_len: int = 10
    s_offset: float = 0.02
    atom_budget: int = 24000
    depth: int = 14
    count: int = 20000
    dt: float = 0.05
    T: float = 50.0
    r: float = 0.2
    bins: int = 64
    directions: int = 64
    rho: float = 0.1
    h_step: float = 1e-3
    seed: int = None
    out: str = "out"

    def validate(self):
        for key, (lo, hi) in _RANGES.items():
            v = getattr(self, key)
            if not (lo <= v <= hi):
                raise ConfigError(
                    f"{key}={v} outside valid range [{lo}, {hi}]", field=key
                )
        if not self.disks and self.group not in BUNDLED_PAIRS:
            raise ConfigError(
                f"no disks given and group={self.group!r} is not bundled",
                field="group",
            )
        return self

    def disk_pairs(self):
        if self.disks:
            return self.disks
        return BUNDLED_PAIRS[self.group]

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in ("disks",):
                continue
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, float):
                lines.append(f"{f.name} = {v!r}")
            else:
                lines.append(f"{f.name} = {v}")
        if self.disks:
            lines.append("[disks]")
            for c1, r1, c2, r2 in self.disks:
                c1, c2 = complex(c1), complex(c2)
                lines.append(" ".join(repr(float(x)) for x in (
                    c1.real, c1.imag, r1, c2.real, c2.imag, r2)))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat-key + [disks]-table format; unknown keys rejected
    with a line diagnostic."""
    cfg = ExperimentConfig()
    in_disks = False
    disks = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower() == "[disks]":
            in_disks = True
            continue
        if in_disks:
            vals = line.split()
            if len(vals) != 6:
                raise ConfigError(
                    f"disk row needs 6 columns, got {len(vals)}", line=lineno
                )
            try:
                v = [float(x) for x in vals]
            except ValueError as e:
                raise ConfigError(f"bad disk number: {e}", line=lineno)
            disks.append((complex(v[0], v[1]), v[2], complex(v[3], v[4]), v[5]))
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw!r}", line=lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key in _INT_KEYS:
            try:
                setattr(cfg, key, int(val))
            except ValueError:
                raise ConfigError(f"{key} must be an integer", line=lineno,
                                  field=key)
        elif key in _FLOAT_KEYS:
            try:
                setattr(cfg, key, float(val))
            except ValueError:
                raise ConfigError(f"{key} must be a number", line=lineno,
                                  field=key)
        elif key in _STR_KEYS:
            setattr(cfg, key, val)
        else:
            raise ConfigError(f"unknown key {key!r}", line=lineno, field=key)
    cfg.disks = disks
    return cfg.validate()


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())

"""The three bundled reference configurations.

* fuchsian: four disks on the real axis; generators are real matrices,
  the limit set lies in R, measured exponent ~ 0.43.
* threedim: the symmetric cross (disks at +-2, +-2i) with opposite
  pairing; not contained in any circle-preserving subgroup, measured
  exponent ~ 0.41.
* deep: a flower packing (central disk plus a near-tangent ring of five,
  ring gaps 0.05) whose exponent ~ 1.13 crosses the ergodicity threshold.
"""

from __future__ import annotations

import math

from . import schottky as sk


def flower_pairs(gap: float = 0.05):
    """Central unit disk with a kissing ring of five, shrunk by gap/2."""
    b = math.sin(math.pi / 5) / (1.0 - math.sin(math.pi / 5))
    d = 1.0 + b
    ring = [d * complex(math.cos(2 * math.pi * k / 5),
                        math.sin(2 * math.pi * k / 5)) for k in range(5)]
    rb = b - gap / 2.0
    return [
        (0j, 1.0 - gap / 2.0, ring[0], rb),
        (ring[1], rb, ring[3], rb),
        (ring[2], rb, ring[4], rb),
    ]


BUNDLED_PAIRS = {
    "fuchsian": [(-3.0, 0.8, -1.0, 0.8), (1.0, 0.8, 3.0, 0.8)],
    "threedim": [(2.0, 0.8, -2.0, 0.8), (2j, 0.8, -2j, 0.8)],
    "deep": flower_pairs(0.05),
}

_cache = {}


def bundled_group(name: str) -> sk.SchottkyGroup:
    if name not in BUNDLED_PAIRS:
        raise KeyError(f"unknown bundled configuration {name!r}")
    if name not in _cache:
        _cache[name] = sk.build(BUNDLED_PAIRS[name])
    return _cache[name]

"""Flows on X = Gamma \\ G: frame flow, unipotent flow, orbit statistics
and recurrence/escape diagnostics.

Flows are exact matrix products followed by reduction to the canonical
coset representative; no ODE integration is involved.  Orbit series
evaluate a test function along x u_t on a uniform grid; box boundaries
carry no BR mass, so the O(dt) boundary error of plain grid sampling is
acceptable and dt stays a configuration knob with a refinement test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hyperbolic as hp
from . import schottky as sk
from .measures import FramePoint
from .parallel import run_chunks


@dataclass(frozen=True)
class TimeSeries:
    times: np.ndarray
    values: np.ndarray
    dt: float

    def __post_init__(self):
        if self.times.shape != self.values.shape:
            raise ValueError("times and values must have equal length")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    def integral(self, t_lo: float, t_hi: float) -> float:
        """Trapezoid integral of the series over [t_lo, t_hi]."""
        m = (self.times >= t_lo - 1e-12) & (self.times <= t_hi + 1e-12)
        if m.sum() < 2:
            return 0.0
        return float(np.trapezoid(self.values[m], self.times[m]))

    def to_csv(self, header: str = "") -> str:
        lines = []
        if header:
            lines.append(f"# {header}")
        lines.append("t,value")
        for t, v in zip(self.times, self.values):
            lines.append(f"{t:.17g},{v:.17g}")
        return "\n".join(lines) + "\n"


def flow_frame(x: FramePoint, s: float) -> FramePoint:
    """Frame flow: canonical representative of x a_s."""
    return FramePoint.from_matrix(x.group, x.rep.mat @ hp.a_s(s).mat)


def flow_unipotent(x: FramePoint, t: float) -> FramePoint:
    """Unipotent flow: canonical representative of x u_t."""
    return FramePoint.from_matrix(x.group, x.rep.mat @ hp.u_t(t).mat)


def orbit_mats(x: FramePoint, times: np.ndarray, workers=None) -> np.ndarray:
    """Reduced frame matrices of x u_t along a time grid."""
    m = x.rep.mat
    times = np.asarray(times, dtype=float)
    mats = np.empty(times.shape + (2, 2), dtype=complex)
    mats[..., 0, 0] = m[0, 0] + m[0, 1] * times
    mats[..., 0, 1] = m[0, 1]
    mats[..., 1, 0] = m[1, 0] + m[1, 1] * times
    mats[..., 1, 1] = m[1, 1]
    out = run_chunks(
        lambda lo, hi: sk.reduce_batch(x.group, mats[lo:hi]),
        times.size, workers=workers, chunk=8192,
    )
    return np.concatenate(out)


def orbit_series(x: FramePoint, psi, T: float, dt: float,
                 t_lo=None, workers=None) -> TimeSeries:
    """Series t -> psi(x u_t) on [-T, T] (or [t_lo, T]) at step dt.

    psi maps a stack of reduced frame matrices to float values; box
    indicators and base-point functions from the measures module qualify.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    lo = -T if t_lo is None else t_lo
    n = int(round((T - lo) / dt))
    times = lo + dt * np.arange(n + 1)
    mats = orbit_mats(x, times, workers=workers)
    values = np.asarray(psi(mats), dtype=float)
    return TimeSeries(times=times, values=values, dt=dt)


def distance_to_plane(x) -> float:
    """Hyperbolic distance from the base point to the vertical plane over
    the real line: arcsinh(|Im z| / t)."""
    if isinstance(x, FramePoint):
        p = x.base_point()
    else:
        p = x
    return float(np.arcsinh(abs(p.z.imag) / p.t))


def escape_slope(x: FramePoint, T: float, dt: float, workers=None):
    """Least-squares slope of plane-distance against log t on the tail
    half of the orbit; near 1 for directions transverse to the plane."""
    times = np.arange(dt, T + dt / 2, dt)
    mats = orbit_mats(x, times, workers=workers)
    z, t = hp.apply_h3_arr(mats)
    dist = np.arcsinh(np.abs(z.imag) / t)
    half = times >= 0.5 * T
    slope, _ = np.polyfit(np.log(times[half]), dist[half], 1)
    return float(slope), TimeSeries(times=times, values=dist, dt=dt)


@dataclass(frozen=True)
class VisitReport:
    intervals: list
    total_length: float
    count: int

    def to_csv(self, header: str = "") -> str:
        lines = []
        if header:
            lines.append(f"# {header}")
        lines.append("t_enter,t_exit")
        for a, b in self.intervals:
            lines.append(f"{a:.17g},{b:.17g}")
        return "\n".join(lines) + "\n"


def recurrence_times(x: FramePoint, box, T: float, dt: float,
                     workers=None) -> VisitReport:
    """Visit intervals of the forward orbit x u_t, t in [0, T], to the box."""
    times = dt * np.arange(int(round(T / dt)) + 1)
    mats = orbit_mats(x, times, workers=workers)
    inside = box.contains(mats)
    intervals = []
    start = None
    for t, flag in zip(times, inside):
        if flag and start is None:
            start = t
        elif not flag and start is not None:
            intervals.append((float(start), float(t)))
            start = None
    if start is not None:
        intervals.append((float(start), float(times[-1])))
    total = sum(b - a for a, b in intervals)
    return VisitReport(intervals=intervals, total_length=float(total),
                       count=len(intervals))

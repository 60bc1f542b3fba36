"""Fractal-measure analysis (energies, projections, box dimension) and
the orbit statistics built on them (window fractions, Hopf ratios)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import TimeSeries, orbit_series
from .errors import DegenerateRange, DenominatorZero, EmptyBall
from .parallel import run_chunks
from .patterson import AtomicMeasure

_EXACT_LIMIT = 12000


def alpha_energy(mu: AtomicMeasure, alpha: float, method: str = "auto",
                 grid: int = 2048, near_cells: int = 48) -> float:
    """Double sum of w_i w_j / |x_i - x_j|^alpha over distinct atom pairs.

    Atom self-energy is excluded (it is an artifact of discretization).
    Exact pairwise evaluation up to 3e4 atoms; beyond that a cloud-in-cell
    grid handles far pairs (second-order accurate) with near pairs summed
    exactly, keeping the relative error under 1e-3.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = mu.points.size
    if method == "exact" or (method == "auto" and n <= _EXACT_LIMIT):
        return _energy_exact(mu, alpha)
    return _energy_grid(mu, alpha, grid, near_cells)


def _energy_exact(mu: AtomicMeasure, alpha: float) -> float:
    pts, w = mu.points, mu.weights
    n = pts.size

    def piece(lo, hi):
        d = np.abs(pts[lo:hi, None] - pts[None, :])
        np.fill_diagonal(d[:, lo:hi], np.inf)
        return float(((w[lo:hi, None] * w[None, :]) * d ** (-alpha)).sum())

    return math.fsum(run_chunks(piece, n, chunk=2048))


def _energy_grid(mu: AtomicMeasure, alpha: float, grid: int,
                 near_cells: int) -> float:
    pts, w = mu.points, mu.weights
    x0, y0 = pts.real.min(), pts.imag.min()
    span = max(pts.real.max() - x0, pts.imag.max() - y0) * (1 + 1e-9)
    h = span / grid
    # cloud-in-cell mass assignment
    fx = (pts.real - x0) / h
    fy = (pts.imag - y0) / h
    ix, iy = np.floor(fx).astype(int), np.floor(fy).astype(int)
    tx, ty = fx - ix, fy - iy
    W = np.zeros((grid + 2, grid + 2))
    for dx, wx in ((0, 1 - tx), (1, tx)):
        for dy, wy in ((0, 1 - ty), (1, ty)):
            np.add.at(W, (ix + dx, iy + dy), w * wx * wy)
    # far field via FFT convolution with the truncated kernel
    m = grid + 2
    gx = np.concatenate([np.arange(m), np.arange(-m, 0)]) * h
    dist = np.hypot(gx[:, None], gx[None, :])
    with np.errstate(divide="ignore"):
        kern = dist ** (-alpha)
    kern[dist <= (near_cells - 0.5) * h] = 0.0
    FW = np.fft.rfft2(W, s=(2 * m, 2 * m))
    FK = np.fft.rfft2(kern)
    conv = np.fft.irfft2(FW * FK, s=(2 * m, 2 * m))[:m, :m]
    far = float((W * conv).sum())
    # near field exactly via a KD-tree pair query
    from scipy.spatial import cKDTree

    tree = cKDTree(np.stack([pts.real, pts.imag], axis=1))
    pairs = tree.query_pairs((near_cells - 0.5) * h, output_type="ndarray")
    near = 0.0
    if pairs.size:
        i, j = pairs[:, 0], pairs[:, 1]
        d = np.abs(pts[i] - pts[j])
        near = 2.0 * float(((w[i] * w[j]) * d ** (-alpha)).sum())
    return far + near


@dataclass(frozen=True)
class ProjectedMeasure:
    """Push-forward of a planar atomic measure under the projection onto
    the line of direction theta + pi/2 (parallel to direction theta)."""

    theta: float
    positions: np.ndarray
    weights: np.ndarray

    @property
    def total(self) -> float:
        return float(self.weights.sum())


def project(mu: AtomicMeasure, theta: float) -> ProjectedMeasure:
    """Project parallel to the line in direction theta; the surviving
    coordinate is Im(z e^{-i theta})."""
    pos = (mu.points * np.exp(-1j * theta)).imag
    return ProjectedMeasure(theta=float(theta), positions=pos,
                            weights=mu.weights.copy())


def projected_density(mu, theta: float = None, bins: int = 64):
    """Histogram density of the projection: (edges, density, mass).

    Accepts an AtomicMeasure (projected at theta) or a ProjectedMeasure.
    Mass is preserved exactly; density = bin mass / bin width.
    """
    if bins < 16:
        raise ValueError("bins must be >= 16")
    if isinstance(mu, AtomicMeasure):
        proj = project(mu, theta if theta is not None else 0.0)
    else:
        proj = mu
    pos, w = proj.positions, proj.weights
    lo, hi = float(pos.min()), float(pos.max())
    if hi - lo < 1e-15:
        edges = np.array([lo - 0.5, lo + 0.5])
        mass = np.array([float(w.sum())])
        return edges, mass / 1.0, mass
    edges = np.linspace(lo, hi * (1 + 1e-12) + 1e-300, bins + 1)
    mass, _ = np.histogram(pos, bins=edges, weights=w)
    width = edges[1] - edges[0]
    return edges, mass / width, mass


def density_l2_distance(hist1, hist2) -> float:
    """L2 distance between two histogram densities on the same edges."""
    e1, d1, _ = hist1
    e2, d2, _ = hist2
    if e1.shape != e2.shape or not np.allclose(e1, e2):
        raise ValueError("histograms must share bin edges")
    width = e1[1] - e1[0]
    return float(np.sqrt(((d1 - d2) ** 2).sum() * width))


def box_dimension(points, r_grid=None, resolution: float = 0.0,
                  n_r: int = 12):
    """Box-counting slope of log N(r) versus log(1/r).

    Points may be complex (planar) or real (line); the grid is clipped to
    [10 x resolution, diameter / 10].
    """
    pts = np.asarray(points)
    if pts.size < 10_000:
        raise ValueError("box dimension wants >= 1e4 points")
    if np.iscomplexobj(pts):
        coords = np.stack([pts.real, pts.imag], axis=1)
    else:
        coords = pts[:, None].astype(float)
    lo = coords.min(axis=0)
    span = float(np.max(coords.max(axis=0) - lo))
    if span <= 0:
        raise DegenerateRange("all points coincide")
    r_lo = max(10.0 * resolution, span * 1e-6)
    r_hi = span / 10.0
    if r_hi <= r_lo:
        raise DegenerateRange(
            f"resolution {resolution} too coarse for diameter {span}"
        )
    if r_grid is None:
        r_grid = np.geomspace(r_lo, r_hi, n_r)
    counts = []
    for r in r_grid:
        cells = np.floor((coords - lo) / r).astype(np.int64)
        key = cells[:, 0] if cells.shape[1] == 1 else (
            cells[:, 0] * (2 ** 31) + cells[:, 1])
        counts.append(np.unique(key).size)
    counts = np.asarray(counts, dtype=float)
    slope, _ = np.polyfit(np.log(1.0 / np.asarray(r_grid)), np.log(counts), 1)
    return float(slope), np.asarray(r_grid), counts


@dataclass(frozen=True)
class WindowStat:
    inner: float
    outer: float
    good: bool


def window_statistic(x, psi, T: float, r: float, dt: float,
                     workers=None) -> WindowStat:
    """Window fraction of one orbit: inner = int_{-rT}^{rT} psi(x u_t) dt,
    outer = the same over [-T, T]; good when inner <= (1 - r) outer."""
    if not 0.0 < r < 1.0:
        raise ValueError("window ratio r must be in (0, 1)")
    series = orbit_series(x, psi, T, dt, workers=workers)
    return window_from_series(series, T, r)


def window_from_series(series: TimeSeries, T: float, r: float) -> WindowStat:
    inner = series.integral(-r * T, r * T)
    outer = series.integral(-T, T)
    return WindowStat(inner=inner, outer=outer,
                      good=bool(inner <= (1.0 - r) * outer))


def hopf_ratio(x, psi1, psi2, T_grid, dt: float, workers=None):
    """Ratios int_0^T psi1(x u_t) dt / int_0^T psi2(x u_t) dt over T_grid.

    Raises DenominatorZero when the denominator vanishes at every grid
    time (a non-returning orbit); otherwise NaN marks the leading times
    with empty denominator.
    """
    T_grid = sorted(float(t) for t in T_grid)
    T_max = T_grid[-1]
    s1 = orbit_series(x, psi1, T_max, dt, t_lo=0.0, workers=workers)
    s2 = orbit_series(x, psi2, T_max, dt, t_lo=0.0, workers=workers)
    ratios = []
    any_pos = False
    for T in T_grid:
        num = s1.integral(0.0, T)
        den = s2.integral(0.0, T)
        if den > 0:
            any_pos = True
            ratios.append(num / den)
        else:
            ratios.append(float("nan"))
    if not any_pos:
        raise DenominatorZero("denominator empty on the whole T grid")
    return ratios

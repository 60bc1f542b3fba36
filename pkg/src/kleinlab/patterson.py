"""Poincare series, critical exponent estimators and atomic conformal
densities on the limit set.

The density approximation follows the weighted-orbit construction: atoms
sit at the boundary projections of deep orbit points gamma(o) (the center
of the innermost nested disk image, exact for the Schottky coding), carry
weights e^{-s d(x, gamma o)} at a supercritical s, and only words in the
top length band [max_len-2, max_len] contribute.  Oversized levels are
represented by a seeded uniform sample of reduced words with unbiased
level reweighting (that is what the rng seed is for); the final measure is
renormalized to unit mass.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import hyperbolic as hp
from . import schottky as sk
from .errors import EmptyBall, NonBracketed, SubcriticalExponent
from .parallel import run_chunks

_TOP_BAND = 2  # band is [max_len - _TOP_BAND, max_len]


class AtomicMeasure:
    """Finitely many weighted atoms on the boundary (or a line after
    projection).  Atoms at infinity are carried as a separate weight."""

    def __init__(self, points, weights, provenance=None, resolution=0.0,
                 infinity_weight=0.0):
        self.points = np.asarray(points, dtype=complex)
        self.weights = np.asarray(weights, dtype=float)
        if self.points.shape != self.weights.shape:
            raise ValueError("points and weights must have equal length")
        if self.weights.size and not np.all(self.weights > 0):
            raise ValueError("weights must be positive")
        if infinity_weight < 0:
            raise ValueError("infinity weight must be nonnegative")
        self.provenance = dict(provenance or {})
        self.resolution = float(resolution)
        self.infinity_weight = float(infinity_weight)
        self._total = float(self.weights.sum()) + self.infinity_weight

    @property
    def total(self) -> float:
        return self._total

    def __len__(self):
        return self.points.size + (1 if self.infinity_weight > 0 else 0)

    def normalized(self) -> "AtomicMeasure":
        return AtomicMeasure(
            self.points, self.weights / self.total, self.provenance,
            self.resolution, self.infinity_weight / self.total,
        )

    def ball_mass(self, center: complex, radius) -> np.ndarray:
        """Mass of closed balls B(center, r) for scalar or array r."""
        dist = np.abs(self.points - center)
        order = np.argsort(dist)
        cum = np.cumsum(self.weights[order])
        idx = np.searchsorted(dist[order], np.asarray(radius), side="right")
        return np.where(idx > 0, cum[np.maximum(idx, 1) - 1], 0.0)

    def subsample(self, max_atoms: int, seed) -> "AtomicMeasure":
        """Seeded unbiased thinning: keeps totals in expectation."""
        n = self.points.size
        if n <= max_atoms:
            return self
        rng = np.random.default_rng(seed)
        idx = rng.choice(n, size=max_atoms, replace=False)
        idx.sort()
        scale = self.weights.sum() / self.weights[idx].sum()
        return AtomicMeasure(self.points[idx], self.weights[idx] * scale,
                             self.provenance, self.resolution,
                             self.infinity_weight)

    def diameter(self) -> float:
        if self.points.size < 2:
            return 0.0
        zs = self.points
        return float(
            max(zs.real.max() - zs.real.min(), zs.imag.max() - zs.imag.min())
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        prov = " ".join(f"{k}={v}" for k, v in sorted(self.provenance.items()))
        buf.write(f"# total={self.total!r} {prov}\n")
        buf.write("re,im,weight\n")
        for p, w in zip(self.points, self.weights):
            buf.write(f"{p.real:.17g},{p.imag:.17g},{w:.17g}\n")
        if self.infinity_weight > 0:
            buf.write(f"inf,inf,{self.infinity_weight:.17g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AtomicMeasure":
        pts, ws = [], []
        inf_w = 0.0
        for line in text.splitlines():
            if not line or line.startswith("#") or line.startswith("re,"):
                continue
            re_s, im_s, w_s = line.split(",")
            if re_s == "inf":
                inf_w = float(w_s)
                continue
            pts.append(complex(float(re_s), float(im_s)))
            ws.append(float(w_s))
        return cls(np.array(pts), np.array(ws), infinity_weight=inf_w)


@dataclass(frozen=True)
class DeltaEstimate:
    value: float
    method: str
    word_len: int
    uncertainty: float

    def __post_init__(self):
        if not (0.0 < self.value <= 2.0):
            raise ValueError(f"critical exponent {self.value} outside (0, 2]")


# ---------------------------------------------------------------------------
# Poincare series

def _displacement_levels(group, max_len: int, workers=None):
    """Per-level (displacements, multiplier) pairs for lengths 0..max_len.

    Oversized levels come back as fixed-seed uniform word samples with a
    multiplier restoring unbiased level totals; a custom word machine may
    supply `displacement_levels` directly (unit-test harnesses do).
    """
    if hasattr(group, "displacement_levels"):
        return [
            lv if isinstance(lv, tuple) else (lv, 1.0)
            for lv in group.displacement_levels(max_len)
        ]
    return [group.displacement_level(k, workers=workers)
            for k in range(max_len + 1)]


def poincare_partial(group, s: float, max_len: int, workers=None) -> float:
    """Sum of e^{-s d(o, gamma o)} over all reduced words of length <= max_len.

    Exact for levels within the enumeration budget; an unbiased seeded
    estimate beyond it.
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    total = 0.0
    for disp, mult in _displacement_levels(group, max_len, workers=workers):
        chunks = run_chunks(
            lambda lo, hi, d=disp: float(np.exp(-s * d[lo:hi]).sum()),
            disp.size, workers=workers,
        )
        total += mult * math.fsum(chunks)
    return total


def _log_level_sums(levels, s: float) -> np.ndarray:
    out = np.empty(len(levels))
    for k, (disp, mult) in enumerate(levels):
        m = -s * float(disp.min())
        out[k] = m + math.log(float(np.exp(-s * disp - m).sum())) + math.log(mult)
    return out


def estimate_delta_series(group, max_len: int, tol: float = 1e-3,
                          workers=None) -> DeltaEstimate:
    """Bisection on s of the per-level growth ratio of the Poincare series.

    The estimate is the s where the geometric mean of the last four level
    ratios crosses one; the uncertainty combines the final bracket width
    with the scatter of those ratios converted to s-units.
    """
    if max_len < 8:
        raise ValueError("series estimator needs max_len >= 8")
    levels = _displacement_levels(group, max_len, workers=workers)
    means = np.array([float(d.mean()) for d, _ in levels])
    gaps = means[max_len - 3: max_len + 1] - means[max_len - 4: max_len]
    mean_gap = float(gaps.mean())

    def log_gm(s):
        ls = _log_level_sums(levels[max_len - 4:], s)
        return float(np.diff(ls).mean())

    lo, hi = tol, 2.0
    f_lo, f_hi = log_gm(lo), log_gm(hi)
    if f_lo < 0 or f_hi > 0:
        raise NonBracketed(
            f"growth ratio does not cross 1 on ({lo}, {hi}]: "
            f"f({lo})={f_lo:.3g}, f(2)={f_hi:.3g}"
        )
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if log_gm(mid) > 0:
            lo = mid
        else:
            hi = mid
    value = 0.5 * (lo + hi)
    ratios = np.diff(_log_level_sums(levels[max_len - 4:], value))
    drift = float(ratios.max() - ratios.min()) / (2.0 * mean_gap)
    return DeltaEstimate(
        value=min(value, 2.0),
        method="series-bisection",
        word_len=max_len,
        uncertainty=0.5 * (hi - lo) + drift,
    )


def estimate_delta_orbit(group, max_len: int, workers=None) -> DeltaEstimate:
    """Least-squares slope of log #{gamma : d(o, gamma o) <= R} versus R.

    The fit runs on the largest R-range where counting is complete: below
    the minimal displacement at the deepest enumerated level, longer words
    cannot yet be missing.
    """
    if max_len < 6:
        raise ValueError("orbit estimator needs max_len >= 6")
    levels = _displacement_levels(group, max_len, workers=workers)
    disp = np.concatenate([d for d, _ in levels[1:]])
    wts = np.concatenate([np.full(d.size, m) for d, m in levels[1:]])
    order = np.argsort(disp)
    disp, wts = disp[order], np.cumsum(wts[order])
    r_hi = float(levels[max_len][0].min())
    r_lo = float(np.median(levels[2][0]))
    if r_hi <= r_lo:
        r_lo = 0.5 * r_hi
    grid = np.linspace(r_lo, r_hi, 24)
    idx = np.searchsorted(disp, grid, side="right")
    counts = np.where(idx > 0, wts[np.maximum(idx, 1) - 1], 0.0)
    mask = counts >= 8
    grid, counts = grid[mask], counts[mask]
    if grid.size < 4:
        raise NonBracketed("orbit-growth fit range degenerate")
    slope, _ = np.polyfit(grid, np.log(counts), 1)
    half = grid.size // 2
    slope_half, _ = np.polyfit(grid[half:], np.log(counts[half:]), 1)
    resid = np.log(counts) - np.polyval(np.polyfit(grid, np.log(counts), 1), grid)
    se = float(np.sqrt((resid ** 2).mean() / ((grid - grid.mean()) ** 2).sum()))
    unc = max(2.0 * se, abs(float(slope_half) - float(slope)))
    return DeltaEstimate(
        value=float(np.clip(slope, 1e-6, 2.0)),
        method="orbit-growth",
        word_len=max_len,
        uncertainty=unc,
    )


def delta_hat(group, max_len: int = 10, workers=None) -> DeltaEstimate:
    """Cached series estimate used as the group's working exponent."""
    cache = getattr(group, "_delta_cache", None)
    if cache is None:
        cache = {}
        group._delta_cache = cache
    if max_len not in cache:
        cache[max_len] = estimate_delta_series(group, max_len, workers=workers)
    return cache[max_len]


# ---------------------------------------------------------------------------
# Patterson-Sullivan atoms

def _sample_level_words(group, k: int, count: int, rng):
    """Uniform reduced words of length k: letter arrays drawn position-wise."""
    r2 = 2 * group.rank
    letters = np.empty((count, k), dtype=np.int64)
    letters[:, 0] = rng.integers(0, r2, size=count)
    for j in range(1, k):
        step = rng.integers(0, r2 - 1, size=count)
        prev_inv = (letters[:, j - 1] + group.rank) % r2
        letters[:, j] = step + (step >= prev_inv)
    mats = group.letters[letters[:, 0]].copy()
    prefix = mats.copy() if k > 1 else None
    for j in range(1, k):
        if j == k - 1:
            prefix = mats.copy()
        mats = mats @ group.letters[letters[:, j]]
    tgt = (letters[:, -1] + group.rank) % r2
    if k == 1:
        centers = np.array([group.disks[i].center for i in tgt])
        radii = np.array([group.disks[i].radius for i in tgt])
    else:
        centers = np.empty(count, dtype=complex)
        radii = np.empty(count)
        for i in range(r2):
            sel = tgt == i
            if not sel.any():
                continue
            d = group.disks[i]
            centers[sel], radii[sel] = sk._disk_image_arr(
                prefix[sel], d.center, d.radius
            )
    return mats, centers, radii


def _band_levels(group, max_len: int, rng_seed, atom_budget: int,
                 workers=None):
    """(mats, centers, radii, multiplier) per top-band level; multiplier
    rescales sampled levels to full-level totals (unbiased)."""
    rng = np.random.default_rng(rng_seed)
    per_level = max(atom_budget // (_TOP_BAND + 1), 1)
    out = []
    for k in range(max_len - _TOP_BAND, max_len + 1):
        n_k = group.level_count(k)
        if n_k <= per_level:
            lv = group.level(k, workers=workers)
            out.append((lv["mats"], lv["disk_center"], lv["disk_radius"], 1.0))
        else:
            mats, centers, radii = _sample_level_words(group, k, per_level, rng)
            out.append((mats, centers, radii, n_k / per_level))
    return out


def build_ps(group, x: hp.H3Point, s: float, max_len: int, rng_seed,
             atom_budget: int = 60000, workers=None) -> AtomicMeasure:
    """Atomic approximation of the conformal density seen from x.

    Raises SubcriticalExponent when s is at or below the cached series
    estimate of the critical exponent (the truncation is then meaningless).
    """
    if max_len < 8:
        raise ValueError("build_ps needs max_len >= 8")
    dhat = delta_hat(group, min(max_len, 10), workers=workers).value
    if s <= dhat:
        raise SubcriticalExponent(
            f"s={s} <= delta_hat={dhat:.4f}: Poincare series diverges"
        )
    norm = poincare_partial(group, s, min(max_len, 10), workers=workers)
    pts, ws, res = [], [], 0.0
    for mats, centers, radii, mult in _band_levels(
            group, max_len, rng_seed, atom_budget, workers=workers):
        oz, ot = hp.apply_h3_arr(mats)
        d_x = hp.hyp_dist_arr(oz, ot, x.z, x.t)
        pts.append(centers)
        ws.append(np.exp(-s * d_x) * (mult / norm))
        res = max(res, float(radii.max()))
    measure = AtomicMeasure(
        np.concatenate(pts), np.concatenate(ws),
        provenance={
            "group": group.config_hash(), "s": round(s, 12),
            "max_len": max_len, "seed": rng_seed,
        },
        resolution=res,
    )
    return measure.normalized()


@dataclass(frozen=True)
class ResidualSummary:
    median: float
    p90: float
    count: int
    residuals: np.ndarray = field(repr=False, default=None)


def conformal_residual(group, x: hp.H3Point, y: hp.H3Point, s: float,
                       max_len: int, rng_seed=0, atom_budget: int = 20000,
                       workers=None) -> ResidualSummary:
    """Per-atom defect of the conformal cocycle.

    For each deep word gamma with projection xi: the orbital difference
    d(y, gamma o) - d(x, gamma o) has to approach the Busemann cocycle
    beta_xi(y, x); the summary reports the median and 90th percentile of
    the absolute defects over top-band atoms.
    """
    resids = []
    for mats, centers, _radii, _mult in _band_levels(
            group, max_len, rng_seed, atom_budget, workers=workers):
        oz, ot = hp.apply_h3_arr(mats)
        d_x = hp.hyp_dist_arr(oz, ot, x.z, x.t)
        d_y = hp.hyp_dist_arr(oz, ot, y.z, y.t)
        bus = hp.busemann_arr(centers, x.z, x.t, base_z=y.z, base_t=y.t)
        resids.append(np.abs((d_y - d_x) - bus))
    r = np.concatenate(resids)
    return ResidualSummary(
        median=float(np.median(r)),
        p90=float(np.quantile(r, 0.9)),
        count=r.size,
        residuals=r,
    )


@dataclass(frozen=True)
class ShadowFit:
    slope: float
    per_xi: np.ndarray
    spread: float
    radii: np.ndarray
    shrunk: bool


def shadow_exponent(nu: AtomicMeasure, xi_samples, radii=None,
                    n_radii: int = 12) -> ShadowFit:
    """Regression slope of log nu(B(xi, r)) against log r over xi in the
    limit set; the grid is clipped to [10 x atom resolution, diameter/10].
    """
    if len(nu) < 10_000:
        raise ValueError("shadow fit wants >= 1e4 atoms")
    xi_samples = np.asarray(xi_samples, dtype=complex)
    diam = nu.diameter()
    r_min = max(10.0 * nu.resolution, 1e-12)
    r_max = diam / 10.0
    if radii is None:
        radii = np.geomspace(r_min, r_max, n_radii)
    radii = np.asarray(radii, dtype=float)
    slopes = []
    shrunk = False
    for xi in xi_samples:
        mass = nu.ball_mass(xi, radii)
        ok = mass > 0
        if not ok.all():
            shrunk = True
        if ok.sum() < 3:
            raise EmptyBall(f"balls around {xi} are empty at this grid")
        sl, _ = np.polyfit(np.log(radii[ok]), np.log(mass[ok]), 1)
        slopes.append(float(sl))
    slopes = np.array(slopes)
    mean = float(slopes.mean())
    return ShadowFit(
        slope=mean,
        per_xi=slopes,
        spread=float(slopes.std() / abs(mean)) if mean else float("inf"),
        radii=radii,
        shrunk=shrunk,
    )


def nonfocusing_fraction(nu: AtomicMeasure, xi: complex, d: int,
                         r: float) -> float:
    """Mass fraction of the cone |Im| <= |Re|/d inside B(xi, r), in
    boundary coordinates centered at xi."""
    if d < 1:
        raise ValueError("cone parameter d must be >= 1")
    rel = nu.points - xi
    ball = np.abs(rel) < r
    total = nu.weights[ball].sum()
    if total == 0:
        raise EmptyBall(f"no atoms in B({xi}, {r})")
    cone = ball & (np.abs(rel.imag) <= np.abs(rel.real) / d)
    return float(nu.weights[cone].sum() / total)

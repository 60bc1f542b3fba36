"""Exact geometry of hyperbolic 3-space in the upper half-space model.

Conventions (fixed here once, regression-tested in tests/test_hyperbolic.py):

* Points of H^3 are pairs (z, t) with z complex ("horizontal") and t > 0
  ("height"); the boundary is C together with a tagged point at infinity.
* The base point is o = (0, 1); its stabilizer is K = PSU(2).
* a_s = diag(e^{s/2}, e^{-s/2}) translates the vertical axis upward:
  a_s . o = (0, e^s).  m_theta = diag(e^{i theta}, e^{-i theta}) rotates
  about that axis and fixes both 0 and infinity.
* n_z = [[1, 0], [z, 1]] (lower triangular) fixes 0; its transpose
  n^-_w = [[1, w], [0, 1]] fixes infinity.  u_t = n_t for real t.
* The reference frame at the identity points up the vertical axis, so the
  frame endpoints of g are g^+ = g(infinity) and g^- = g(0).  Consequently
  (g a_s)^+ = g^+ for all s, gN shares the backward endpoint g^-, and
  conjugation satisfies n_z a_s = a_s n_{z e^s}.
* Where a metric on G itself is needed (box membership), we use the four
  factor coordinates of the n^-_w a_s n_z m_theta chart with |w|, |s|, |z|
  measured separately; on G/K this collapses to the hyperbolic distance.

All values are IEEE doubles; elements of PSL_2(C) carry a determinant-one
matrix with a canonical global sign (first entry of modulus > 1e-8 gets a
nonnegative real part, ties broken toward nonnegative imaginary part).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BoxChartError, NonConvergence

_SIGN_TOL = 1e-8
_DET_TOL = 1e-12


def _canonical_sign(mat: np.ndarray) -> np.ndarray:
    for entry in mat.reshape(4):
        if abs(entry) > _SIGN_TOL:
            if entry.real < -_SIGN_TOL * abs(entry):
                return -mat
            if abs(entry.real) <= _SIGN_TOL * abs(entry) and entry.imag < 0:
                return -mat
            return mat
    return mat


class MobiusElement:
    """An element of PSL_2(C): a 2x2 complex matrix up to global sign."""

    __slots__ = ("mat",)

    def __init__(self, a, b, c, d):
        m = np.array([[a, b], [c, d]], dtype=complex)
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        if det == 0:
            raise ValueError("singular matrix is not a Mobius element")
        m = m / np.sqrt(det)
        m = _canonical_sign(m)
        m.flags.writeable = False
        object.__setattr__(self, "mat", m)

    def __setattr__(self, name, value):
        raise AttributeError("MobiusElement is immutable")

    @classmethod
    def from_matrix(cls, m) -> "MobiusElement":
        m = np.asarray(m, dtype=complex)
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1])

    @property
    def a(self) -> complex:
        return self.mat[0, 0]

    @property
    def b(self) -> complex:
        return self.mat[0, 1]

    @property
    def c(self) -> complex:
        return self.mat[1, 0]

    @property
    def d(self) -> complex:
        return self.mat[1, 1]

    def det(self) -> complex:
        return self.a * self.d - self.b * self.c

    def inverse(self) -> "MobiusElement":
        return MobiusElement(self.d, -self.b, -self.c, self.a)

    def almost_equal(self, other: "MobiusElement", tol: float = 1e-9) -> bool:
        diff_p = np.max(np.abs(self.mat - other.mat))
        diff_m = np.max(np.abs(self.mat + other.mat))
        return min(diff_p, diff_m) <= tol

    def __eq__(self, other) -> bool:
        if not isinstance(other, MobiusElement):
            return NotImplemented
        return self.almost_equal(other)

    def __hash__(self):
        raise TypeError("MobiusElement equality is tolerance-based; not hashable")

    def __matmul__(self, other: "MobiusElement") -> "MobiusElement":
        return compose(self, other)

    def __repr__(self):
        return (
            f"MobiusElement(a={self.a!r}, b={self.b!r}, "
            f"c={self.c!r}, d={self.d!r})"
        )


@dataclass(frozen=True)
class H3Point:
    """Upper half-space point (z, t) with t > 0."""

    z: complex
    t: float

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"height must be positive, got {self.t}")


@dataclass(frozen=True)
class BoundaryPoint:
    """A point of C union {infinity}; infinity carries an exact tag."""

    value: complex = 0j
    infinite: bool = False

    @classmethod
    def infinity(cls) -> "BoundaryPoint":
        return cls(0j, True)

    @property
    def is_infinity(self) -> bool:
        return self.infinite

    def finite_value(self) -> complex:
        if self.infinite:
            raise ValueError("boundary point at infinity has no finite value")
        return self.value

    def close_to(self, other: "BoundaryPoint", tol: float = 1e-10) -> bool:
        if self.infinite or other.infinite:
            return self.infinite and other.infinite
        return abs(self.value - other.value) <= tol


@dataclass(frozen=True)
class IwasawaTriple:
    """KAN factors: g = k . a_s . n_z with k in PSU(2)."""

    k: MobiusElement
    s: float
    z: complex


ORIGIN = H3Point(0j, 1.0)
INFINITY = BoundaryPoint.infinity()


def identity() -> MobiusElement:
    return MobiusElement(1, 0, 0, 1)


def a_s(s: float) -> MobiusElement:
    e = math.exp(s / 2.0)
    return MobiusElement(e, 0, 0, 1.0 / e)


def n_z(z: complex) -> MobiusElement:
    return MobiusElement(1, 0, z, 1)


def n_minus(w: complex) -> MobiusElement:
    return MobiusElement(1, w, 0, 1)


def m_theta(theta: float) -> MobiusElement:
    e = complex(math.cos(theta), math.sin(theta))
    return MobiusElement(e, 0, 0, 1.0 / e)


def u_t(t: float) -> MobiusElement:
    return n_z(complex(t))


def compose(g: MobiusElement, h: MobiusElement) -> MobiusElement:
    m = g.mat @ h.mat
    return MobiusElement(m[0, 0], m[0, 1], m[1, 0], m[1, 1])


def apply_h3(g: MobiusElement, p: H3Point) -> H3Point:
    """Isometric action on H^3 via quaternions: w -> (aw+b)(cw+d)^{-1}."""
    z, t = _apply_h3_arr(g.mat, np.asarray(p.z, dtype=complex), np.asarray(p.t))
    return H3Point(complex(z), float(t))


def apply_boundary(g: MobiusElement, xi: BoundaryPoint) -> BoundaryPoint:
    """Mobius action on C union {infinity} with exact pole handling."""
    a, b, c, d = g.a, g.b, g.c, g.d
    if xi.is_infinity:
        if c == 0:
            return INFINITY
        return BoundaryPoint(a / c)
    denom = c * xi.value + d
    if denom == 0:
        return INFINITY
    return BoundaryPoint((a * xi.value + b) / denom)


def hyp_dist(p: H3Point, q: H3Point) -> float:
    """Hyperbolic distance; uses the arsinh form for stability near zero."""
    return float(
        _hyp_dist_arr(
            np.asarray(p.z, dtype=complex),
            np.asarray(p.t, dtype=float),
            np.asarray(q.z, dtype=complex),
            np.asarray(q.t, dtype=float),
        )
    )


_BUSEMANN_TOL = 1e-10
_BUSEMANN_STEPS = tuple(float(s) for s in range(6, 64, 6))


def busemann(xi: BoundaryPoint, x: H3Point, y: H3Point) -> float:
    """Busemann cocycle beta_xi(x, y) = lim d(x, xi_s) - d(y, xi_s).

    The probe xi_s walks along the vertical geodesic ray toward xi (upward
    for xi = infinity, straight down onto xi otherwise); the difference
    stabilizes exponentially fast in s and we stop once two successive
    probes agree to 1e-10.
    """
    prev = None
    for s in _BUSEMANN_STEPS:
        if xi.is_infinity:
            probe = H3Point(0j, math.exp(s))
        else:
            probe = H3Point(xi.value, math.exp(-s))
        val = hyp_dist(x, probe) - hyp_dist(y, probe)
        if prev is not None and abs(val - prev) < _BUSEMANN_TOL:
            return val
        prev = val
    raise NonConvergence(
        f"busemann probe did not stabilize toward {xi}; malformed ray"
    )


def iwasawa(g: MobiusElement) -> IwasawaTriple:
    """KAN factors of g; total on PSL_2(C)."""
    b, d = g.b, g.d
    nrm = abs(b) ** 2 + abs(d) ** 2
    s = -math.log(nrm)
    z = (np.conj(b) * g.a + np.conj(d) * g.c) / nrm
    k = compose(compose(g, n_z(-z)), a_s(-s))
    return IwasawaTriple(k=k, s=s, z=complex(z))


def recompose_iwasawa(tri: IwasawaTriple) -> MobiusElement:
    return compose(compose(tri.k, a_s(tri.s)), n_z(tri.z))


def decompose_box(g: MobiusElement):
    """Coordinates (w, s, z, theta) with g = n^-_w a_s n_z m_theta.

    The product map inverts in closed form whenever the lower-right entry
    is nonzero: d = e^{-s/2} e^{-i theta}, w = b/d, z = c/conj(d).  Raises
    BoxChartError outside the chart; theta is folded into (-pi/2, pi/2]
    to absorb the projective sign.
    """
    d = g.d
    if abs(d) < 1e-12:
        raise BoxChartError("vanishing (2,2) entry: outside the N-ANM chart")
    s = -2.0 * math.log(abs(d))
    theta = -math.atan2(d.imag, d.real)
    w = g.b / d
    z = g.c / np.conj(d)
    if theta <= -math.pi / 2.0:
        theta += math.pi
    elif theta > math.pi / 2.0:
        theta -= math.pi
    return complex(w), float(s), complex(z), float(theta)


def recompose_box(w: complex, s: float, z: complex, theta: float) -> MobiusElement:
    return compose(compose(compose(n_minus(w), a_s(s)), n_z(z)), m_theta(theta))


def frame_endpoints(g: MobiusElement):
    """Forward/backward endpoints (g(infinity), g(0)) of the frame g."""
    return apply_boundary(g, INFINITY), apply_boundary(g, BoundaryPoint(0j))


# ---------------------------------------------------------------------------
# Vectorized kernels.  Matrices are stacked as (..., 2, 2) complex arrays;
# points as parallel (z, t) arrays.  These back the flows, samplers and
# quadratures, and the scalar wrappers above.

def mats_from_elements(elements) -> np.ndarray:
    return np.stack([g.mat for g in elements])


def compose_arr(gs: np.ndarray, hs: np.ndarray) -> np.ndarray:
    return gs @ hs


def _apply_h3_arr(mat: np.ndarray, z: np.ndarray, t: np.ndarray):
    a = mat[..., 0, 0]
    b = mat[..., 0, 1]
    c = mat[..., 1, 0]
    d = mat[..., 1, 1]
    num = c * z + d
    denom = np.abs(num) ** 2 + (np.abs(c) * t) ** 2
    z_new = ((a * z + b) * np.conj(num) + a * np.conj(c) * t * t) / denom
    t_new = t / denom
    return z_new, t_new


def apply_h3_arr(mats: np.ndarray, z=0j, t=1.0):
    """Apply a stack of matrices to one point (default o), or pointwise."""
    z = np.asarray(z, dtype=complex)
    t = np.asarray(t, dtype=float)
    return _apply_h3_arr(mats, z, t)


def _hyp_dist_arr(z1, t1, z2, t2):
    q = (np.abs(z1 - z2) ** 2 + (t1 - t2) ** 2) / (4.0 * t1 * t2)
    return 2.0 * np.arcsinh(np.sqrt(q))


def hyp_dist_arr(z1, t1, z2, t2) -> np.ndarray:
    return _hyp_dist_arr(
        np.asarray(z1, dtype=complex),
        np.asarray(t1, dtype=float),
        np.asarray(z2, dtype=complex),
        np.asarray(t2, dtype=float),
    )


def busemann_arr(xi: np.ndarray, z: np.ndarray, t: np.ndarray,
                 base_z=0j, base_t=1.0, s_probe: float = 42.0):
    """beta_xi(base, (z, t)) for finite xi arrays, via one deep probe.

    A single probe at height e^{-s_probe} below each xi is already past the
    1e-10 stabilization plateau for the bounded configurations used here;
    the default base point is o.
    """
    xi = np.asarray(xi, dtype=complex)
    z = np.asarray(z, dtype=complex)
    t = np.asarray(t, dtype=float)
    tp = math.exp(-s_probe)
    d_o = _hyp_dist_arr(np.asarray(base_z, dtype=complex),
                        np.asarray(base_t, dtype=float), xi, tp)
    d_p = _hyp_dist_arr(z, t, xi, tp)
    return d_o - d_p


def box_coords_arr(mats: np.ndarray):
    """Vectorized decompose_box; returns (w, s, z, theta, valid)."""
    d = mats[..., 1, 1]
    absd = np.abs(d)
    valid = absd > 1e-12
    safe = np.where(valid, d, 1.0)
    s = -2.0 * np.log(np.where(valid, absd, 1.0))
    theta = -np.arctan2(safe.imag, safe.real)
    theta = np.where(theta <= -math.pi / 2.0, theta + math.pi, theta)
    theta = np.where(theta > math.pi / 2.0, theta - math.pi, theta)
    w = mats[..., 0, 1] / safe
    z = mats[..., 1, 0] / np.conj(safe)
    return w, s, z, theta, valid


def apply_boundary_arr(mat: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Pointwise Mobius action on finite boundary arrays (poles -> inf)."""
    a = mat[..., 0, 0]
    b = mat[..., 0, 1]
    c = mat[..., 1, 0]
    d = mat[..., 1, 1]
    denom = c * xi + d
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (a * xi + b) / denom
    return np.where(denom == 0, np.inf + 0j, out)

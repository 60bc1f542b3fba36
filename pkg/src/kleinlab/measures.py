"""BMS and BR measures, leafwise densities, the base eigenfunction and
seeded importance samplers on the frame bundle X = Gamma \\ G.

Normalization conventions (fixed here, cross-checked in tests):

* The canonical BR measure is the KAN form
      m_BR(psi) = int psi(k a_s n_z) e^{-delta s} dnu(k) ds dz
  with plain Lebesgue ds dz and the atomic boundary measure nu.  In Hopf
  coordinates this corresponds to the forward-endpoint base measure
  dm_o(xi) = (1+|xi|^2)^{-2} dLeb(xi), and the matching leafwise Lebesgue
  density on xN in the leaf coordinate zeta is the constant
  leaf_leb_density(x) per unit Lebesgue area.
* The BMS measure uses the Hopf form e^{delta beta+} e^{delta beta-}
  dnu dnu dt with the same atomic nu; its total mass is NOT normalized to
  one.  bms_total_mass estimates the normalizer Z empirically; ratio
  statements that assume unit BMS mass are rescaled by Z at the point of
  use and Z is reported alongside.
* A box around a frame x0 is x0 N-_rho A_rho N_rho M with the factor
  coordinates of decompose_box measured separately against rho.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hyperbolic as hp
from . import schottky as sk
from .errors import ZeroAcceptance
from .parallel import run_chunks
from .patterson import AtomicMeasure

_LOG_EPS = 1e-300


# ---------------------------------------------------------------------------
# frames

class FramePoint:
    """A point of X: canonical reduced representative plus cached
    endpoints and Hopf time coordinate."""

    __slots__ = ("group", "rep", "plus", "minus", "hopf_time")

    def __init__(self, group, rep: hp.MobiusElement):
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "rep", rep)
        gp, gm = hp.frame_endpoints(rep)
        object.__setattr__(self, "plus", gp)
        object.__setattr__(self, "minus", gm)
        z, t = hp.apply_h3_arr(rep.mat)
        if gm.is_infinity:
            tm = float(np.log(t))
        else:
            tm = float(busemann_kernel(gm.value, z, t))
        object.__setattr__(self, "hopf_time", tm)

    def __setattr__(self, name, value):
        raise AttributeError("FramePoint is immutable")

    @classmethod
    def from_matrix(cls, group, mat) -> "FramePoint":
        red = sk.reduce_mat(group, np.asarray(mat, dtype=complex))
        return cls(group, hp.MobiusElement.from_matrix(red))

    @classmethod
    def from_endpoints(cls, group, xi_plus: complex, xi_minus: complex,
                       t: float = 0.0, theta: float = 0.0) -> "FramePoint":
        mat = hopf_frame_mats(np.asarray([xi_plus]), np.asarray([xi_minus]),
                              np.asarray([t]), np.asarray([theta]))[0]
        return cls.from_matrix(group, mat)

    def base_point(self) -> hp.H3Point:
        z, t = hp.apply_h3_arr(self.rep.mat)
        return hp.H3Point(complex(z), float(t))

    def __eq__(self, other):
        if not isinstance(other, FramePoint):
            return NotImplemented
        return self.rep == other.rep

    def __repr__(self):
        return f"FramePoint(rep={self.rep!r})"


@dataclass(frozen=True)
class WeightedSample:
    frame: FramePoint
    weight: float

    def __post_init__(self):
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise ValueError(f"weight must be positive finite: {self.weight}")


def _apply_mat_entries(a, b, c, d):
    """Base point (z, t) of frames given by bare matrix entries at o."""
    denom = np.abs(d) ** 2 + np.abs(c) ** 2
    z = (b * np.conj(d) + a * np.conj(c)) / denom
    return z, 1.0 / denom


def busemann_kernel(xi, z, t):
    """beta_xi(o, (z,t)) for finite xi: log of the Poisson kernel.

    Identical to the probe-limit busemann (regression-tested); used in
    vectorized inner loops.
    """
    xi = np.asarray(xi, dtype=complex)
    z = np.asarray(z, dtype=complex)
    t = np.asarray(t, dtype=float)
    return np.log((1.0 + np.abs(xi) ** 2) * t
                  / (np.abs(z - xi) ** 2 + t * t))


def hopf_frame_mats(xi_plus, xi_minus, t, theta):
    """Frames with prescribed endpoints: h a_t m_theta, h(inf)=xi+, h(0)=xi-."""
    xp = np.asarray(xi_plus, dtype=complex)
    xm = np.asarray(xi_minus, dtype=complex)
    t = np.asarray(t, dtype=float)
    theta = np.asarray(theta, dtype=float)
    det = xp - xm
    root = np.sqrt(det.astype(complex))
    e = np.exp(t / 2.0)
    ang = np.exp(1j * theta)
    mats = np.empty(np.broadcast(xp, xm, t, theta).shape + (2, 2), dtype=complex)
    mats[..., 0, 0] = xp * e * ang / root
    mats[..., 0, 1] = xm / (e * ang * root)
    mats[..., 1, 0] = e * ang / root
    mats[..., 1, 1] = 1.0 / (e * ang * root)
    return mats


def kan_frame_mats(xi, theta, s, z):
    """Frames k_xi m_theta a_s n_z with k_xi in PSU(2), k_xi(0) = xi."""
    xi = np.asarray(xi, dtype=complex)
    theta = np.asarray(theta, dtype=float)
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=complex)
    nrm = np.sqrt(1.0 + np.abs(xi) ** 2)
    shape = np.broadcast(xi, theta, s, z).shape
    k = np.empty(shape + (2, 2), dtype=complex)
    k[..., 0, 0] = 1.0 / nrm
    k[..., 0, 1] = xi / nrm
    k[..., 1, 0] = -np.conj(xi) / nrm
    k[..., 1, 1] = 1.0 / nrm
    ang = np.exp(1j * theta)
    e = np.exp(s / 2.0)
    asn = np.empty(shape + (2, 2), dtype=complex)
    asn[..., 0, 0] = ang * e
    asn[..., 0, 1] = np.zeros_like(ang * e)
    asn[..., 1, 0] = z / (ang * e)
    asn[..., 1, 1] = 1.0 / (ang * e)
    return k @ asn


# ---------------------------------------------------------------------------
# pointwise densities

def bms_density(u: FramePoint, delta: float) -> float:
    """Hopf-coordinate BMS density factor e^{delta(beta+ + beta-)} at u."""
    p = u.base_point()
    bp = hp.busemann(u.plus, hp.ORIGIN, p)
    bm = hp.busemann(u.minus, hp.ORIGIN, p)
    return float(np.exp(delta * (bp + bm)))


def br_density_kan(k, s: float, z, delta: float) -> float:
    """KAN-coordinate BR density factor e^{-delta s} (base measure
    dnu(k) ds dz lives in the samplers)."""
    return float(np.exp(-delta * s))


def phi0(nu: AtomicMeasure, delta: float, p: hp.H3Point) -> float:
    """Base eigenfunction: the Poisson kernel integrated against nu."""
    return float(phi0_arr(nu, delta, np.asarray(p.z), np.asarray(p.t)))


def phi0_arr(nu: AtomicMeasure, delta: float, z, t):
    z = np.asarray(z, dtype=complex)
    t = np.asarray(t, dtype=float)
    ker = busemann_kernel(nu.points, z[..., None], t[..., None])
    return np.exp(delta * ker) @ nu.weights


def laplacian_residual(nu: AtomicMeasure, delta: float, p: hp.H3Point,
                       h: float = 1e-3) -> float:
    """Relative defect of -Lap phi0 = delta(2-delta) phi0 at p.

    The coordinate Laplacian t^2(dxx+dyy+dtt) - t dt is evaluated with
    central differences of height-scaled step h*t.
    """
    if not (1e-4 <= h <= 1e-2):
        raise ValueError("step h outside [1e-4, 1e-2]")
    z, t = p.z, p.t
    step = h * t
    zs = np.array([z, z + step, z - step, z + 1j * step, z - 1j * step,
                   z, z], dtype=complex)
    ts = np.array([t, t, t, t, t, t + step, t - step], dtype=float)
    v = phi0_arr(nu, delta, zs, ts)
    lap = (t * t) * (v[1] + v[2] + v[3] + v[4] + v[5] + v[6] - 6.0 * v[0]) \
        / (step * step) - t * (v[5] - v[6]) / (2.0 * step)
    target = delta * (2.0 - delta) * v[0]
    return float(abs(-lap - target) / v[0])


# ---------------------------------------------------------------------------
# leafwise measures on xN

def zeta_chart(x_mat: np.ndarray, xi):
    """Leaf coordinate of boundary point xi on xN: (x n_zeta)^+ = xi."""
    inv = np.linalg.inv(x_mat)
    pre = hp.apply_boundary_arr(inv, np.asarray(xi, dtype=complex))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pre == 0, np.inf + 0j, 1.0 / pre)


def leaf_points(x_mat: np.ndarray, zeta):
    """Matrices, forward endpoints and base points of x n_zeta."""
    zeta = np.asarray(zeta, dtype=complex)
    a, b = x_mat[0, 0], x_mat[0, 1]
    c, d = x_mat[1, 0], x_mat[1, 1]
    mats = np.empty(zeta.shape + (2, 2), dtype=complex)
    mats[..., 0, 0] = a + b * zeta
    mats[..., 0, 1] = np.broadcast_to(b, zeta.shape)
    mats[..., 1, 0] = c + d * zeta
    mats[..., 1, 1] = np.broadcast_to(d, zeta.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = mats[..., 0, 0] / mats[..., 1, 0]
    z, t = hp.apply_h3_arr(mats)
    return mats, xi, z, t


def leaf_ps_weight(x_mat: np.ndarray, zeta):
    """PS leaf factor e^{delta beta_{v+}(o, pi(vM))} without the delta
    power: returns beta+, callers exponentiate with their delta."""
    _, xi, z, t = leaf_points(x_mat, zeta)
    return busemann_kernel(xi, z, t)


def leaf_leb_weight(x_mat: np.ndarray, zeta):
    """Bare expanding-leaf factor e^{2 beta_{v+}(o, pi(vM))}."""
    return np.exp(2.0 * leaf_ps_weight(x_mat, zeta))


def leaf_leb_density(x_mat: np.ndarray, zeta=0.17 + 0.11j) -> float:
    """Density of the leafwise Lebesgue measure on xN with respect to
    dLeb(zeta): e^{2 beta+} carried to the boundary chart against
    dm_o = (1+|xi|^2)^{-2} dLeb.  Constant along the leaf (N-invariance);
    evaluated at one generic zeta.
    """
    mats, xi, z, t = leaf_points(x_mat, np.asarray(zeta))
    jac = np.abs(mats[..., 1, 0]) ** 4          # |dxi/dzeta| = |c + d zeta|^-2
    val = np.exp(2.0 * busemann_kernel(xi, z, t)) / (1.0 + np.abs(xi) ** 2) ** 2
    return float(val / jac)


# ---------------------------------------------------------------------------
# boxes

class BoxSpec:
    """A box x0 N-_rho A_rho N_rho M around a frame with both endpoints
    in the limit set, together with its cached quadrature data."""

    def __init__(self, center: FramePoint, rho: float, nu: AtomicMeasure,
                 delta: float, word_len_check: int = 6,
                 limit_check_points: int = 4000):
        group = center.group
        if rho <= 0:
            raise ValueError("rho must be positive")
        self.group = group
        self.center = center
        self.rho = float(rho)
        self.nu = nu
        self.delta = float(delta)
        self._check_injectivity(word_len_check)
        self._check_endpoints(limit_check_points)
        self._shadow = None
        self._ranges = None
        self._br_mass = None
        self._bms_mass = None

    def _check_injectivity(self, max_word_len):
        z0, t0 = hp.apply_h3_arr(self.center.rep.mat)
        best = np.inf
        for k in range(1, max_word_len + 1):
            lv = self.group.level(k)
            zz, tt = hp.apply_h3_arr(lv["mats"], z0, t0)
            best = min(best, float(hp.hyp_dist_arr(zz, tt, z0, t0).min()))
        if best <= 2.0 * self.rho:
            raise ValueError(
                f"rho={self.rho} exceeds half the injectivity bound {best / 2:.4f}"
            )

    def _check_endpoints(self, _n_pts):
        tol = max(20.0 * self.nu.resolution, 1e-8)
        for bp in (self.center.plus, self.center.minus):
            if bp.is_infinity:
                raise ValueError("box center endpoints must be finite")
            if not sk.near_limit_set(self.group, bp.value, tol):
                raise ValueError(
                    f"center endpoint {bp.value} not within {tol} of the limit set"
                )

    # -- membership ------------------------------------------------------

    def contains(self, mats: np.ndarray, reduced: bool = False) -> np.ndarray:
        """True where the frames Gamma g lie in the box."""
        mats = np.asarray(mats, dtype=complex)
        if mats.ndim == 2:
            mats = mats[None]
        if not reduced:
            mats = sk.reduce_batch(self.group, mats)
        inv0 = np.linalg.inv(self.center.rep.mat)
        out = np.zeros(mats.shape[0], dtype=bool)
        candidates = [np.eye(2, dtype=complex)] + list(self.group.letters)
        for gam in candidates:
            rel = (inv0 @ gam) @ mats
            w, s, z, _th, valid = hp.box_coords_arr(rel)
            hit = (valid & (np.abs(w) < self.rho) & (np.abs(s) < self.rho)
                   & (np.abs(z) < self.rho))
            out |= hit
        return out

    # -- cached geometry ---------------------------------------------------

    def shadow_atoms(self):
        """Atoms of nu in the backward shadow, with their N^- coordinates."""
        if self._shadow is None:
            inv0 = np.linalg.inv(self.center.rep.mat)
            w = hp.apply_boundary_arr(inv0, self.nu.points)
            keep = np.abs(w) < self.rho
            self._shadow = (w[keep], self.nu.weights[keep])
        return self._shadow

    def kan_ranges(self, margin: float = 0.2):
        """KAN chart extent over the box: s interval and |z| annulus.

        Probed on a chart lattice at theta = 0; the M-fiber rotates z by
        e^{2i theta} about the origin, so the z-region is the annulus swept
        by the probed moduli.
        """
        if self._ranges is not None:
            return self._ranges
        n = 7
        ws = np.linspace(-self.rho, self.rho, n)
        wgrid = [complex(a, b) for a in ws for b in ws
                 if a * a + b * b <= self.rho ** 2]
        zl = np.linspace(-self.rho, self.rho, 5)
        zgrid = [complex(a, b) for a in zl for b in zl
                 if a * a + b * b <= self.rho ** 2]
        svals, zmod = [], []
        x0 = self.center.rep.mat
        for w in wgrid:
            y0 = x0 @ hp.n_minus(w).mat
            for sig in np.linspace(-self.rho, self.rho, n):
                y = y0 @ hp.a_s(float(sig)).mat
                for zt in zgrid:
                    g = y @ hp.n_z(zt).mat
                    b, d = g[0, 1], g[1, 1]
                    nrm = abs(b) ** 2 + abs(d) ** 2
                    svals.append(-math.log(nrm))
                    zmod.append(abs((np.conj(b) * g[0, 0]
                                     + np.conj(d) * g[1, 0]) / nrm))
        svals = np.array(svals)
        zmod = np.array(zmod)
        pad_s = margin * (svals.max() - svals.min() + 0.1)
        pad_z = margin * (zmod.max() - zmod.min() + 0.1)
        self._ranges = (
            (float(svals.min() - pad_s), float(svals.max() + pad_s)),
            (max(0.0, float(zmod.min() - pad_z)), float(zmod.max() + pad_z)),
        )
        return self._ranges

    def br_mass(self) -> float:
        """m_BR of the box: closed-form box-chart quadrature.

        In the chart x0 n-_w a_sig n_zeta m the KAN s-coordinate is
        sig - log(|Aw+B|^2 + |Cw+D|^2) and z integrates to the disk area,
        so the mass is pi rho^2 (2 sinh(delta rho)/delta) times the
        shadow-atom sum of (|Aw+B|^2 + |Cw+D|^2)^delta.
        """
        if self._br_mass is None:
            w, wt = self.shadow_atoms()
            if w.size == 0:
                self._br_mass = 0.0
            else:
                m = self.center.rep.mat
                q = (np.abs(m[0, 0] * w + m[0, 1]) ** 2
                     + np.abs(m[1, 0] * w + m[1, 1]) ** 2)
                d = self.delta
                sig_int = 2.0 * math.sinh(d * self.rho) / d
                self._br_mass = float(
                    math.pi * self.rho ** 2 * sig_int * (wt * q ** d).sum()
                )
        return self._br_mass

    def bms_mass_raw(self, n_sigma: int = 33, forward_budget: int = 6000,
                     seed=515) -> float:
        """Hopf-form BMS mass of the box (unnormalized nu x nu units).

        Transversal quadrature: backward shadow atoms x sigma grid, with
        the forward PS leaf mass summed over (subsampled) atoms whose leaf
        coordinate falls in the rho-disk.
        """
        if self._bms_mass is not None:
            return self._bms_mass
        w, wt = self.shadow_atoms()
        if w.size == 0:
            self._bms_mass = 0.0
            return 0.0
        d = self.delta
        x0 = self.center.rep.mat
        fw = self.nu.subsample(forward_budget, seed)
        xi_minus = hp.apply_boundary_arr(x0, w)
        # y(w) = x0 n-_w columns before the a_sigma scaling
        col1 = np.stack([np.full(w.size, x0[0, 0]), np.full(w.size, x0[1, 0])], -1)
        col2 = np.stack([x0[0, 0] * w + x0[0, 1], x0[1, 0] * w + x0[1, 1]], -1)
        sig = np.linspace(-self.rho, self.rho, n_sigma)
        dsig = sig[1] - sig[0]
        total = 0.0
        for s_ in sig:
            e = math.exp(float(s_) / 2.0)
            a = col1[:, 0] * e
            c = col1[:, 1] * e
            b = col2[:, 0] / e
            dd = col2[:, 1] / e
            zy, ty = _apply_mat_entries(a, b, c, dd)
            bm = busemann_kernel(xi_minus, zy, ty)
            # leaf coordinates of forward atoms on each y: (n_shadow, n_fw)
            pre = (dd[:, None] * fw.points[None, :] - b[:, None]) / (
                -c[:, None] * fw.points[None, :] + a[:, None])
            with np.errstate(divide="ignore", invalid="ignore"):
                zeta = 1.0 / pre
            am = a[:, None] + b[:, None] * zeta
            cm = c[:, None] + dd[:, None] * zeta
            zl, tl = _apply_mat_entries(am, np.broadcast_to(b[:, None], am.shape),
                                        cm, np.broadcast_to(dd[:, None], am.shape))
            bp = busemann_kernel(fw.points[None, :], zl, tl)
            inside = np.abs(zeta) < self.rho
            leaf = np.where(inside, np.exp(d * bp) * fw.weights[None, :], 0.0).sum(1)
            total += float((wt * np.exp(d * bm) * leaf).sum()) * dsig
        self._bms_mass = total
        return total


def bms_total_mass(group, nu: AtomicMeasure, delta: float,
                   pair_budget: int = 1200, t_lo: float = -16.0,
                   t_hi: float = 16.0, n_t: int = 96, seed=6021) -> float:
    """Empirical BMS normalizer Z = |m_BMS| in raw nu x nu units.

    Hopf quadrature over endpoint pairs (seeded atom subsamples, unbiased)
    and a time grid, restricted to the fundamental domain lift.
    """
    nu_a = nu.subsample(pair_budget, seed)
    nu_b = nu.subsample(pair_budget, seed + 1)
    ts = np.linspace(t_lo, t_hi, n_t)
    dt = ts[1] - ts[0]
    xp = np.repeat(nu_a.points, nu_b.points.size)
    wp = np.repeat(nu_a.weights, nu_b.points.size)
    xm = np.tile(nu_b.points, nu_a.points.size)
    wm = np.tile(nu_b.weights, nu_a.points.size)
    keep = np.abs(xp - xm) > max(nu.resolution, 1e-9)
    xp, wp, xm, wm = xp[keep], wp[keep], xm[keep], wm[keep]

    def piece(lo, hi):
        sub = 0.0
        for t in ts:
            mats = hopf_frame_mats(xp[lo:hi], xm[lo:hi], t, 0.0)
            z, h = hp.apply_h3_arr(mats)
            dom = sk.in_domain_zt(group, z, h)
            if not dom.any():
                continue
            bp = busemann_kernel(xp[lo:hi][dom], z[dom], h[dom])
            bm = busemann_kernel(xm[lo:hi][dom], z[dom], h[dom])
            sub += float((wp[lo:hi][dom] * wm[lo:hi][dom]
                          * np.exp(delta * (bp + bm))).sum()) * dt
        return sub

    parts = run_chunks(piece, xp.size, chunk=65536)
    return math.fsum(parts)


# ---------------------------------------------------------------------------
# samplers

def sample_br_box(box: BoxSpec, count: int, seed, workers=None):
    """Importance sampler for m_BR restricted to the box.

    Proposal: backward atom xi (by weight, restricted to the shadow),
    m_theta uniform, s uniform over the probed interval, z uniform over
    the probed annulus; weight e^{-delta s} x (shadow mass) x proposal
    volume / count.  Frames outside the box are rejected; weights of
    accepted samples estimate int_E psi dm_BR as sum w_i psi(frame_i).
    """
    w_sh, wt_sh = box.shadow_atoms()
    if w_sh.size == 0:
        raise ZeroAcceptance("no atoms in the box's backward shadow")
    xi_sh = hp.apply_boundary_arr(box.center.rep.mat, w_sh)
    (s_lo, s_hi), (zr_lo, zr_hi) = box.kan_ranges()
    rng = np.random.default_rng(seed)
    w_total = wt_sh.sum()
    idx = rng.choice(w_sh.size, size=count, p=wt_sh / w_total)
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    # s-proposal tilted by e^{-delta s} so the importance factor is flat
    d = box.delta
    e_lo, e_hi = math.exp(-d * s_lo), math.exp(-d * s_hi)
    s = -np.log(e_lo - rng.uniform(0.0, 1.0, count) * (e_lo - e_hi)) / d
    s_vol = (e_lo - e_hi) / d
    zrad = np.sqrt(rng.uniform(zr_lo ** 2, zr_hi ** 2, count))
    zang = rng.uniform(0.0, 2.0 * math.pi, count)
    vol = s_vol * math.pi * (zr_hi ** 2 - zr_lo ** 2)
    mats = kan_frame_mats(xi_sh[idx], theta, s, zrad * np.exp(1j * zang))
    red = np.concatenate(run_chunks(
        lambda lo, hi: sk.reduce_batch(box.group, mats[lo:hi]),
        count, workers=workers, chunk=8192,
    ))
    inside = box.contains(red, reduced=True)
    if not inside.any():
        raise ZeroAcceptance(
            "box too small for the atom resolution: no proposals accepted"
        )
    weights = np.full(int(inside.sum()), w_total * vol / count)
    frames = [FramePoint(box.group, hp.MobiusElement.from_matrix(m))
              for m in red[inside]]
    return [WeightedSample(f, float(w)) for f, w in zip(frames, weights)]


def sample_bms(group, nu: AtomicMeasure, delta: float, count: int, seed,
               t_range=(-2.0, 2.0), workers=None):
    """Hopf-coordinate sampler for the (raw) BMS measure over a time slab.

    Endpoint pair from nu x nu (equal atoms rejected), t uniform on the
    slab, m_theta uniform; weight e^{delta(beta+ + beta-)} W^2 |slab| / n.
    """
    if len(nu) < 2:
        raise ValueError("nu needs at least two distinct atoms")
    rng = np.random.default_rng(seed)
    W = nu.weights.sum()
    p = nu.weights / W
    t_lo, t_hi = t_range
    idx_p = rng.choice(nu.points.size, size=count, p=p)
    idx_m = rng.choice(nu.points.size, size=count, p=p)
    clash = nu.points[idx_p] == nu.points[idx_m]
    while clash.any():
        idx_m[clash] = rng.choice(nu.points.size, size=int(clash.sum()), p=p)
        clash = nu.points[idx_p] == nu.points[idx_m]
    t = rng.uniform(t_lo, t_hi, count)
    theta = rng.uniform(0.0, 2.0 * math.pi, count)
    xp, xm = nu.points[idx_p], nu.points[idx_m]
    mats = hopf_frame_mats(xp, xm, t, theta)
    z, h = hp.apply_h3_arr(mats)
    bp = busemann_kernel(xp, z, h)
    bm = busemann_kernel(xm, z, h)
    weights = np.exp(delta * (bp + bm)) * W * W * (t_hi - t_lo) / count
    red = np.concatenate(run_chunks(
        lambda lo, hi: sk.reduce_batch(group, mats[lo:hi]),
        count, workers=workers, chunk=8192,
    ))
    frames = [FramePoint(group, hp.MobiusElement.from_matrix(m)) for m in red]
    return [WeightedSample(f, float(w)) for f, w in zip(frames, weights)]


# ---------------------------------------------------------------------------
# conditional leaf measures and correlations

def leaf_ps_integral(x: FramePoint, psi, nu: AtomicMeasure, delta: float,
                     rho: float) -> float:
    """mu_x^PS(psi) over xN_rho: atom sum of the PS leaf weights."""
    zeta = zeta_chart(x.rep.mat, nu.points)
    inside = np.isfinite(zeta) & (np.abs(zeta) < rho)
    if not inside.any():
        return 0.0
    zi = zeta[inside]
    beta = leaf_ps_weight(x.rep.mat, zi)
    vals = np.asarray(psi(zi), dtype=float)
    return float((nu.weights[inside] * np.exp(delta * beta) * vals).sum())


def conditional_leaf(box: BoxSpec, x: FramePoint, s: float, psi,
                     delta: float, rho_x: float, cells_per_radius: int = 4,
                     cover_factor: float = 3.0, workers=None) -> float:
    """lambda_{E,x,s}(psi): renormalized conditional of the pushed BR
    measure on the leaf xN_{rho_x}.

    Quadrature runs over a union of lattice cells around the leaf
    coordinates of the atoms (the indicator support is within e^{-s} rho_E
    of limit directions, so cells of that scale around atoms cover it).
    """
    zeta_atoms = zeta_chart(x.rep.mat, box.nu.points)
    ok = np.isfinite(zeta_atoms) & (np.abs(zeta_atoms) < rho_x * 1.2)
    zeta_atoms = zeta_atoms[ok]
    if zeta_atoms.size == 0:
        return 0.0
    support = cover_factor * (math.exp(-s) * box.rho
                              + 4.0 * box.nu.resolution)
    h = support / cells_per_radius
    reach = int(math.ceil(support / h))
    offs = np.arange(-reach, reach + 1)
    ox, oy = np.meshgrid(offs, offs)
    cell_idx = (np.round(zeta_atoms.real / h)[:, None, None] + ox[None]) \
        + 1j * (np.round(zeta_atoms.imag / h)[:, None, None] + oy[None])
    cells = np.unique(cell_idx.ravel())
    zc = cells.real * h + 1j * cells.imag * h
    zc = zc[np.abs(zc) < rho_x]
    if zc.size == 0:
        return 0.0
    x_mat = x.rep.mat
    a_s_mat = hp.a_s(s).mat

    def piece(lo, hi):
        mats, _, _, _ = leaf_points(x_mat, zc[lo:hi])
        flowed = mats @ a_s_mat
        inside = box.contains(flowed)
        if not inside.any():
            return 0.0
        vals = np.asarray(psi(zc[lo:hi][inside]), dtype=float)
        return float(vals.sum())

    total = math.fsum(run_chunks(piece, zc.size, workers=workers, chunk=4096))
    dens = leaf_leb_density(x_mat)
    mbr = box.br_mass()
    return math.exp((2.0 - delta) * s) / mbr * dens * total * h * h


def mixing_correlation(box1: BoxSpec, box2: BoxSpec, s: float, count: int,
                       seed, workers=None):
    """Monte Carlo estimate of int chi_E1(g a_-s) chi_E2(g) dm_BR(g).

    Samples m_BR|_E2 and translates; returns (estimate, standard error).
    """
    samples = sample_br_box(box2, count, seed, workers=workers)
    a_mat = hp.a_s(-s).mat
    mats = np.stack([smp.frame.rep.mat @ a_mat for smp in samples])
    hit = box1.contains(mats)
    w = np.array([smp.weight for smp in samples])
    vals = w * hit
    scale = count / max(1, len(samples))
    est = float(vals.sum())
    se = float(np.sqrt(max(vals.size, 2)) * vals.std()) if vals.size else 0.0
    return est, se * math.sqrt(scale)


def br_integral(group, nu: AtomicMeasure, delta: float, func,
                s_range=(-10.0, 4.0), n_s: int = 57, z_half: float = 6.0,
                n_z: int = 97, atom_budget: int = 1500, seed=407,
                workers=None) -> float:
    """KAN quadrature of int func(base point) dm_BR over X.

    func maps (z_array, t_array) -> values; the integral runs over the
    fundamental domain lift, truncated to the given (s, z) windows (both
    M- and theta-free for base-point integrands).
    """
    nu_s = nu.subsample(atom_budget, seed)
    svals = np.linspace(s_range[0], s_range[1], n_s)
    ds = svals[1] - svals[0]
    zg = np.linspace(-z_half, z_half, n_z)
    dz = (zg[1] - zg[0]) ** 2
    zre, zim = np.meshgrid(zg, zg)
    zflat = (zre + 1j * zim).ravel()

    def piece(lo, hi):
        chunk_atoms = nu_s.points[lo:hi]
        chunk_w = nu_s.weights[lo:hi]
        sub = 0.0
        for s_ in svals:
            mats = kan_frame_mats(chunk_atoms[:, None], 0.0, float(s_),
                                  zflat[None, :])
            z, t = hp.apply_h3_arr(mats)
            dom = sk.in_domain_zt(group, z, t)
            if not dom.any():
                continue
            vals = np.zeros_like(t)
            vals[dom] = func(z[dom], t[dom])
            sub += float((chunk_w[:, None] * vals).sum()) \
                * math.exp(-delta * s_) * ds * dz
        return sub

    parts = run_chunks(piece, nu_s.points.size, workers=workers, chunk=64)
    return math.fsum(parts)

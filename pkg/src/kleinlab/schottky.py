"""Classical Schottky groups: construction, word enumeration, reduction.

A rank-r group is built from r pairs of Euclidean disks with pairwise
disjoint closures.  The pairing map for (D, D') with centers c, c' and
radii rho, rho' is fixed once and for all as the "facing points" map

    g(zeta) = c' - rho rho' u^2 / (zeta - c),      u = (c' - c)/|c' - c|,

the unique normalization used throughout: it sends the exterior of D onto
the interior of D', infinity to c', c to infinity, and the point of
boundary(D) nearest to D' onto the point of boundary(D') nearest to D.
For disks with real data u^2 = 1 and the matrix has real entries, so
configurations drawn on the real axis generate subgroups of PSL_2(R).

Letters are indexed 0..2r-1: letter i < r is the pairing map of pair i,
letter i >= r its inverse; inv(l) = (l + r) mod 2r.  Letter l maps the
exterior of disks[l] onto the interior of disks[inv(l)].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import hyperbolic as hp
from .errors import (
    BasepointInDisk,
    DegeneratePair,
    IterationBudgetExceeded,
    OverlappingDisks,
)
from .parallel import run_chunks

log = logging.getLogger(__name__)

_LEVEL_CAP = 3_000_000


@dataclass(frozen=True)
class Disk:
    center: complex
    radius: float


@dataclass(frozen=True)
class Word:
    """A reduced word: signed letters, its matrix and d(o, w(o))."""

    letters: tuple
    element: hp.MobiusElement
    displacement: float

    def __len__(self):
        return len(self.letters)


def _pairing_matrix(d1: Disk, d2: Disk) -> np.ndarray:
    c, cp = d1.center, d2.center
    u = (cp - c) / abs(cp - c)
    rr = d1.radius * d2.radius * u * u
    m = np.array([[cp, -(c * cp + rr)], [1.0, -c]], dtype=complex)
    return m / np.sqrt(complex(rr))


class SchottkyGroup:
    """Immutable handle on a validated Schottky configuration."""

    def __init__(self, disk_pairs):
        pairs = [(Disk(complex(c1), float(r1)), Disk(complex(c2), float(r2)))
                 for (c1, r1, c2, r2) in disk_pairs]
        if len(pairs) < 2:
            raise ValueError(f"rank must be >= 2, got {len(pairs)} pair(s)")
        for d1, d2 in pairs:
            if d1.radius <= 0 or d2.radius <= 0:
                raise DegeneratePair(f"nonpositive radius in pair {d1}, {d2}")
        self.rank = len(pairs)
        self.pairs = pairs
        # disks[l] is the source disk of letter l
        self.disks = [p[0] for p in pairs] + [p[1] for p in pairs]
        self._validate_disjoint()
        self._validate_basepoint()
        gen_mats = [_pairing_matrix(d1, d2) for d1, d2 in pairs]
        inv_mats = [_pairing_matrix(d2, d1) for d1, d2 in pairs]
        self.letters = np.stack(gen_mats + inv_mats)  # (2r, 2, 2)
        self.generators = [hp.MobiusElement.from_matrix(m) for m in gen_mats]
        self._validate_pingpong()
        self._levels = {}
        self.contraction = self._estimate_contraction()

    # -- validation ---------------------------------------------------

    def _validate_disjoint(self):
        ds = self.disks
        for i in range(len(ds)):
            for j in range(i + 1, len(ds)):
                gap = abs(ds[i].center - ds[j].center) - ds[i].radius - ds[j].radius
                if gap <= 0:
                    raise OverlappingDisks(
                        f"disk closures {i} and {j} intersect (gap {gap:.3g})"
                    )

    def _validate_basepoint(self):
        for i, d in enumerate(self.disks):
            if abs(d.center) ** 2 + 1.0 <= d.radius ** 2:
                raise BasepointInDisk(
                    f"o=(0,1) lies inside the hemisphere over disk {i}"
                )

    def _validate_pingpong(self, n_samples: int = 64, tol: float = 1e-9):
        ang = np.exp(2j * np.pi * np.arange(n_samples) / n_samples)
        for l in range(2 * self.rank):
            src, tgt = self.disks[l], self.disks[self.inv(l)]
            circle = src.center + src.radius * ang
            img = hp.apply_boundary_arr(self.letters[l], circle)
            if np.max(np.abs(img - tgt.center)) > tgt.radius + tol:
                raise OverlappingDisks(
                    f"pairing map of letter {l} fails the circle check"
                )
            # exterior sample points (other circles) must land strictly inside
            for j in range(2 * self.rank):
                if j == l:
                    continue
                other = self.disks[j].center + self.disks[j].radius * ang
                img = hp.apply_boundary_arr(self.letters[l], other)
                if np.max(np.abs(img - tgt.center)) >= tgt.radius:
                    raise OverlappingDisks(
                        f"letter {l} does not contract disk {j} inside "
                        f"its target"
                    )

    def _estimate_contraction(self, probe_len: int = 4) -> float:
        """Empirical per-letter nested-disk shrink factor (< 1)."""
        worst = 0.0
        lv = self.level(probe_len)
        prev = self.level(probe_len - 1)
        # match children to parents: children were emitted letter-major
        ratios = []
        idx = 0
        for l in range(2 * self.rank):
            keep = prev["last"] != self.inv(l)
            parents = prev["disk_radius"][keep]
            n = parents.size
            ratios.append(lv["disk_radius"][idx:idx + n] / parents)
            idx += n
        worst = float(max(np.max(r) for r in ratios))
        return min(worst, 0.999)

    # -- letters ------------------------------------------------------

    def inv(self, letter: int) -> int:
        return (letter + self.rank) % (2 * self.rank)

    def letter_element(self, letter: int) -> hp.MobiusElement:
        return hp.MobiusElement.from_matrix(self.letters[letter])

    # -- word levels ----------------------------------------------------
    # level k holds all reduced words of length k in a fixed order:
    # children are emitted grouped by appended letter, parents in order.

    def level(self, k: int, workers=None) -> dict:
        if k in self._levels:
            return self._levels[k]
        if k == 0:
            mats = np.eye(2, dtype=complex)[None]
            lv = {
                "mats": mats,
                "last": np.array([-1], dtype=np.int8),
                "disp": np.zeros(1),
                "disk_center": np.zeros(1, dtype=complex),
                "disk_radius": np.full(1, np.inf),
            }
            self._levels[0] = lv
            return lv
        prev = self.level(k - 1, workers=workers)
        n_prev = prev["mats"].shape[0]
        est = n_prev * (2 * self.rank - 1 if k > 1 else 2 * self.rank)
        if est > _LEVEL_CAP:
            raise ValueError(
                f"level {k} would hold ~{est} words (cap {_LEVEL_CAP})"
            )
        mats_parts, last_parts, disk_c_parts, disk_r_parts = [], [], [], []
        for l in range(2 * self.rank):
            keep = (prev["last"] != self.inv(l)) if k > 1 else slice(None)
            parents = prev["mats"][keep]
            tgt = self.disks[self.inv(l)]
            lm = self.letters[l]

            def _mul(lo, hi, parents=parents, lm=lm):
                return parents[lo:hi] @ lm

            chunks = run_chunks(_mul, parents.shape[0], workers=workers)
            child = np.concatenate(chunks) if chunks else parents[:0]
            cc, cr = _disk_image_arr(parents, tgt.center, tgt.radius)
            mats_parts.append(child)
            last_parts.append(np.full(child.shape[0], l, dtype=np.int8))
            disk_c_parts.append(cc)
            disk_r_parts.append(cr)
        mats = np.concatenate(mats_parts)
        z, t = hp.apply_h3_arr(mats)
        disp = hp.hyp_dist_arr(z, t, 0j, 1.0)
        lv = {
            "mats": mats,
            "last": np.concatenate(last_parts),
            "disp": disp,
            "disk_center": np.concatenate(disk_c_parts),
            "disk_radius": np.concatenate(disk_r_parts),
        }
        self._levels[k] = lv
        return lv

    def displacement_level(self, k: int, workers=None,
                           enum_cap: int = 400_000,
                           sample_n: int = 200_000):
        """(displacements, multiplier) for level k.

        Levels within enum_cap are enumerated exactly (multiplier 1); for
        larger levels a fixed-seed uniform sample of reduced words stands
        in, reweighted by level_count/sample_n so that weighted sums are
        unbiased estimates of full-level sums.
        """
        cache = getattr(self, "_disp_cache", None)
        if cache is None:
            cache = {}
            self._disp_cache = cache
        key = (k, enum_cap, sample_n)
        if key in cache:
            return cache[key]
        n_k = self.level_count(k)
        if n_k <= enum_cap:
            out = (self.level(k, workers=workers)["disp"], 1.0)
        else:
            rng = np.random.default_rng([k, 986543])
            mats = _sample_words_mats(self, k, sample_n, rng)
            z, t = hp.apply_h3_arr(mats)
            disp = hp.hyp_dist_arr(z, t, 0j, 1.0)
            out = (disp, n_k / sample_n)
        cache[key] = out
        return out

    def drop_level_cache(self, keep_disp=True):
        """Free matrix storage for deep levels, keeping displacements."""
        for k, lv in self._levels.items():
            if keep_disp:
                lv.pop("mats", None)
        self._levels = {
            k: lv for k, lv in self._levels.items() if "mats" in lv or keep_disp
        }

    def level_count(self, k: int) -> int:
        if k == 0:
            return 1
        r = self.rank
        return 2 * r * (2 * r - 1) ** (k - 1)

    # -- serialization --------------------------------------------------

    def to_table(self) -> str:
        lines = ["# center1_re center1_im radius1 center2_re center2_im radius2"]
        for d1, d2 in self.pairs:
            lines.append(" ".join(repr(v) for v in (
                d1.center.real, d1.center.imag, d1.radius,
                d2.center.real, d2.center.imag, d2.radius,
            )))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_table(cls, text: str) -> "SchottkyGroup":
        pairs = parse_disk_table(text)
        return cls(pairs)

    def config_hash(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_table().encode()).hexdigest()[:16]


def parse_disk_table(text: str):
    pairs = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 6:
            raise ValueError(f"disk table row needs 6 columns: {raw!r}")
        pairs.append((complex(vals[0], vals[1]), vals[2],
                      complex(vals[3], vals[4]), vals[5]))
    return pairs


def build(disk_pairs) -> SchottkyGroup:
    """Validate and construct a Schottky group from (c1, r1, c2, r2) pairs."""
    return SchottkyGroup(disk_pairs)


def _sample_words_mats(group: SchottkyGroup, k: int, count: int, rng):
    """Matrices of `count` uniform reduced words of length k."""
    r2 = 2 * group.rank
    letters = np.empty((count, k), dtype=np.int64)
    letters[:, 0] = rng.integers(0, r2, size=count)
    for j in range(1, k):
        step = rng.integers(0, r2 - 1, size=count)
        prev_inv = (letters[:, j - 1] + group.rank) % r2
        letters[:, j] = step + (step >= prev_inv)
    mats = group.letters[letters[:, 0]].copy()
    for j in range(1, k):
        mats = mats @ group.letters[letters[:, j]]
    return mats


def _disk_image_arr(mats: np.ndarray, center: complex, radius: float):
    """Image disks of a fixed disk under a stack of Mobius matrices.

    Valid whenever each pole lies outside the source disk, which holds for
    all reduced-word prefixes acting on the target disk of a continuation
    letter.  Affine matrices (c ~ 0) are handled separately.
    """
    a = mats[..., 0, 0]
    b = mats[..., 0, 1]
    c = mats[..., 1, 0]
    d = mats[..., 1, 1]
    small = np.abs(c) < 1e-14
    c_safe = np.where(small, 1.0, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        pole = -d / c_safe
        refl = center + radius ** 2 / np.conj(pole - center)
        new_center = _moebius_point(a, b, c, d, refl)
        rim = _moebius_point(a, b, c, d, center + radius)
        new_radius = np.abs(rim - new_center)
        aff_center = _moebius_point(a, b, c, d, np.full_like(a, center))
        aff_radius = np.abs(a / d) * radius
    return (
        np.where(small, aff_center, new_center),
        np.where(small, aff_radius, new_radius).real,
    )


def _moebius_point(a, b, c, d, z):
    return (a * z + b) / (c * z + d)


def enumerate_words(group: SchottkyGroup, max_len: int, workers=None):
    """Yield every reduced word of length <= max_len exactly once.

    Streaming generator; letters of each word are recovered from the fixed
    letter-major emission order of the level arrays.
    """
    if max_len < 0:
        raise ValueError("max_len must be >= 0")
    yield Word((), hp.identity(), 0.0)
    paths = {0: [()]}
    for k in range(1, max_len + 1):
        lv = group.level(k, workers=workers)
        prev_paths = paths[k - 1]
        new_paths = []
        for l in range(2 * group.rank):
            for p in prev_paths:
                if k > 1 and p[-1] == group.inv(l):
                    continue
                new_paths.append(p + (l,))
        paths[k] = new_paths
        for i, letters in enumerate(new_paths):
            yield Word(
                letters,
                hp.MobiusElement.from_matrix(lv["mats"][i]),
                float(lv["disp"][i]),
            )
        paths.pop(k - 1, None)


_REDUCE_BUDGET = 20000


def _dome_index(group: SchottkyGroup, z: complex, t: float):
    """Index of the open hemisphere containing (z, t), or -1."""
    for j, d in enumerate(group.disks):
        v = abs(z - d.center) ** 2 + t * t - d.radius ** 2
        if abs(v) < 1e-24:
            log.debug("basepoint on hemisphere %d boundary; perturbing", j)
            v = abs(z + 1e-12 - d.center) ** 2 + t * t - d.radius ** 2
        if v < 0:
            return j
    return -1


def reduce(group: SchottkyGroup, g: hp.MobiusElement):
    """Canonical coset representative: rep = gamma^{-1} g with rep(o) in F.

    F is the exterior of the 2r open hemispheres.  Returns (rep, word)
    where word is gamma as a Word.  Raises IterationBudgetExceeded on
    numerical stagnation at a hemisphere boundary.
    """
    mat = g.mat.copy()
    escapes = []
    for _ in range(_REDUCE_BUDGET):
        z, t = hp.apply_h3_arr(mat)
        j = _dome_index(group, complex(z), float(t))
        if j < 0:
            rep = hp.MobiusElement.from_matrix(mat)
            letters = tuple(group.inv(e) for e in escapes)
            if letters:
                wmat = np.eye(2, dtype=complex)
                for l in letters:
                    wmat = wmat @ group.letters[l]
                welt = hp.MobiusElement.from_matrix(wmat)
                zz, tt = hp.apply_h3_arr(wmat)
                word = Word(letters, welt,
                            float(hp.hyp_dist_arr(zz, tt, 0j, 1.0)))
            else:
                word = Word((), hp.identity(), 0.0)
            return rep, word
        mat = group.letters[j] @ mat
        escapes.append(j)
    raise IterationBudgetExceeded(
        "reduction stagnated; perturb the input by 1e-12 and retry"
    )


def reduce_mat(group: SchottkyGroup, mat: np.ndarray) -> np.ndarray:
    """reduce() for a bare matrix, returning a bare matrix."""
    out = reduce_batch(group, mat[None])
    return out[0]


def reduce_batch(group: SchottkyGroup, mats: np.ndarray,
                 budget: int = _REDUCE_BUDGET) -> np.ndarray:
    """Vectorized reduction of a stack of matrices into the domain."""
    mats = np.array(mats, dtype=complex)
    n = mats.shape[0]
    centers = np.array([d.center for d in group.disks])
    radii2 = np.array([d.radius ** 2 for d in group.disks])
    active = np.arange(n)
    for _ in range(budget):
        z, t = hp.apply_h3_arr(mats[active])
        # (m, 2r) membership in open hemispheres
        v = (np.abs(z[:, None] - centers[None, :]) ** 2
             + (t * t)[:, None] - radii2[None, :])
        inside = v < 0
        hit = inside.any(axis=1)
        if not hit.any():
            return mats
        which = np.argmax(inside, axis=1)
        rows = active[hit]
        mats[rows] = group.letters[which[hit]] @ mats[rows]
        active = rows
    raise IterationBudgetExceeded("batch reduction stagnated")


def in_domain(group: SchottkyGroup, mats: np.ndarray) -> np.ndarray:
    """True where the base point of each frame lies outside all hemispheres."""
    z, t = hp.apply_h3_arr(mats)
    return in_domain_zt(group, z, t)


def in_domain_zt(group: SchottkyGroup, z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Fundamental-domain test on bare base points."""
    centers = np.array([d.center for d in group.disks])
    radii2 = np.array([d.radius ** 2 for d in group.disks])
    v = (np.abs(np.asarray(z)[..., None] - centers) ** 2
         + (np.asarray(t) ** 2)[..., None] - radii2)
    return ~(v < 0).any(axis=-1)


def sample_limit_set(group: SchottkyGroup, depth: int, count: int, rng_seed,
                     with_radii: bool = False):
    """Limit-set samples: w(infinity) for random reduced words |w| = depth.

    Letters are drawn position by position, so two calls with the same
    seed and depths d, d+2 extend the same words.  Points come back as a
    complex array (all limit points of bounded configurations are finite);
    with_radii additionally returns the terminal nested-disk radii.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(rng_seed)
    r2 = 2 * group.rank
    letters = np.empty((count, depth), dtype=np.int64)
    letters[:, 0] = rng.integers(0, r2, size=count)
    for j in range(1, depth):
        step = rng.integers(0, r2 - 1, size=count)
        prev_inv = (letters[:, j - 1] + group.rank) % r2
        nxt = step + (step >= prev_inv)
        letters[:, j] = nxt
    mats = group.letters[letters[:, 0]].copy()
    for j in range(1, depth):
        mats = mats @ group.letters[letters[:, j]]
    points = mats[:, 0, 0] / mats[:, 1, 0]
    if not with_radii:
        return points
    # terminal nested disk: prefix (depth-1 letters) image of last target
    prefix = group.letters[letters[:, 0]].copy() if depth > 1 else None
    for j in range(1, depth - 1):
        prefix = prefix @ group.letters[letters[:, j]]
    tgt_idx = (letters[:, -1] + group.rank) % r2
    if depth == 1:
        cc = np.array([group.disks[i].center for i in tgt_idx])
        rr = np.array([group.disks[i].radius for i in tgt_idx])
    else:
        cc = np.empty(count, dtype=complex)
        rr = np.empty(count)
        for i in range(r2):
            sel = tgt_idx == i
            if not sel.any():
                continue
            d = group.disks[i]
            cc[sel], rr[sel] = _disk_image_arr(prefix[sel], d.center, d.radius)
    return points, rr


def near_limit_set(group: SchottkyGroup, xi: complex, tol: float,
                   max_depth: int = 80) -> bool:
    """True when xi is provably within tol of the limit set.

    Follows the disk coding: while xi sits in a nested disk image, that
    disk contains limit points, so its radius bounds the distance; the
    descent refines the bound geometrically until it clears tol or xi
    falls out of every disk.
    """
    prefix = np.eye(2, dtype=complex)
    point = complex(xi)
    for _ in range(max_depth):
        j = next((i for i, d in enumerate(group.disks)
                  if abs(point - d.center) < d.radius), -1)
        if j < 0:
            return False
        _, rad = _disk_image_arr(prefix[None], group.disks[j].center,
                                 group.disks[j].radius)
        if float(rad[0]) <= tol:
            return True
        prefix = prefix @ group.letters[group.inv(j)]
        m = group.letters[j]
        denom = m[1, 0] * point + m[1, 1]
        if denom == 0:
            return False
        point = complex((m[0, 0] * point + m[0, 1]) / denom)
    return False


def is_fuchsian(group: SchottkyGroup, tol: float = 1e-10) -> bool:
    """True when every generator matrix is real entrywise (standard copy
    of PSL_2(R) only; conjugated Fuchsian groups are not detected)."""
    return all(
        float(np.max(np.abs(g.mat.imag))) <= tol for g in group.generators
    )

"""Equal-area isolatitude sphere pixelation (HEALPix) with corner vertices.

Pixels are addressed in two schemes. Ring ids enumerate pixels along
isolatitude rings from the north pole and are what :meth:`HealpixGrid.ang2pix`
returns. Nested ids enumerate pixels face by face in Z-order so that
``parent = p >> 2``. Conversions between the two are explicit.

Vertices (pixel corners) use a canonical ring-ordered numbering:

* vertex ring ``j`` shares its latitude with pixel-centre ring ``j``;
  ring 0 is the north pole and ring ``4 * nside`` the south pole,
* rings ``1 <= j <= nside`` hold ``4 j`` vertices, rings up to ``3 nside``
  hold ``4 nside``, mirrored towards the south pole,
* inside a ring vertices are sorted by increasing longitude starting at the
  smallest longitude ``>= 0``.

Corners of a pixel are returned in the order north, west, east, south.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np

__all__ = [
    "SphereCoord",
    "HealpixGrid",
    "great_circle_distance",
    "to_unit_vectors",
    "hemisphere_point_count",
    "hemisphere_point_count_excl_equator",
    "CORNER_ORDER",
]

TWO_PI = 2.0 * np.pi
SQRT6 = np.sqrt(6.0)
CORNER_ORDER = ("north", "west", "east", "south")

# base-face layout: ring offset (in units of nside) and longitude offset (in pi/4)
_JRLL = np.array([2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4], dtype=np.int64)
_JPLL = np.array([1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7], dtype=np.int64)


@dataclass(frozen=True)
class SphereCoord:
    """Direction(s) on the unit sphere as colatitude/longitude arrays.

    ``theta`` is measured from the north pole in ``[0, pi]``; ``phi`` is
    wrapped into ``[0, 2 pi)`` on construction.
    """

    theta: np.ndarray
    phi: np.ndarray

    def __init__(self, theta, phi):
        theta = np.asarray(theta, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        if np.any(~np.isfinite(theta)) or np.any(~np.isfinite(phi)):
            raise ValueError("directions must be finite")
        if np.any(theta < 0.0) or np.any(theta > np.pi):
            raise ValueError("theta must lie in [0, pi]")
        theta, phi = np.broadcast_arrays(theta, phi)
        object.__setattr__(self, "theta", theta.copy())
        object.__setattr__(self, "phi", wrap_phi(phi))

    def __len__(self) -> int:
        return int(self.theta.size)

    def __getitem__(self, idx) -> "SphereCoord":
        return SphereCoord(self.theta[idx], self.phi[idx])

    def flip(self) -> "SphereCoord":
        """Reflect through the equator: ``theta -> pi - theta``."""
        return SphereCoord(np.pi - self.theta, self.phi)

    def to_vectors(self) -> np.ndarray:
        return to_unit_vectors(self.theta, self.phi)

    @classmethod
    def from_vectors(cls, v) -> "SphereCoord":
        v = np.asarray(v, dtype=np.float64)
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        theta = np.arctan2(np.hypot(v[..., 0], v[..., 1]), v[..., 2])
        phi = np.arctan2(v[..., 1], v[..., 0])
        return cls(theta, phi)


def wrap_phi(phi):
    phi = np.mod(phi, TWO_PI)
    # mod can round up to exactly 2 pi for tiny negative inputs
    return np.where(phi >= TWO_PI, 0.0, phi)


def to_unit_vectors(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def great_circle_distance(a: SphereCoord, b: SphereCoord) -> np.ndarray:
    """Angular distance in radians, via atan2 of cross and dot products.

    The atan2 form stays accurate for nearly coincident and nearly
    antipodal points, where arccos of the dot product loses precision.
    """
    va = a.to_vectors()
    vb = b.to_vectors()
    return vector_angle(va, vb)


def vector_angle(va: np.ndarray, vb: np.ndarray) -> np.ndarray:
    cross = np.cross(va, vb)
    return np.arctan2(np.linalg.norm(cross, axis=-1), np.sum(va * vb, axis=-1))


def hemisphere_point_count(nside: int) -> int:
    return 6 * nside * nside + 6 * nside + 1


def hemisphere_point_count_excl_equator(nside: int) -> int:
    return 6 * nside * nside - 2 * nside + 1


def _isqrt(x: np.ndarray) -> np.ndarray:
    r = np.floor(np.sqrt(x.astype(np.float64))).astype(np.int64)
    # fix the rare off-by-one from float sqrt on large inputs
    r = np.where(r * r > x, r - 1, r)
    r = np.where((r + 1) * (r + 1) <= x, r + 1, r)
    return r


def _compress_bits(v: np.ndarray) -> np.ndarray:
    # keep the even bits of v, packed together
    v = v & 0x5555555555555555
    v = (v ^ (v >> 1)) & 0x3333333333333333
    v = (v ^ (v >> 2)) & 0x0F0F0F0F0F0F0F0F
    v = (v ^ (v >> 4)) & 0x00FF00FF00FF00FF
    v = (v ^ (v >> 8)) & 0x0000FFFF0000FFFF
    v = (v ^ (v >> 16)) & 0x00000000FFFFFFFF
    return v


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v & 0x00000000FFFFFFFF
    v = (v | (v << 16)) & 0x0000FFFF0000FFFF
    v = (v | (v << 8)) & 0x00FF00FF00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F0F0F0F0F
    v = (v | (v << 2)) & 0x3333333333333333
    v = (v | (v << 1)) & 0x5555555555555555
    return v


class HealpixGrid:
    """HEALPix pixelation at a fixed ``nside`` (a power of two).

    Immutable after construction. The per-pixel corner table and vertex
    coordinates are computed eagerly so queries are table reads.
    """

    def __init__(self, nside: int):
        nside = int(nside)
        if nside < 1 or nside & (nside - 1):
            raise ValueError(f"nside must be a positive power of two, got {nside}")
        self.nside = nside
        self.order = nside.bit_length() - 1
        self.pixel_count = 12 * nside * nside
        self.vertex_count_full = 12 * nside * nside + 2
        self.hemi_vertex_count = hemisphere_point_count(nside)
        self._ncap = 2 * nside * (nside - 1)
        self.pixel_area = 4.0 * np.pi / self.pixel_count

        # vertex ring start offsets, rings 0 .. 4 nside
        j = np.arange(4 * nside + 1, dtype=np.int64)
        counts = self._ring_vertex_count(j)
        self.vertex_ring_start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.vertex_ring_count = counts

        self.pixel_corner_table = self._build_corner_table()
        self.vertex_theta, self.vertex_phi = self._vertex_coords_all()
        self.vertex_xyz = to_unit_vectors(self.vertex_theta, self.vertex_phi)
        self.pixel_ring = self._pixel_ring_all()

    def __repr__(self) -> str:
        return f"HealpixGrid(nside={self.nside})"

    # ------------------------------------------------------------------ rings
    def _ring_vertex_count(self, j: np.ndarray) -> np.ndarray:
        n = self.nside
        jn = np.minimum(j, 4 * n - j)
        return np.where(jn == 0, 1, np.where(jn < n, 4 * jn, 4 * n))

    def _pixel_ring_all(self) -> np.ndarray:
        """Pixel-centre ring index (1 .. 4 nside - 1) for every ring id."""
        p = np.arange(self.pixel_count, dtype=np.int64)
        return self._ring_of_pixel(p)

    def _ring_of_pixel(self, p: np.ndarray) -> np.ndarray:
        n = self.nside
        north = p < self._ncap
        south = p >= self.pixel_count - self._ncap
        ring = np.empty_like(p)
        ring[north] = (1 + _isqrt(1 + 2 * p[north])) >> 1
        eq = ~(north | south)
        ring[eq] = (p[eq] - self._ncap) // (4 * n) + n
        ip = self.pixel_count - p[south]
        ring[south] = 4 * n - ((1 + _isqrt(2 * ip - 1)) >> 1)
        return ring

    # ---------------------------------------------------------------- ang2pix
    def ang2pix(self, theta, phi=None) -> np.ndarray:
        """Ring-scheme pixel id containing each direction.

        Accepts a :class:`SphereCoord` or separate ``theta``/``phi`` arrays.
        Purely analytic; boundary ties resolve by the fixed branch order.
        """
        if isinstance(theta, SphereCoord):
            theta, phi = theta.theta, theta.phi
        theta = np.asarray(theta, dtype=np.float64)
        phi = np.asarray(phi, dtype=np.float64)
        return _ang2pix_ring(self.nside, theta, phi)

    def pix2ang_center(self, p) -> SphereCoord:
        p = self._check_pixels(p)
        n = self.nside
        ring = self._ring_of_pixel(p)
        theta = np.empty(p.shape, dtype=np.float64)
        phi = np.empty(p.shape, dtype=np.float64)

        north = p < self._ncap
        south = p >= self.pixel_count - self._ncap
        eq = ~(north | south)

        r = ring[north]
        iphi = p[north] + 1 - 2 * r * (r - 1)
        theta[north] = 2.0 * np.arcsin(r / (n * np.sqrt(6.0)))
        phi[north] = (iphi - 0.5) * np.pi / (2.0 * r)

        r = ring[eq]
        iphi = (p[eq] - self._ncap) % (4 * n) + 1
        fodd = np.where((r + n) & 1, 1.0, 0.5)
        theta[eq] = np.arccos((2 * n - r) * 2.0 / (3.0 * n))
        phi[eq] = (iphi - fodd) * np.pi / (2.0 * n)

        ip = self.pixel_count - p[south]
        r = (1 + _isqrt(2 * ip - 1)) >> 1
        iphi = 4 * r + 1 - (ip - 2 * r * (r - 1))
        theta[south] = np.pi - 2.0 * np.arcsin(r / (n * np.sqrt(6.0)))
        phi[south] = (iphi - 0.5) * np.pi / (2.0 * r)
        return SphereCoord(theta, phi)

    # ----------------------------------------------------- scheme conversion
    def ring2xyf(self, p) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ring id -> (x, y, face) with ``x, y`` in ``[0, nside)``."""
        p = self._check_pixels(p)
        n = self.nside
        nl2, nl4 = 2 * n, 4 * n
        iring = np.empty_like(p)
        iphi = np.empty_like(p)
        kshift = np.zeros_like(p)
        nr = np.empty_like(p)
        face = np.empty_like(p)

        north = p < self._ncap
        south = p >= self.pixel_count - self._ncap
        eq = ~(north | south)

        pn = p[north]
        r = (1 + _isqrt(1 + 2 * pn)) >> 1
        iring[north] = r
        iphi[north] = pn + 1 - 2 * r * (r - 1)
        nr[north] = r
        face[north] = (iphi[north] - 1) // r

        ip = p[eq] - self._ncap
        tmp = ip // nl4
        iring[eq] = tmp + n
        iphi[eq] = ip - tmp * nl4 + 1
        kshift[eq] = (iring[eq] + n) & 1
        nr[eq] = n
        ire = tmp + 1
        irm = nl2 + 2 - ire
        ifm = (iphi[eq] - (ire >> 1) + n - 1) // n
        ifp = (iphi[eq] - (irm >> 1) + n - 1) // n
        face[eq] = np.where(ifp == ifm, ifp | 4, np.where(ifp < ifm, ifp, ifm + 8))

        ip = self.pixel_count - p[south]
        r = (1 + _isqrt(2 * ip - 1)) >> 1
        iphi[south] = 4 * r + 1 - (ip - 2 * r * (r - 1))
        nr[south] = r
        iring[south] = 2 * nl2 - r
        face[south] = 8 + (iphi[south] - 1) // r

        irt = iring - _JRLL[face] * n + 1
        ipt = 2 * iphi - _JPLL[face] * nr - kshift - 1
        ipt = np.where(ipt >= nl2, ipt - 8 * n, ipt)
        x = (ipt - irt) >> 1
        y = (-ipt - irt) >> 1
        return x, y, face

    def xyf2ring(self, x, y, face) -> np.ndarray:
        n = self.nside
        nl4 = 4 * n
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        face = np.asarray(face, dtype=np.int64)
        jr = _JRLL[face] * n - x - y - 1
        nr = np.where(jr < n, jr, np.where(jr > 3 * n, nl4 - jr, n))
        start = np.where(
            jr < n,
            2 * jr * (jr - 1),
            np.where(jr > 3 * n, self.pixel_count - 2 * (nr + 1) * nr,
                     self._ncap + (jr - n) * nl4),
        )
        kshift = np.where((jr >= n) & (jr <= 3 * n), (jr - n) & 1, 0)
        jp = (_JPLL[face] * nr + x - y + 1 + kshift) // 2
        jp = np.where(jp > nl4, jp - nl4, np.where(jp < 1, jp + nl4, jp))
        return start + jp - 1

    def nest2xyf(self, p) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self._check_pixels(p)
        npface = self.nside * self.nside
        face = p // npface
        ipf = p % npface
        return _compress_bits(ipf), _compress_bits(ipf >> 1), face

    def xyf2nest(self, x, y, face) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        face = np.asarray(face, dtype=np.int64)
        return face * self.nside * self.nside + _spread_bits(x) + (_spread_bits(y) << 1)

    def ring2nest(self, p) -> np.ndarray:
        return self.xyf2nest(*self.ring2xyf(p))

    def nest2ring(self, p) -> np.ndarray:
        return self.xyf2ring(*self.nest2xyf(p))

    # -------------------------------------------------------------- hierarchy
    def parent(self, p_nest) -> np.ndarray:
        """Nested id of the enclosing pixel at ``nside / 2``."""
        if self.nside < 2:
            raise ValueError("nside=1 pixels have no parent")
        return self._check_pixels(p_nest) >> 2

    def children(self, p_nest) -> np.ndarray:
        """Nested ids (at ``2 nside``) of the four sub-pixels, shape ``(..., 4)``."""
        p = self._check_pixels(p_nest)
        return 4 * p[..., None] + np.arange(4, dtype=np.int64)

    # --------------------------------------------------------------- vertices
    def face_vertex_id(self, face, a, b) -> np.ndarray:
        """Canonical vertex id of the lattice point ``(a, b)`` of a base face.

        ``a`` and ``b`` are integer corner coordinates in ``[0, nside]``.
        """
        n = self.nside
        face = np.asarray(face, dtype=np.int64)
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        face, a, b = np.broadcast_arrays(face, a, b)
        j = _JRLL[face] * n - a - b
        out = np.empty(j.shape, dtype=np.int64)

        pole_n = j == 0
        pole_s = j == 4 * n
        out[pole_n] = 0
        out[pole_s] = self.vertex_count_full - 1

        cap_n = (j > 0) & (j < n)
        jj = j[cap_n]
        q = face[cap_n]
        m = (jj + a[cap_n] - b[cap_n]) // 2
        out[cap_n] = 1 + 2 * jj * (jj - 1) + (q * jj + m) % (4 * jj)

        cap_s = (j > 3 * n) & (j < 4 * n)
        jj = 4 * n - j[cap_s]
        q = face[cap_s] - 8
        m = (jj + a[cap_s] - b[cap_s]) // 2
        out[cap_s] = self.vertex_count_full - 1 - 2 * jj * (jj + 1) + (q * jj + m) % (4 * jj)

        belt = (j >= n) & (j <= 3 * n)
        val = (_JPLL[face[belt]] * n + a[belt] - b[belt]) % (8 * n)
        out[belt] = self.vertex_ring_start[j[belt]] + val // 2
        return out

    def _build_corner_table(self) -> np.ndarray:
        p = np.arange(self.pixel_count, dtype=np.int64)
        x, y, f = self.ring2xyf(p)
        return np.stack(
            [
                self.face_vertex_id(f, x + 1, y + 1),  # north
                self.face_vertex_id(f, x, y + 1),  # west
                self.face_vertex_id(f, x + 1, y),  # east
                self.face_vertex_id(f, x, y),  # south
            ],
            axis=-1,
        )

    def vertex_ring(self, v) -> np.ndarray:
        v = self._check_vertices(v)
        return np.searchsorted(self.vertex_ring_start, v, side="right") - 1

    def _vertex_coords_all(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.nside
        v = np.arange(self.vertex_count_full, dtype=np.int64)
        j = self.vertex_ring(v)
        k = v - self.vertex_ring_start[j]
        theta = np.empty(v.shape)
        phi = np.zeros(v.shape)

        theta[j == 0] = 0.0
        theta[j == 4 * n] = np.pi

        cap_n = (j > 0) & (j < n)
        jj = j[cap_n]
        theta[cap_n] = 2.0 * np.arcsin(jj / (n * np.sqrt(6.0)))
        phi[cap_n] = k[cap_n] * np.pi / (2.0 * jj)

        cap_s = (j > 3 * n) & (j < 4 * n)
        jj = 4 * n - j[cap_s]
        theta[cap_s] = np.pi - 2.0 * np.arcsin(jj / (n * np.sqrt(6.0)))
        phi[cap_s] = k[cap_s] * np.pi / (2.0 * jj)

        belt = (j >= n) & (j <= 3 * n)
        jj = j[belt]
        theta[belt] = np.arccos((2 * n - jj) * 2.0 / (3.0 * n))
        phi[belt] = (2 * k[belt] + ((n - jj) & 1)) * np.pi / (4.0 * n)
        return theta, phi

    def vertex_coord(self, v) -> SphereCoord:
        v = self._check_vertices(v)
        return SphereCoord(self.vertex_theta[v], self.vertex_phi[v])

    def pixel_corners(self, p) -> tuple[np.ndarray, SphereCoord]:
        """Corner vertex ids (N, W, E, S) of ring pixel ``p`` and their coordinates."""
        p = self._check_pixels(p)
        ids = self.pixel_corner_table[p]
        return ids, SphereCoord(self.vertex_theta[ids], self.vertex_phi[ids])

    def ancestor_corners(self, p, level) -> np.ndarray:
        """Fine-grid vertex ids of the corners of the ancestor ``level`` steps up.

        ``level = 0`` gives the pixel's own corners. Coarse vertices are a
        subset of the fine vertices, so ancestors are addressed in the same
        vertex numbering.
        """
        p = self._check_pixels(p)
        level = np.broadcast_to(np.asarray(level, dtype=np.int64), p.shape)
        if np.any(level < 0) or np.any(level > self.order):
            raise ValueError("ancestor level out of range")
        x, y, f = self.ring2xyf(p)
        s = np.left_shift(np.int64(1), level)
        xa = (x >> level) * s
        ya = (y >> level) * s
        return np.stack(
            [
                self.face_vertex_id(f, xa + s, ya + s),
                self.face_vertex_id(f, xa, ya + s),
                self.face_vertex_id(f, xa + s, ya),
                self.face_vertex_id(f, xa, ya),
            ],
            axis=-1,
        )

    @cached_property
    def pixel_center_xyz(self) -> np.ndarray:
        return self.pix2ang_center(np.arange(self.pixel_count)).to_vectors()

    # ------------------------------------------------------------- validation
    def _check_pixels(self, p) -> np.ndarray:
        p = np.asarray(p)
        if not np.issubdtype(p.dtype, np.integer):
            raise TypeError("pixel ids must be integers")
        p = p.astype(np.int64)
        if np.any(p < 0) or np.any(p >= self.pixel_count):
            raise IndexError(f"pixel id out of range [0, {self.pixel_count})")
        return p

    def _check_vertices(self, v) -> np.ndarray:
        v = np.asarray(v)
        if not np.issubdtype(v.dtype, np.integer):
            raise TypeError("vertex ids must be integers")
        v = v.astype(np.int64)
        if np.any(v < 0) or np.any(v >= self.vertex_count_full):
            raise IndexError(f"vertex id out of range [0, {self.vertex_count_full})")
        return v


@numba.njit(cache=True, nogil=True)
def _ang2pix_kernel(nside, theta, phi, out):
    ncap = 2 * nside * (nside - 1)
    npix = 12 * nside * nside
    for i in range(theta.size):
        th = theta[i]
        z = np.cos(th)
        za = abs(z)
        tt = (phi[i] % TWO_PI) * (2.0 / np.pi)
        if tt >= 4.0:
            tt = 0.0
        if za <= 2.0 / 3.0:
            t1 = nside * (0.5 + tt)
            t2 = nside * z * 0.75
            jp = np.int64(np.floor(t1 - t2))
            jm = np.int64(np.floor(t1 + t2))
            ir = nside + 1 + jp - jm
            kshift = 1 - (ir & 1)
            ip = ((jp + jm - nside + kshift + 1) >> 1) % (4 * nside)
            out[i] = ncap + (ir - 1) * 4 * nside + ip
        else:
            tp = tt - np.floor(tt)
            # sqrt(3 (1 - |z|)) through half-angles for accuracy near the poles
            if z > 0:
                half = np.sin(0.5 * th)
            else:
                half = np.cos(0.5 * th)
            tmp = nside * SQRT6 * half
            jp = np.int64(np.floor(tp * tmp))
            jm = np.int64(np.floor((1.0 - tp) * tmp))
            ir = jp + jm + 1
            ip = np.int64(np.floor(tt * ir))
            if ip >= 4 * ir:
                ip -= 4 * ir
            if z > 0:
                out[i] = 2 * ir * (ir - 1) + ip
            else:
                out[i] = npix - 2 * ir * (ir + 1) + ip


def _ang2pix_ring(nside: int, theta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    theta, phi = np.broadcast_arrays(theta, phi)
    shape = theta.shape
    th = np.ascontiguousarray(theta, dtype=np.float64).ravel()
    ph = np.ascontiguousarray(phi, dtype=np.float64).ravel()
    out = np.empty(th.size, dtype=np.int64)
    _ang2pix_kernel(np.int64(nside), th, ph, out)
    return out.reshape(shape)

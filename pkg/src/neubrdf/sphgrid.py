"""Spherical index grid and primitive codebook.

Two hemispherical grids share one index vector of length ``2n``. The first
``n`` entries belong to the north grid (vertex rings ``0 .. 2 nside + 1``),
the last ``n`` to the south grid (rings ``2 nside - 1 .. 4 nside``). Both
include the equator ring plus one ring past it, so a direction lying exactly
on the equator can be answered by either half.

Incident directions are looked up in the north half. Outgoing directions are
reflected through the equator first and looked up in the south half.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .healpix import (
    HealpixGrid,
    SphereCoord,
    hemisphere_point_count,
    to_unit_vectors,
    vector_angle,
)

__all__ = [
    "Mode",
    "Hemisphere",
    "DomainError",
    "Codebook",
    "SphericalIndexGrid",
    "interp_weights",
    "query_hemi",
    "query_bidir",
    "softmax",
    "soft_lookup",
    "prune",
    "apply_keep_mask",
    "compression_ratio",
    "dense_parameter_count",
    "packed_grid_bits",
]

DIST_CLAMP = 1e-7
# keeps exact-equator queries on the requested side of a vertex tie
_EQUATOR_NUDGE = 1e-12


class Mode(str, Enum):
    TRAINING = "training"
    RUNTIME = "runtime"


class Hemisphere(str, Enum):
    NORTH = "north"
    SOUTH = "south"


class DomainError(ValueError):
    """Direction outside the extended coverage of a hemisphere grid."""


@dataclass
class Codebook:
    """``2**b`` primitives of dimension ``k``."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries)
        if e.ndim != 2:
            raise ValueError("codebook entries must be a 2-D array")
        rows = e.shape[0]
        if rows < 1 or rows & (rows - 1):
            raise ValueError(f"codebook must have 2**b rows, got {rows}")
        if not np.all(np.isfinite(e)):
            raise ValueError("codebook entries must be finite")
        self.entries = e

    @property
    def bitwidth(self) -> int:
        return self.entries.shape[0].bit_length() - 1

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def initial(cls, bitwidth: int = 9, dim: int = 16, rng=None, scale: float = 1e-4,
                dtype=np.float64) -> "Codebook":
        rng = np.random.default_rng(rng)
        return cls(rng.uniform(-scale, scale, size=(2 ** bitwidth, dim)).astype(dtype))

    @classmethod
    def zeros(cls, bitwidth: int = 9, dim: int = 16) -> "Codebook":
        return cls(np.zeros((2 ** bitwidth, dim)))


class SphericalIndexGrid:
    """Integer indices into a codebook, stored at the vertices of two hemispheres.

    Attributes:
        grid: the underlying :class:`HealpixGrid`.
        indices: ``(2n,)`` integer array, values in ``[0, 2**bitwidth)``.
        soft_logits: optional ``(2n, 2**bitwidth)`` training logits.
        keep_mask: ``None`` when unpruned, else a ``(2n,)`` boolean array.
    """

    def __init__(self, nside: int, bitwidth: int = 9, indices=None, soft_logits=None,
                 grid: HealpixGrid | None = None):
        self.grid = grid if grid is not None else HealpixGrid(nside)
        if self.grid.nside != nside:
            raise ValueError("grid nside mismatch")
        self.nside = nside
        self.bitwidth = int(bitwidth)
        self.n = hemisphere_point_count(nside)
        self.size = 2 * self.n
        if indices is None:
            indices = np.zeros(self.size, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        if self.indices.shape != (self.size,):
            raise ValueError(f"indices must have length 2n={self.size}")
        if np.any(self.indices < 0) or np.any(self.indices >= 2 ** self.bitwidth):
            raise ValueError(f"indices must lie in [0, {2 ** self.bitwidth})")
        self.soft_logits = None
        if soft_logits is not None:
            self.set_soft_logits(soft_logits)
        self.keep_mask: np.ndarray | None = None
        self.fallback_level: dict[Hemisphere, np.ndarray] | None = None

        g = self.grid
        v_offset_south = g.vertex_count_full - self.n
        self._south_offset = v_offset_south
        # position of every global vertex inside each half, -1 if absent
        vid = np.arange(g.vertex_count_full)
        pos_n = np.where(vid < self.n, vid, -1)
        pos_s = np.where(vid >= v_offset_south, vid - v_offset_south + self.n, -1)
        self._vertex_pos = {Hemisphere.NORTH: pos_n, Hemisphere.SOUTH: pos_s}
        in_n = g.pixel_ring <= 2 * nside
        in_s = g.pixel_ring >= 2 * nside
        self.pixel_in_hemi = {Hemisphere.NORTH: in_n, Hemisphere.SOUTH: in_s}
        base = {}
        for hemi, inside in self.pixel_in_hemi.items():
            table = self._vertex_pos[hemi][g.pixel_corner_table]
            table[~inside] = -1
            base[hemi] = table
        self._base_table = base
        self.corner_pos = {h: t.copy() for h, t in base.items()}
        # coordinates of each of the 2n positions
        pos_vertex = np.concatenate([np.arange(self.n), np.arange(self.n) + v_offset_south])
        self.position_vertex = pos_vertex
        self.position_xyz = g.vertex_xyz[pos_vertex]

    def __repr__(self) -> str:
        state = "pruned" if self.keep_mask is not None else "dense"
        return f"SphericalIndexGrid(nside={self.nside}, b={self.bitwidth}, {state})"

    def copy(self) -> "SphericalIndexGrid":
        out = copy.copy(self)
        out.indices = self.indices.copy()
        out.soft_logits = None if self.soft_logits is None else self.soft_logits.copy()
        out.keep_mask = None if self.keep_mask is None else self.keep_mask.copy()
        out.corner_pos = {h: t.copy() for h, t in self.corner_pos.items()}
        if self.fallback_level is not None:
            out.fallback_level = {h: t.copy() for h, t in self.fallback_level.items()}
        return out

    def set_soft_logits(self, logits) -> None:
        logits = np.asarray(logits)
        if logits.shape != (self.size, 2 ** self.bitwidth):
            raise ValueError("soft logits must have shape (2n, 2**b)")
        self.soft_logits = logits
        self.indices = np.argmax(logits, axis=1).astype(np.int64)

    def drop_soft_logits(self) -> None:
        self.soft_logits = None

    @property
    def margin(self) -> float:
        """Colatitude tolerance past the equator accepted by either half."""
        return np.pi / (2.0 * self.nside)

    @property
    def kept_fraction(self) -> float:
        if self.keep_mask is None:
            return 1.0
        return float(self.keep_mask.mean())

    # --------------------------------------------------------------- locating
    def locate(self, dirs: SphereCoord, hemi: Hemisphere) -> tuple[np.ndarray, np.ndarray]:
        """Pixel ids and corner positions (``-1`` where pruned to zero).

        Raises:
            DomainError: a direction lies beyond the hemisphere's extended coverage.
        """
        hemi = Hemisphere(hemi)
        theta = self._clamp_theta(dirs.theta, hemi)
        pix = self.grid.ang2pix(theta, dirs.phi)
        if not np.all(self.pixel_in_hemi[hemi][pix]):
            raise AssertionError("ang2pix left the hemisphere after clamping")
        return pix, self.corner_pos[hemi][pix]

    def _clamp_theta(self, theta: np.ndarray, hemi: Hemisphere) -> np.ndarray:
        half = 0.5 * np.pi
        if hemi is Hemisphere.NORTH:
            if np.any(theta > half + self.margin):
                raise DomainError("direction below the north grid's extended coverage")
            return np.minimum(theta, half - _EQUATOR_NUDGE)
        if np.any(theta < half - self.margin):
            raise DomainError("direction above the south grid's extended coverage")
        return np.maximum(theta, half + _EQUATOR_NUDGE)

    def positions_vertices(self, pos: np.ndarray) -> np.ndarray:
        return self.position_vertex[pos]


def interp_weights(dirs: SphereCoord, p, grid: HealpixGrid, mode: Mode) -> np.ndarray:
    """Blend weights for the four corners (N, W, E, S) of pixel ``p``.

    Training mode uses normalised inverse great-circle distance, with
    distances clamped below at ``1e-7``; runtime mode uses ``1/4`` each.
    """
    corners = grid.vertex_xyz[grid.pixel_corner_table[np.asarray(p)]]
    if Mode(mode) is Mode.RUNTIME:
        return np.full(corners.shape[:-1], 0.25)
    return _idw(dirs.to_vectors(), corners)


def _idw(dir_xyz: np.ndarray, corner_xyz: np.ndarray) -> np.ndarray:
    d = vector_angle(dir_xyz[..., None, :], corner_xyz)
    inv = 1.0 / np.maximum(d, DIST_CLAMP)
    return inv / inv.sum(axis=-1, keepdims=True)


def _corner_weights(sgrid: SphericalIndexGrid, dirs: SphereCoord, pos: np.ndarray,
                    hemi: Hemisphere, mode: Mode) -> np.ndarray:
    zero = pos[..., 0] < 0
    safe = np.where(pos < 0, 0, pos)
    if Mode(mode) is Mode.TRAINING:
        # weights are measured from the clamped direction that was located
        theta = sgrid._clamp_theta(dirs.theta, Hemisphere(hemi))
        w = _idw(to_unit_vectors(theta, dirs.phi), sgrid.position_xyz[safe])
    else:
        w = np.full(pos.shape, 0.25)
    w[zero] = 0.0
    return w


def hemi_corners(sgrid: SphericalIndexGrid, dirs: SphereCoord, hemi: Hemisphere,
                 mode: Mode) -> tuple[np.ndarray, np.ndarray]:
    """Corner positions (``-1`` mapped to 0 with zero weight) and blend weights."""
    _, pos = sgrid.locate(dirs, hemi)
    w = _corner_weights(sgrid, dirs, pos, hemi, mode)
    return np.where(pos < 0, 0, pos), w


def query_hemi(dirs: SphereCoord, hemi: Hemisphere, sgrid: SphericalIndexGrid,
               codebook: Codebook, mode: Mode = Mode.RUNTIME) -> np.ndarray:
    """Weighted blend of the hard-indexed corner primitives, shape ``(N, k)``."""
    pos, w = hemi_corners(sgrid, dirs, hemi, mode)
    feats = codebook.entries[sgrid.indices[pos]]
    return np.einsum("...t,...tk->...k", w, feats)


def query_bidir(wi: SphereCoord, wo: SphereCoord, sgrid: SphericalIndexGrid,
                codebook: Codebook, mode: Mode = Mode.RUNTIME) -> np.ndarray:
    """``[north(wi), south(flip(wo))]``, shape ``(N, 2k)``."""
    fi = query_hemi(wi, Hemisphere.NORTH, sgrid, codebook, mode)
    fo = query_hemi(wo.flip(), Hemisphere.SOUTH, sgrid, codebook, mode)
    return np.concatenate([fi, fo], axis=-1)


def softmax(x: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(x) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_lookup(logits: np.ndarray, codebook: Codebook, tau: float) -> np.ndarray:
    """``softmax(logits / tau) @ D`` for one row or a stack of rows."""
    return softmax(logits, tau) @ codebook.entries


def prune(sgrid: SphericalIndexGrid, wi: SphereCoord, wo: SphereCoord) -> SphericalIndexGrid:
    """Drop vertices no training direction supervises and set up parent fallback.

    A vertex survives if one of its incident pixels (in its own half) holds a
    training direction. A pixel with any dropped corner is answered by the
    first ancestor whose four corners all survive, or by a zero feature if no
    ancestor up to the base resolution qualifies. Supervised pixels keep all
    their corners, so their queries are unchanged.
    """
    if len(wi) == 0:
        raise ValueError("pruning needs at least one training direction")
    keep = np.zeros(sgrid.size, dtype=bool)
    for hemi, dirs in ((Hemisphere.NORTH, wi), (Hemisphere.SOUTH, wo.flip())):
        pix, _ = sgrid.locate(dirs, hemi)
        hit = np.unique(pix)
        pos = sgrid._base_table[hemi][hit].ravel()
        keep[pos[pos >= 0]] = True
    if sgrid.keep_mask is not None:
        keep &= sgrid.keep_mask
    return apply_keep_mask(sgrid, keep)


def apply_keep_mask(sgrid: SphericalIndexGrid, keep: np.ndarray) -> SphericalIndexGrid:
    """Rebuild the per-pixel fallback tables for a given vertex keep mask."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != (sgrid.size,):
        raise ValueError("keep mask must have length 2n")
    out = sgrid.copy()
    out.keep_mask = keep.copy()
    g = sgrid.grid
    levels = {}
    for hemi in Hemisphere:
        pixels = np.flatnonzero(sgrid.pixel_in_hemi[hemi])
        table = np.full((g.pixel_count, 4), -1, dtype=np.int64)
        level = np.full(g.pixel_count, -1, dtype=np.int64)
        todo = pixels
        for lvl in range(g.order + 1):
            if todo.size == 0:
                break
            verts = g.ancestor_corners(todo, lvl)
            pos = sgrid._vertex_pos[hemi][verts]
            ok = np.all(pos >= 0, axis=1)
            ok[ok] = np.all(keep[pos[ok]], axis=1)
            table[todo[ok]] = pos[ok]
            level[todo[ok]] = lvl
            todo = todo[~ok]
        out.corner_pos[hemi] = table
        levels[hemi] = level
    out.fallback_level = levels
    return out


def dense_parameter_count(nside: int, k: int) -> int:
    return 2 * hemisphere_point_count(nside) * k


def packed_grid_bits(nside: int, k: int, b: int) -> int:
    """Bits for b-bit indices plus an fp16 codebook."""
    return 2 * hemisphere_point_count(nside) * b + 16 * k * 2 ** b


def compression_ratio(nside: int, k: int, b: int) -> float:
    """fp16 dense grid size over (b-bit indices + fp16 codebook) size."""
    return 16 * dense_parameter_count(nside, k) / packed_grid_bits(nside, k, b)

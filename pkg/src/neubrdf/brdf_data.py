"""Ground-truth reflectance: MERL tables, analytic oracles and sparse sample lists.

Directions are local-frame :class:`~neubrdf.healpix.SphereCoord` values with
the surface normal at ``theta = 0``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .healpix import SphereCoord, to_unit_vectors, wrap_phi

__all__ = [
    "BidirSamples",
    "MerlTable",
    "MerlFormatError",
    "SampleListError",
    "GgxParams",
    "Lambertian",
    "load_merl",
    "write_merl",
    "merl_enumerate",
    "merl_lookup",
    "theta_half_index",
    "theta_half_from_index",
    "io_to_halfdiff",
    "io_to_halfdiff_full",
    "halfdiff_to_io",
    "ggx_eval",
    "isotropic_reparam",
    "read_sample_list",
    "write_sample_list",
    "load_svbrdf_dir",
    "build_dataset",
    "descriptor_table",
]

MERL_RES = (90, 90, 180)  # theta_h, theta_d, phi_d
MERL_SCALE = np.array([1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0])
MERL_HEADER_BYTES = 12
MERL_FILE_BYTES = MERL_HEADER_BYTES + 90 * 90 * 180 * 3 * 8
COS_CLAMP = 1e-6


class MerlFormatError(ValueError):
    pass


class SampleListError(ValueError):
    pass


@dataclass
class BidirSamples:
    """A batch of ``(wi, wo) -> rgb`` records, optionally with surface ``uv``."""

    wi: SphereCoord
    wo: SphereCoord
    rgb: np.ndarray
    uv: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
        n = len(self.rgb)
        if len(self.wi) != n or len(self.wo) != n:
            raise ValueError("direction and rgb counts differ")
        if not np.all(np.isfinite(self.rgb)) or np.any(self.rgb < 0):
            raise ValueError("reflectance must be finite and non-negative")
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
            if len(self.uv) != n:
                raise ValueError("uv count differs from sample count")

    def __len__(self) -> int:
        return len(self.rgb)

    def subset(self, idx) -> "BidirSamples":
        return BidirSamples(self.wi[idx], self.wo[idx], self.rgb[idx],
                            None if self.uv is None else self.uv[idx])

    def split(self, fraction: float = 0.9, seed: int = 0) -> tuple["BidirSamples", "BidirSamples"]:
        """Seeded shuffle, then the first ``round(fraction * N)`` samples train."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("split fraction must lie in (0, 1]")
        perm = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(perm[:cut]), self.subset(perm[cut:])

    @staticmethod
    def concat(parts) -> "BidirSamples":
        parts = list(parts)
        uv = None
        if all(p.uv is not None for p in parts):
            uv = np.concatenate([p.uv for p in parts])
        return BidirSamples(
            SphereCoord(np.concatenate([p.wi.theta for p in parts]),
                        np.concatenate([p.wi.phi for p in parts])),
            SphereCoord(np.concatenate([p.wo.theta for p in parts]),
                        np.concatenate([p.wo.phi for p in parts])),
            np.concatenate([p.rgb for p in parts]),
            uv,
        )


# ----------------------------------------------------------------------- MERL
@dataclass
class MerlTable:
    """Dense 90 x 90 x 180 RGB table in the MERL layout.

    ``raw`` holds the file's unscaled doubles (channel-major) so that a
    load/write round trip is byte exact; :attr:`rgb` is the scaled,
    non-negative reflectance.
    """

    raw: np.ndarray
    header_dims: tuple[int, int, int] = MERL_RES

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape((3,) + MERL_RES)

    @classmethod
    def from_rgb(cls, rgb) -> "MerlTable":
        rgb = np.asarray(rgb, dtype=np.float64).reshape((3,) + MERL_RES)
        return cls(rgb / MERL_SCALE[:, None, None, None])

    @property
    def rgb(self) -> np.ndarray:
        """Scaled reflectance, shape ``(3, 90, 90, 180)``; negatives become 0."""
        return np.maximum(self.raw * MERL_SCALE[:, None, None, None], 0.0)


def load_merl(path) -> MerlTable:
    path = Path(path)
    size = path.stat().st_size
    if size != MERL_FILE_BYTES:
        raise MerlFormatError(
            f"{path}: expected {MERL_FILE_BYTES} bytes, found {size} "
            f"(payload would start at offset {MERL_HEADER_BYTES})")
    with open(path, "rb") as fh:
        header = fh.read(MERL_HEADER_BYTES)
        dims = struct.unpack("<3i", header)
        if sorted(dims) != sorted(MERL_RES):
            raise MerlFormatError(f"{path}: header dims {dims} at offset 0 do not describe a "
                                  "90x90x180 table")
        payload = np.frombuffer(fh.read(), dtype="<f8")
    return MerlTable(payload.astype(np.float64), tuple(dims))


def write_merl(table: MerlTable, path) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *table.header_dims))
        fh.write(np.ascontiguousarray(table.raw, dtype="<f8").tobytes())


def theta_half_index(theta_h) -> np.ndarray:
    """Non-linear MERL bin: ``floor(sqrt(theta_h / (pi/2)) * 90)``."""
    t = np.clip(np.asarray(theta_h, dtype=np.float64) / (0.5 * np.pi), 0.0, None)
    return np.clip(np.floor(np.sqrt(t) * 90), 0, 89).astype(np.int64)


def theta_half_from_index(i) -> np.ndarray:
    """Bin-centre angle of a theta-half bin."""
    return ((np.asarray(i) + 0.5) / 90.0) ** 2 * (0.5 * np.pi)


def merl_lookup(table: MerlTable, wi: SphereCoord, wo: SphereCoord) -> np.ndarray:
    th, td, pd = io_to_halfdiff(wi, wo)
    i = theta_half_index(th)
    j = np.clip(np.floor(td / (0.5 * np.pi) * 90), 0, 89).astype(np.int64)
    k = np.clip(np.floor(pd / np.pi * 180), 0, 179).astype(np.int64)
    return np.moveaxis(table.rgb[:, i, j, k], 0, -1)


def merl_enumerate(table: MerlTable):
    """Every table entry as a direction pair at its bin centre.

    Returns:
        ``(wi, wo, rgb, valid)`` over all 1,458,000 entries; ``valid`` marks
        pairs with both directions in the upper hemisphere.
    """
    i, j, k = np.meshgrid(np.arange(90), np.arange(90), np.arange(180), indexing="ij")
    th = theta_half_from_index(i.ravel())
    td = (j.ravel() + 0.5) / 90.0 * (0.5 * np.pi)
    pd = (k.ravel() + 0.5) / 180.0 * np.pi
    wi, wo = halfdiff_to_io(th, td, pd)
    rgb = table.rgb.reshape(3, -1).T
    valid = (wi.theta <= 0.5 * np.pi) & (wo.theta <= 0.5 * np.pi)
    return wi, wo, rgb, valid


# ------------------------------------------------------------ Rusinkiewicz
def _rot_z(v, a):
    c, s = np.cos(a), np.sin(a)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1], v[..., 2]], -1)


def _rot_y(v, a):
    c, s = np.cos(a), np.sin(a)
    return np.stack([c * v[..., 0] + s * v[..., 2], v[..., 1], -s * v[..., 0] + c * v[..., 2]], -1)


def io_to_halfdiff_full(wi: SphereCoord, wo: SphereCoord):
    """``(theta_h, phi_h, theta_d, phi_d)`` without reciprocity folding."""
    vi, vo = wi.to_vectors(), wo.to_vectors()
    h = vi + vo
    h /= np.linalg.norm(h, axis=-1, keepdims=True)
    theta_h = np.arctan2(np.hypot(h[..., 0], h[..., 1]), h[..., 2])
    # azimuth of a vertical half vector is undefined; use 0
    phi_h = np.where(np.hypot(h[..., 0], h[..., 1]) < 1e-12, 0.0, np.arctan2(h[..., 1], h[..., 0]))
    d = _rot_y(_rot_z(vi, -phi_h), -theta_h)
    theta_d = np.arctan2(np.hypot(d[..., 0], d[..., 1]), d[..., 2])
    phi_d = np.arctan2(d[..., 1], d[..., 0])
    return theta_h, wrap_phi(phi_h), theta_d, wrap_phi(phi_d)


def io_to_halfdiff(wi: SphereCoord, wo: SphereCoord):
    """MERL coordinates ``(theta_h, theta_d, phi_d)`` with ``phi_d`` folded into ``[0, pi]``."""
    theta_h, _, theta_d, phi_d = io_to_halfdiff_full(wi, wo)
    return theta_h, theta_d, np.mod(phi_d, np.pi)


def halfdiff_to_io(theta_h, theta_d, phi_d, phi_h=0.0) -> tuple[SphereCoord, SphereCoord]:
    theta_h, theta_d, phi_d, phi_h = np.broadcast_arrays(
        *(np.asarray(a, dtype=np.float64) for a in (theta_h, theta_d, phi_d, phi_h)))
    d = to_unit_vectors(theta_d, phi_d)
    vi = _rot_z(_rot_y(d, theta_h), phi_h)
    h = to_unit_vectors(theta_h, phi_h)
    vo = 2.0 * np.sum(vi * h, axis=-1, keepdims=True) * h - vi
    return SphereCoord.from_vectors(vi), SphereCoord.from_vectors(vo)


# ---------------------------------------------------------------- oracles
@dataclass(frozen=True)
class GgxParams:
    """Anisotropic-capable GGX microfacet lobe plus a Lambertian base.

    ``alpha_x``/``alpha_y`` default to ``alpha``.
    """

    alpha: float = 0.3
    albedo: tuple[float, float, float] = (0.5, 0.35, 0.2)
    f0: tuple[float, float, float] = (0.04, 0.04, 0.04)
    alpha_x: float | None = None
    alpha_y: float | None = None

    def __post_init__(self):
        for a in (self.alpha, self.ax, self.ay):
            if not 0.0 < a <= 1.0:
                raise ValueError("roughness must lie in (0, 1]")
        if any(not 0.0 <= f <= 1.0 for f in self.f0):
            raise ValueError("f0 must lie in [0, 1]")
        if any(a < 0 for a in self.albedo):
            raise ValueError("albedo must be non-negative")

    @property
    def ax(self) -> float:
        return self.alpha if self.alpha_x is None else self.alpha_x

    @property
    def ay(self) -> float:
        return self.alpha if self.alpha_y is None else self.alpha_y

    @property
    def isotropic(self) -> bool:
        return self.ax == self.ay

    def eval(self, wi: SphereCoord, wo: SphereCoord, uv=None) -> np.ndarray:
        return ggx_eval(self, wi, wo)


@dataclass(frozen=True)
class Lambertian:
    rho: tuple[float, float, float] = (0.5, 0.5, 0.5)
    isotropic: bool = field(default=True, init=False)

    def eval(self, wi: SphereCoord, wo: SphereCoord, uv=None) -> np.ndarray:
        n = np.broadcast_shapes(np.shape(wi.theta), np.shape(wo.theta))
        return np.broadcast_to(np.asarray(self.rho) / np.pi, n + (3,)).copy()


def ggx_ndf(h: np.ndarray, ax: float, ay: float) -> np.ndarray:
    t = (h[..., 0] / ax) ** 2 + (h[..., 1] / ay) ** 2 + h[..., 2] ** 2
    return 1.0 / (np.pi * ax * ay * t * t)


def smith_g1(v: np.ndarray, ax: float, ay: float) -> np.ndarray:
    cz = np.maximum(v[..., 2], COS_CLAMP)
    tan2 = ((ax * v[..., 0]) ** 2 + (ay * v[..., 1]) ** 2) / (cz * cz)
    lam = 0.5 * (np.sqrt(1.0 + tan2) - 1.0)
    return 1.0 / (1.0 + lam)


def ggx_eval(params: GgxParams, wi: SphereCoord, wo: SphereCoord) -> np.ndarray:
    """``D F G / (4 cos_i cos_o) + albedo / pi`` per channel, shape ``(N, 3)``.

    Separable Smith shadowing and Schlick Fresnel; cosines are clamped at
    ``1e-6``.
    """
    vi, vo = wi.to_vectors(), wo.to_vectors()
    h = vi + vo
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    h = np.where(norm > 0, h / np.maximum(norm, 1e-300), np.array([0.0, 0.0, 1.0]))
    ci = np.maximum(vi[..., 2], COS_CLAMP)
    co = np.maximum(vo[..., 2], COS_CLAMP)
    d = ggx_ndf(h, params.ax, params.ay)
    g = smith_g1(vi, params.ax, params.ay) * smith_g1(vo, params.ax, params.ay)
    cos_ih = np.clip(np.sum(vi * h, axis=-1), 0.0, 1.0)
    f0 = np.asarray(params.f0)
    fres = f0 + (1.0 - f0) * ((1.0 - cos_ih) ** 5)[..., None]
    spec = (d * g / (4.0 * ci * co))[..., None] * fres
    return spec + np.asarray(params.albedo) / np.pi


def isotropic_reparam(wi: SphereCoord, wo: SphereCoord) -> tuple[SphereCoord, SphereCoord]:
    """Rotate so ``wi`` sits at zero azimuth; fold the azimuth difference into ``[0, pi]``."""
    dphi = np.mod(wo.phi - wi.phi, 2.0 * np.pi)
    dphi = np.where(dphi > np.pi, 2.0 * np.pi - dphi, dphi)
    return SphereCoord(wi.theta, np.zeros_like(wi.phi)), SphereCoord(wo.theta, dphi)


# ----------------------------------------------------------- sample lists
def read_sample_list(path, require_rgb: bool = True) -> BidirSamples:
    """Parse ``theta_i phi_i theta_o phi_o r g b [u v]`` lines.

    With ``require_rgb=False`` direction-only rows (4 columns, or 6 with uv)
    are accepted and get zero reflectance.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows, uvs = [], []
    allowed = {7, 9} if require_rgb else {4, 6, 7, 9}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in allowed:
                raise SampleListError(
                    f"{path}:{lineno}: expected {sorted(allowed)} columns, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise SampleListError(f"{path}:{lineno}: {exc}") from None
            if not all(np.isfinite(vals)):
                raise SampleListError(f"{path}:{lineno}: non-finite value")
            ti, pi_, to, po = vals[:4]
            if not (0 <= ti <= 0.5 * np.pi and 0 <= to <= 0.5 * np.pi):
                raise SampleListError(f"{path}:{lineno}: direction below the horizon")
            if len(vals) in (7, 9):
                rgb = vals[4:7]
                if min(rgb) < 0:
                    raise SampleListError(f"{path}:{lineno}: negative reflectance")
                uv = vals[7:9]
            else:
                rgb = [0.0, 0.0, 0.0]
                uv = vals[4:6]
            rows.append([ti, pi_, to, po, *rgb])
            uvs.append(uv)
    if not rows:
        raise SampleListError(f"{path}: no samples")
    arr = np.array(rows)
    has_uv = [len(u) == 2 for u in uvs]
    if any(has_uv) and not all(has_uv):
        raise SampleListError(f"{path}: uv given on some rows only")
    uv = np.array(uvs) if all(has_uv) else None
    return BidirSamples(SphereCoord(arr[:, 0], arr[:, 1]), SphereCoord(arr[:, 2], arr[:, 3]),
                        arr[:, 4:7], uv)


def write_sample_list(samples: BidirSamples, path) -> None:
    cols = [samples.wi.theta, samples.wi.phi, samples.wo.theta, samples.wo.phi,
            samples.rgb[:, 0], samples.rgb[:, 1], samples.rgb[:, 2]]
    if samples.uv is not None:
        cols += [samples.uv[:, 0], samples.uv[:, 1]]
    np.savetxt(path, np.column_stack(cols), fmt="%.17g",
               header="theta_i phi_i theta_o phi_o r g b" + (" u v" if samples.uv is not None else ""))


def load_svbrdf_dir(path) -> BidirSamples:
    """Directory of sample lists plus ``manifest.txt`` lines ``<file> <u> <v>``."""
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(manifest)
    parts = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise SampleListError(f"{manifest}:{lineno}: expected '<file> <u> <v>'")
        s = read_sample_list(path / fields[0])
        u, v = float(fields[1]), float(fields[2])
        s.uv = np.tile([u, v], (len(s), 1))
        parts.append(s)
    if not parts:
        raise SampleListError(f"{manifest}: empty manifest")
    return BidirSamples.concat(parts)


# ---------------------------------------------------------------- datasets
def _stratified_directions(count: int, rng: np.random.Generator):
    """Latin-hypercube pairs, uniform in solid angle over the upper hemisphere."""
    def strata():
        return (rng.permutation(count) + rng.uniform(size=count)) / count
    zi, pi_, zo, po = strata(), strata(), strata(), strata()
    wi = SphereCoord(np.arccos(np.clip(zi, 0, 1)), 2 * np.pi * pi_)
    wo = SphereCoord(np.arccos(np.clip(zo, 0, 1)), 2 * np.pi * po)
    return wi, wo


def build_dataset(source, strategy: str = "auto", count: int | None = None,
                  split: float = 0.9, seed: int = 0, isotropic: bool = False):
    """Turn a reflectance source into seeded train/held-out sample sets.

    Args:
        source: a :class:`MerlTable`, an analytic oracle with ``eval``, a
            :class:`BidirSamples`, or a path to a sample list.
        strategy: ``"enumerate"`` or ``"subsample"`` for MERL tables,
            ``"stratified"`` for analytic sources; ``"auto"`` picks.
        count: samples to draw (subsample / analytic sources).
        split: training fraction.
        isotropic: apply :func:`isotropic_reparam` to every sample.
    """
    rng = np.random.default_rng(seed)
    if isinstance(source, (str, os.PathLike)):
        samples = read_sample_list(source)
    elif isinstance(source, BidirSamples):
        samples = source
    elif isinstance(source, MerlTable):
        wi, wo, rgb, valid = merl_enumerate(source)
        idx = np.flatnonzero(valid)
        if strategy == "subsample" or (strategy == "auto" and count is not None):
            if count is None or count < 1:
                raise ValueError("subsampling needs a positive count")
            idx = np.sort(rng.choice(idx, size=min(count, idx.size), replace=False))
        elif strategy not in ("auto", "enumerate"):
            raise ValueError(f"unknown strategy {strategy!r} for MERL data")
        samples = BidirSamples(wi[idx], wo[idx], rgb[idx])
    elif hasattr(source, "eval"):
        if strategy not in ("auto", "stratified"):
            raise ValueError(f"unknown strategy {strategy!r} for analytic data")
        if count is None or count < 1:
            raise ValueError("analytic sources need a positive count")
        wi, wo = _stratified_directions(count, rng)
        samples = BidirSamples(wi, wo, source.eval(wi, wo))
    else:
        raise TypeError(f"unsupported reflectance source {type(source).__name__}")
    if len(samples) == 0:
        raise ValueError("empty reflectance source")
    if isotropic:
        wi, wo = isotropic_reparam(samples.wi, samples.wo)
        samples = BidirSamples(wi, wo, samples.rgb, samples.uv)
    return samples.split(split, seed)


def descriptor_table(source, shape=(15, 15, 30)) -> np.ndarray:
    """Coarse ``(3, *shape)`` reflectance table in MERL half/difference bins.

    MERL tables are block-averaged; analytic sources are evaluated at
    coarse bin centres (below-horizon bins are 0).
    """
    if isinstance(source, MerlTable):
        rgb = source.rgb
        fi, fj, fk = (r // s for r, s in zip(MERL_RES, shape))
        if fi * shape[0] != 90 or fj * shape[1] != 90 or fk * shape[2] != 180:
            raise ValueError("descriptor shape must divide 90x90x180")
        return rgb.reshape(3, shape[0], fi, shape[1], fj, shape[2], fk).mean(axis=(2, 4, 6))
    i, j, k = np.meshgrid(*(np.arange(s) for s in shape), indexing="ij")
    th = ((i.ravel() + 0.5) / shape[0]) ** 2 * (0.5 * np.pi)
    td = (j.ravel() + 0.5) / shape[1] * (0.5 * np.pi)
    pd = (k.ravel() + 0.5) / shape[2] * np.pi
    wi, wo = halfdiff_to_io(th, td, pd)
    valid = (wi.theta <= 0.5 * np.pi) & (wo.theta <= 0.5 * np.pi)
    vals = np.zeros((th.size, 3))
    vals[valid] = source.eval(wi[valid], wo[valid])
    return vals.T.reshape((3,) + tuple(shape))

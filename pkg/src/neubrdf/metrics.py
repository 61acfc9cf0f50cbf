"""Sphere preview renderer, image error metrics, and image file formats.

Images are ``(height, width, 3)`` float arrays of linear radiance. Gamma is
applied only when encoding 8-bit PPM files; the PFM sidecar keeps the exact
float values for metric computation.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .healpix import SphereCoord

__all__ = [
    "DirectionalLight",
    "DEFAULT_LIGHT",
    "render_sphere",
    "mae",
    "rmse",
    "ssim",
    "gaussian_window",
    "write_ppm",
    "read_ppm",
    "write_pfm",
    "read_pfm",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
GAMMA = 2.2


@dataclass(frozen=True)
class DirectionalLight:
    """Distant light travelling towards the origin from ``direction``."""

    direction: tuple[float, float, float] = (0.5, 0.5, 1.0)
    intensity: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,) or not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0:
            raise ValueError("light direction must be a finite non-zero 3-vector")
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValueError("light intensity must be finite and non-negative")

    @property
    def unit(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        return d / np.linalg.norm(d)

    @classmethod
    def parse(cls, spec: str) -> "DirectionalLight":
        """``"x,y,z"`` or ``"x,y,z@intensity"``."""
        head, _, tail = spec.partition("@")
        try:
            d = tuple(float(s) for s in head.split(","))
            intensity = float(tail) if tail else 1.0
        except ValueError:
            raise ValueError(f"bad light spec {spec!r}; expected 'x,y,z[@intensity]'") from None
        if len(d) != 3:
            raise ValueError(f"bad light spec {spec!r}; expected 'x,y,z[@intensity]'")
        return cls(d, intensity)


DEFAULT_LIGHT = DirectionalLight()


def _local_frame(n: np.ndarray):
    """Tangent and bitangent with the tangent perpendicular to world up."""
    up = np.array([0.0, 1.0, 0.0])
    t = np.cross(up, n)
    norm = np.linalg.norm(t, axis=-1, keepdims=True)
    t = np.where(norm > 1e-12, t / np.maximum(norm, 1e-300), np.array([1.0, 0.0, 0.0]))
    b = np.cross(n, t)
    return t, b


def _to_local(d: np.ndarray, n, t, b) -> SphereCoord:
    z = np.clip(d @ n.T if d.ndim == 1 else np.sum(d * n, axis=-1), -1.0, 1.0)
    x = d @ t.T if d.ndim == 1 else np.sum(d * t, axis=-1)
    y = d @ b.T if d.ndim == 1 else np.sum(d * b, axis=-1)
    return SphereCoord(np.arccos(z), np.arctan2(y, x))


def render_sphere(brdf, light: DirectionalLight = DEFAULT_LIGHT, size: int = 256,
                  uv=None) -> np.ndarray:
    """Orthographic unit sphere viewed along ``-z`` under one directional light.

    Every covered pixel gets ``f(wi, wo) * cos(theta_i) * intensity``; the
    background and points facing away from the light are zero.

    Args:
        brdf: anything with ``eval(wi, wo[, uv])`` returning ``(N, 3)``.
        uv: constant surface coordinate passed to textured models.
    """
    if int(size) != size or size < 1:
        raise ValueError("image size must be a positive integer")
    size = int(size)
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    x, y = np.meshgrid(c, -c)
    r2 = x * x + y * y
    inside = r2 < 1.0
    n = np.stack([x[inside], y[inside], np.sqrt(1.0 - r2[inside])], axis=-1)
    t, b = _local_frame(n)
    view = np.array([0.0, 0.0, 1.0])
    ldir = light.unit
    cos_i = n @ ldir
    lit = cos_i > 0.0
    img = np.zeros((size, size, 3))
    if np.any(lit):
        nl, tl, bl = n[lit], t[lit], b[lit]
        wi = _to_local(np.broadcast_to(ldir, nl.shape), nl, tl, bl)
        wo = _to_local(np.broadcast_to(view, nl.shape), nl, tl, bl)
        args = (wi, wo) if uv is None else (wi, wo, np.tile(np.asarray(uv, float), (len(nl), 1)))
        f = np.asarray(brdf.eval(*args), dtype=np.float64)
        vals = np.zeros((len(n), 3))
        vals[lit] = f * (cos_i[lit] * light.intensity)[:, None]
        img[inside] = vals
    return img


# ------------------------------------------------------------------ metrics
def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty image")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1-D Gaussian taps."""
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _blur(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable filter with mirror padding (edge sample repeated)."""
    pad = len(taps) // 2
    out = img
    for axis in (0, 1):
        widths = [(0, 0)] * out.ndim
        widths[axis] = (pad, pad)
        p = np.pad(out, widths, mode="symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, w in enumerate(taps):
            acc += w * np.take(p, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def ssim(a, b) -> float:
    """Mean structural similarity, Gaussian window 11x11 with sigma 1.5.

    Both images are divided by the larger of their two maxima so the
    stabilising constants refer to a unit dynamic range; the statistics use
    population (not sample) variances, the border of half a window is
    excluded from the mean, and channels are averaged.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    scale = max(float(a.max()), float(b.max()))
    if scale > 0:
        a, b = a / scale, b / scale
    taps = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _blur(a, taps), _blur(b, taps)
    saa = _blur(a * a, taps) - mu_a * mu_a
    sbb = _blur(b * b, taps) - mu_b * mu_b
    sab = _blur(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    s = num / den
    pad = SSIM_WINDOW // 2
    return float(s[pad:-pad, pad:-pad].mean())


# ------------------------------------------------------------------- files
def _check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or min(img.shape[:2]) < 1:
        raise ValueError("image must have shape (height, width, 3)")
    if not np.all(np.isfinite(img)):
        raise ValueError("image has non-finite pixels")
    return img


def write_ppm(img, path, exposure: float = 1.0) -> None:
    """Binary P6, 8-bit, gamma 2.2 applied to clamped linear values."""
    img = _check_image(img)
    enc = np.clip(img * exposure, 0.0, 1.0) ** (1.0 / GAMMA)
    data = np.round(enc * 255.0).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def _header_tokens(raw: bytes, count: int, path):
    """First ``count`` whitespace-separated tokens and the payload offset.

    Exactly one whitespace byte separates the last token from the payload.
    """
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[i:j])
        i = j
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """8-bit P6 pixels as ``uint8`` array (no gamma decoding)."""
    raw = Path(path).read_bytes()
    parts, off = _header_tokens(raw, 4, path)
    if parts[0] != b"P6" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(raw[off: off + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3)


def write_pfm(img, path) -> None:
    """Portable float map, little-endian, rows stored bottom to top."""
    img = _check_image(img)
    h, w = img.shape[:2]
    header = f"PF\n{w} {h}\n-1.0\n".encode()
    Path(path).write_bytes(header + img[::-1].astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts, off = _header_tokens(raw, 4, path)
    if parts[0] != b"PF":
        raise ValueError(f"{path}: not a colour PFM file")
    try:
        w, h, scale = int(parts[1]), int(parts[2]), float(parts[3])
    except ValueError:
        raise ValueError(f"{path}: malformed PFM header") from None
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw[off: off + w * h * 12], dtype=dtype)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3)[::-1].astype(np.float64)

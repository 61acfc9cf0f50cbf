"""Deployable reflectance bundle: evaluation, neural texture, clustering, storage.

A :class:`NeuBrdfModel` answers ``(wi, wo[, uv]) -> rgb`` by blending
hard-indexed codebook primitives at the corners of the two hemisphere grids,
optionally appending a bilinearly sampled neural texture, and decoding the
result with the small MLP.
"""
from __future__ import annotations

import hashlib
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mlp as _mlp
from .brdf_data import MerlTable, descriptor_table, isotropic_reparam
from .healpix import SphereCoord
from .mlp import MlpParams
from .sphgrid import Codebook, Hemisphere, SphericalIndexGrid, apply_keep_mask

__all__ = [
    "ModelFormatError",
    "NeuralTexture",
    "NeuBrdfModel",
    "MaterialCluster",
    "texture_lookup",
    "decode_output",
    "encode_target",
    "cluster_materials",
    "save",
    "load",
    "save_codebook",
    "load_codebook",
    "codebook_id",
    "section_sizes",
    "benchmark_stages",
]

MAGIC = b"NBRD"
CODEBOOK_MAGIC = b"NBCB"
VERSION = 1
# magic, version, nside, k, b, flags, tex h/w/c, prune map bytes, name/id lengths
_HEADER = struct.Struct("<4sHIHBBIIHIHH")
_CB_HEADER = struct.Struct("<4sHBHH")

FLAG_ISOTROPIC = 1
FLAG_LOG1P = 2
FLAG_SHARED = 4
FLAG_DENSE = 8
FLAG_TEXTURE = 16

TRANSFORMS = ("log1p", "none")
EVAL_CHUNK = 1 << 18


class ModelFormatError(ValueError):
    """Corrupt, truncated, or incompatible model/codebook file."""


# -------------------------------------------------------------- transforms
def decode_output(y: np.ndarray, transform: str = "log1p") -> np.ndarray:
    """Network output to non-negative reflectance."""
    if transform == "log1p":
        return np.maximum(np.expm1(y), 0.0)
    if transform == "none":
        return np.maximum(y, 0.0)
    raise ValueError(f"unknown output transform {transform!r}")


def encode_target(rgb: np.ndarray, transform: str = "log1p") -> np.ndarray:
    if transform == "log1p":
        return np.log1p(rgb)
    if transform == "none":
        return np.asarray(rgb)
    raise ValueError(f"unknown output transform {transform!r}")


# ----------------------------------------------------------------- texture
@dataclass
class NeuralTexture:
    """Trainable ``(h, w, c)`` feature image sampled bilinearly at ``uv``.

    ``u`` runs along the width and ``v`` along the height; texel ``(i, j)``
    is centred at ``((j + 0.5) / w, (i + 0.5) / h)``.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError("texture must have shape (h, w, c) with all sizes >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("texture values must be finite")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @classmethod
    def initial(cls, shape, rng=None, scale: float = 1e-2, dtype=np.float64) -> "NeuralTexture":
        rng = np.random.default_rng(rng)
        return cls(rng.uniform(-scale, scale, size=tuple(shape)).astype(dtype))

    def lookup(self, uv) -> np.ndarray:
        return texture_lookup(uv, self)

    def lookup_backward(self, uv, upstream: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(upstream * lookup(uv))`` with respect to the texels."""
        (i0, i1, fy), (j0, j1, fx) = _bilinear_taps(uv, self.values.shape)
        h, w, c = self.values.shape
        grad = np.zeros((h * w, c), dtype=np.result_type(self.values, upstream))
        g = np.asarray(upstream)
        for ii, jj, wt in ((i0, j0, (1 - fy) * (1 - fx)), (i0, j1, (1 - fy) * fx),
                           (i1, j0, fy * (1 - fx)), (i1, j1, fy * fx)):
            flat = ii * w + jj
            for ch in range(c):
                grad[:, ch] += np.bincount(flat, weights=wt * g[:, ch], minlength=h * w)
        return grad.reshape(h, w, c)


def _bilinear_taps(uv, shape):
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(uv)):
        raise ValueError("uv must be finite")
    uv = np.clip(uv, 0.0, 1.0)
    h, w = shape[0], shape[1]

    def axis(t, size):
        x = np.clip(t * size - 0.5, 0.0, size - 1.0)
        lo = np.minimum(np.floor(x).astype(np.int64), max(size - 2, 0))
        hi = np.minimum(lo + 1, size - 1)
        return lo, hi, x - lo

    return axis(uv[:, 1], h), axis(uv[:, 0], w)


def texture_lookup(uv, texture: NeuralTexture) -> np.ndarray:
    """Bilinear sample with ``uv`` clamped to the unit square, shape ``(N, c)``."""
    (i0, i1, fy), (j0, j1, fx) = _bilinear_taps(uv, texture.values.shape)
    t = texture.values
    fx, fy = fx[:, None], fy[:, None]
    top = t[i0, j0] * (1 - fx) + t[i0, j1] * fx
    bot = t[i1, j0] * (1 - fx) + t[i1, j1] * fx
    return top * (1 - fy) + bot * fy


# ------------------------------------------------------------------- model
class NeuBrdfModel:
    """Hemisphere index grids + codebook + MLP (+ optional neural texture).

    Args:
        grid: per-vertex codebook indices (and prune state).
        codebook: the primitive table; ``None`` for a non-quantized model,
            which stores ``dense_features`` directly at the vertices.
        mlp: decoder parameters; input width ``2k`` (+ texture channels).
        texture: optional :class:`NeuralTexture`.
        name: material name stored in the container.
        isotropic: reparameterize directions before querying.
        output_transform: ``"log1p"`` (network predicts ``log(1 + rho)``) or
            ``"none"``.
        shared_codebook_id: set when the codebook lives in a sidecar file.
    """

    def __init__(self, grid: SphericalIndexGrid, codebook: Codebook | None, mlp: MlpParams,
                 texture: NeuralTexture | None = None, *, name: str = "",
                 isotropic: bool = False, output_transform: str = "log1p",
                 shared_codebook_id: str | None = None,
                 dense_features: np.ndarray | None = None):
        if output_transform not in TRANSFORMS:
            raise ValueError(f"unknown output transform {output_transform!r}")
        if (codebook is None) == (dense_features is None):
            raise ValueError("give exactly one of a codebook or dense vertex features")
        if codebook is not None:
            if codebook.bitwidth != grid.bitwidth:
                raise ValueError("codebook size does not match the grid's bit width")
            k = codebook.dim
        else:
            dense_features = np.asarray(dense_features)
            if dense_features.ndim != 2 or dense_features.shape[0] != grid.size:
                raise ValueError("dense features must have shape (2n, k)")
            k = dense_features.shape[1]
        c = texture.channels if texture is not None else 0
        if mlp.in_dim != 2 * k + c:
            raise ValueError(f"MLP input width {mlp.in_dim} != 2k + c = {2 * k + c}")
        if shared_codebook_id is not None and codebook is None:
            raise ValueError("a shared model needs a codebook")
        self.grid = grid
        self.codebook = codebook
        self.dense_features = dense_features
        self.mlp = mlp
        self.texture = texture
        self.name = name
        self.isotropic = bool(isotropic)
        self.output_transform = output_transform
        self.shared_codebook_id = shared_codebook_id

    def __repr__(self) -> str:
        kind = "dense" if self.codebook is None else f"b={self.bitwidth}"
        tex = f", texture={self.texture.shape}" if self.texture is not None else ""
        return f"NeuBrdfModel({self.name!r}, nside={self.nside}, k={self.k}, {kind}{tex})"

    @property
    def nside(self) -> int:
        return self.grid.nside

    @property
    def k(self) -> int:
        return self.codebook.dim if self.codebook is not None else self.dense_features.shape[1]

    @property
    def bitwidth(self) -> int:
        return self.grid.bitwidth

    @property
    def quantized(self) -> bool:
        return self.codebook is not None

    def feature_table(self) -> np.ndarray:
        """Per-position primitive vectors, shape ``(2n, k)``."""
        if self.codebook is None:
            return self.dense_features
        return self.codebook.entries[self.grid.indices]

    def _prepare(self, wi: SphereCoord, wo: SphereCoord, uv):
        if len(wi) != len(wo):
            raise ValueError("wi and wo must have the same length")
        if (uv is None) != (self.texture is None):
            raise ValueError("uv must be given exactly when the model has a texture")
        if uv is not None:
            uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
            if len(uv) != len(wi):
                raise ValueError("uv count differs from direction count")
        if self.isotropic:
            wi, wo = isotropic_reparam(wi, wo)
        return wi, wo, uv

    def features(self, wi: SphereCoord, wo: SphereCoord, uv=None) -> np.ndarray:
        """Runtime MLP input ``[north(wi), south(flip(wo))(, texture(uv))]``."""
        wi, wo, uv = self._prepare(wi, wo, uv)
        return self._features(wi, wo, uv, self.pixel_tables())

    def pixel_tables(self, table=None) -> dict:
        """Runtime feature of every pixel in each half, shape ``(pixels, k)``.

        Runtime weights are ``1/4`` per corner, so a query's grid feature
        depends only on its pixel; pruned-away pixels map to zero.
        """
        table = self.feature_table() if table is None else table
        out = {}
        for hemi in Hemisphere:
            pos = self.grid.corner_pos[hemi]
            feats = table[np.maximum(pos, 0)]
            feats[pos[:, 0] < 0] = 0
            out[hemi] = feats.sum(axis=1) * table.dtype.type(0.25)
        return out

    def _features(self, wi, wo, uv, tables):
        parts = []
        for hemi, dirs in ((Hemisphere.NORTH, wi), (Hemisphere.SOUTH, wo.flip())):
            pix, _ = self.grid.locate(dirs, hemi)
            parts.append(tables[hemi][pix])
        if uv is not None:
            parts.append(texture_lookup(uv, self.texture).astype(parts[0].dtype))
        return np.concatenate(parts, axis=1)

    def eval(self, wi: SphereCoord, wo: SphereCoord, uv=None) -> np.ndarray:
        """Reflectance ``(N, 3)``; always non-negative."""
        wi, wo, uv = self._prepare(wi, wo, uv)
        table = self.pixel_tables()
        out = np.empty((len(wi), 3), dtype=np.float64)
        for s in range(0, len(wi), EVAL_CHUNK):
            sl = slice(s, s + EVAL_CHUNK)
            x = self._features(wi[sl], wo[sl], None if uv is None else uv[sl], table)
            out[sl] = decode_output(_mlp.forward(x, self.mlp), self.output_transform)
        return out

    def copy(self) -> "NeuBrdfModel":
        return NeuBrdfModel(
            self.grid.copy(), self.codebook, self.mlp,
            None if self.texture is None else NeuralTexture(self.texture.values.copy()),
            name=self.name, isotropic=self.isotropic, output_transform=self.output_transform,
            shared_codebook_id=self.shared_codebook_id,
            dense_features=None if self.dense_features is None else self.dense_features.copy())

    def with_keep_mask(self, keep) -> "NeuBrdfModel":
        out = self.copy()
        out.grid = apply_keep_mask(self.grid, keep)
        return out


# ---------------------------------------------------------------- clusters
@dataclass
class MaterialCluster:
    """Materials sharing one codebook and one MLP, each with its own index grid."""

    names: list[str]
    models: list[NeuBrdfModel]
    codebook_id: str = ""
    reports: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.names) != len(self.models) or not self.models:
            raise ValueError("a cluster needs one model per member name")
        first = self.models[0]
        for m in self.models[1:]:
            if (m.nside, m.k, m.bitwidth) != (first.nside, first.k, first.bitwidth):
                raise ValueError("cluster members disagree on nside/k/b")
            if m.codebook is not first.codebook or m.mlp is not first.mlp:
                raise ValueError("cluster members must share one codebook and one MLP")

    @property
    def codebook(self) -> Codebook:
        return self.models[0].codebook

    @property
    def mlp(self) -> MlpParams:
        return self.models[0].mlp

    def __len__(self) -> int:
        return len(self.models)

    def member(self, name: str) -> NeuBrdfModel:
        return self.models[self.names.index(name)]

    def storage_bytes(self) -> dict[str, int]:
        """Packed bytes: one shared codebook + MLP, plus per-member indices."""
        first = self.models[0]
        shared = 2 * first.codebook.entries.size + 2 * first.mlp.parameter_count
        exclusive = _packed_index_bytes(first.grid.size, first.bitwidth)
        return {"shared": shared, "exclusive_per_member": exclusive,
                "total": shared + len(self) * exclusive}


def _descriptor(source) -> np.ndarray:
    if isinstance(source, MerlTable) or hasattr(source, "eval"):
        table = descriptor_table(source)
    else:
        table = np.asarray(source, dtype=np.float64)
    if np.any(table < 0) or not np.all(np.isfinite(table)):
        raise ValueError("reflectance tables must be finite and non-negative")
    return np.log1p(table).ravel()


def cluster_materials(tables, m: int, seed: int = 0, max_iter: int = 300) -> np.ndarray:
    """Group materials by K-means over downsampled log-reflectance descriptors.

    Args:
        tables: MERL tables, analytic oracles, or precomputed reflectance arrays
            (all of one shape).
        m: number of clusters.
        seed: K-means seed.

    Returns:
        Integer cluster label per table, renumbered in order of first appearance.
    """
    from sklearn.cluster import KMeans

    tables = list(tables)
    if not 1 <= m <= len(tables):
        raise ValueError(f"cluster count must lie in [1, {len(tables)}]")
    desc = np.stack([_descriptor(t) for t in tables])
    if m == len(tables):
        raw = np.arange(m)
    else:
        km = KMeans(n_clusters=m, init="k-means++", n_init=1, max_iter=max_iter,
                    random_state=seed)
        raw = km.fit_predict(desc)
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(order.size, dtype=np.int64)
    relabel[order] = np.arange(order.size)
    return relabel[np.unique(raw, return_inverse=True)[1]]


# ------------------------------------------------------------ serialization
def _packed_index_bytes(count: int, b: int) -> int:
    return (count * b + 7) // 8


def _pack_indices(indices: np.ndarray, b: int) -> bytes:
    shifts = np.arange(b - 1, -1, -1, dtype=np.int64)
    bits = ((indices.astype(np.int64)[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack_indices(raw: bytes, count: int, b: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[: count * b].reshape(count, b)
    return bits.astype(np.int64) @ (1 << np.arange(b - 1, -1, -1, dtype=np.int64))


def _f16(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    h = a.astype("<f2")
    if not np.all(np.isfinite(h)):
        raise ValueError("parameters overflow 16-bit float storage")
    return h.tobytes()


def _mlp_bytes(params: MlpParams) -> bytes:
    return b"".join(_f16(a) for a in params.as_dict().values())


def codebook_id(codebook: Codebook) -> str:
    """Content hash of the fp16-rounded codebook."""
    return hashlib.sha1(_f16(codebook.entries)).hexdigest()[:16]


def section_sizes(model: NeuBrdfModel) -> dict[str, int]:
    """Byte size of every container section for ``model``."""
    n2 = model.grid.size
    name = model.name.encode()
    cid = (model.shared_codebook_id or "").encode()
    sizes = {
        "header": _HEADER.size + len(name) + len(cid),
        "prune_map": 0 if model.grid.keep_mask is None else (n2 + 7) // 8,
    }
    if model.quantized:
        sizes["indices"] = _packed_index_bytes(n2, model.bitwidth)
        sizes["codebook"] = 0 if model.shared_codebook_id else 2 * model.codebook.entries.size
    else:
        sizes["dense_features"] = 2 * model.dense_features.size
    sizes["mlp"] = 2 * model.mlp.parameter_count
    sizes["texture"] = 0 if model.texture is None else 2 * model.texture.values.size
    sizes["crc"] = 4
    sizes["total"] = sum(sizes.values())
    return sizes


def _model_bytes(model: NeuBrdfModel) -> bytes:
    flags = 0
    flags |= FLAG_ISOTROPIC if model.isotropic else 0
    flags |= FLAG_LOG1P if model.output_transform == "log1p" else 0
    flags |= FLAG_SHARED if model.shared_codebook_id else 0
    flags |= FLAG_DENSE if not model.quantized else 0
    flags |= FLAG_TEXTURE if model.texture is not None else 0
    th, tw, tc = model.texture.shape if model.texture is not None else (0, 0, 0)
    name = model.name.encode()
    cid = (model.shared_codebook_id or "").encode()
    keep = model.grid.keep_mask
    prune = b"" if keep is None else np.packbits(keep.astype(np.uint8)).tobytes()
    parts = [_HEADER.pack(MAGIC, VERSION, model.nside, model.k, model.bitwidth, flags,
                          th, tw, tc, len(prune), len(name), len(cid)), name, cid, prune]
    if model.quantized:
        parts.append(_pack_indices(model.grid.indices, model.bitwidth))
        if not model.shared_codebook_id:
            parts.append(_f16(model.codebook.entries))
    else:
        parts.append(_f16(model.dense_features))
    parts.append(_mlp_bytes(model.mlp))
    if model.texture is not None:
        parts.append(_f16(model.texture.values))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save(model: NeuBrdfModel, path, codebook_path=None) -> Path:
    """Write the container; shared models also write their codebook sidecar.

    The sidecar defaults to ``<id>.nbcb`` next to the model and is only
    written when it does not exist yet.
    """
    path = Path(path)
    path.write_bytes(_model_bytes(model))
    if model.shared_codebook_id:
        side = Path(codebook_path) if codebook_path else path.with_name(
            f"{model.shared_codebook_id}.nbcb")
        if not side.exists():
            save_codebook(model.codebook, side, model.shared_codebook_id)
    return path


def _check_crc(data: bytes, path) -> bytes:
    if len(data) < 4:
        raise ModelFormatError(f"{path}: truncated file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ModelFormatError(f"{path}: checksum mismatch")
    return body


class _Reader:
    def __init__(self, body: bytes, path):
        self.body, self.off, self.path = body, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.body):
            raise ModelFormatError(f"{self.path}: truncated section at byte {self.off}")
        out = self.body[self.off:self.off + n]
        self.off += n
        return out

    def f16(self, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(2 * count), dtype="<f2").astype(np.float32).reshape(shape)


def load(path, codebook=None) -> NeuBrdfModel:
    """Read a container written by :func:`save`.

    Args:
        codebook: for shared models, a :class:`Codebook` or sidecar path;
            by default the sidecar is looked up next to the model file.

    Raises:
        ModelFormatError: bad magic, version, checksum, or layout.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    body = _check_crc(data, path)
    r = _Reader(body, path)
    (magic, version, nside, k, b, flags, th, tw, tc, prune_len,
     name_len, id_len) = _HEADER.unpack(r.take(_HEADER.size))
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    name = r.take(name_len).decode()
    cid = r.take(id_len).decode() or None
    if nside < 1 or nside & (nside - 1):
        raise ModelFormatError(f"{path}: invalid nside {nside}")
    if not 1 <= b <= 16:
        raise ModelFormatError(f"{path}: invalid bit width {b}")
    sgrid = SphericalIndexGrid(nside, b)
    keep = None
    if prune_len:
        if prune_len != (sgrid.size + 7) // 8:
            raise ModelFormatError(f"{path}: prune map length {prune_len} does not match grid")
        bits = np.unpackbits(np.frombuffer(r.take(prune_len), dtype=np.uint8))
        keep = bits[: sgrid.size].astype(bool)
    cb, dense = None, None
    if flags & FLAG_DENSE:
        dense = r.f16((sgrid.size, k))
    else:
        idx = _unpack_indices(r.take(_packed_index_bytes(sgrid.size, b)), sgrid.size, b)
        sgrid = SphericalIndexGrid(nside, b, indices=idx, grid=sgrid.grid)
        if flags & FLAG_SHARED:
            cb = _resolve_codebook(codebook, cid, path)
            if (cb.bitwidth, cb.dim) != (b, k):
                raise ModelFormatError(f"{path}: shared codebook shape mismatch")
        else:
            cb = Codebook(r.f16((2 ** b, k)))
    c = tc if flags & FLAG_TEXTURE else 0
    in_dim = 2 * k + c
    shapes = [(in_dim, _mlp.HIDDEN), (_mlp.HIDDEN,), (_mlp.HIDDEN, _mlp.HIDDEN), (_mlp.HIDDEN,),
              (_mlp.HIDDEN, _mlp.OUT), (_mlp.OUT,)]
    params = MlpParams(*(r.f16(s) for s in shapes))
    tex = NeuralTexture(r.f16((th, tw, tc))) if flags & FLAG_TEXTURE else None
    if r.off != len(body):
        raise ModelFormatError(f"{path}: {len(body) - r.off} trailing bytes")
    if keep is not None:
        sgrid = apply_keep_mask(sgrid, keep)
    return NeuBrdfModel(sgrid, cb, params, tex, name=name,
                        isotropic=bool(flags & FLAG_ISOTROPIC),
                        output_transform="log1p" if flags & FLAG_LOG1P else "none",
                        shared_codebook_id=cid if flags & FLAG_SHARED else None,
                        dense_features=dense)


def _resolve_codebook(codebook, cid: str, path: Path) -> Codebook:
    if isinstance(codebook, Codebook):
        return codebook
    if codebook is not None:
        cb, found = load_codebook(codebook)
        if found != cid:
            raise ModelFormatError(f"{codebook}: codebook id {found} != expected {cid}")
        return cb
    for cand in [path.with_name(f"{cid}.nbcb"), *sorted(path.parent.glob("*.nbcb")),
                 *sorted(path.parent.glob("*.cbk"))]:
        if cand.exists():
            try:
                cb, found = load_codebook(cand)
            except ModelFormatError:
                continue
            if found == cid:
                return cb
    raise ModelFormatError(f"{path}: shared codebook {cid} not found next to the model")


def save_codebook(codebook: Codebook, path, cid: str | None = None) -> str:
    """Write a sidecar codebook file; returns its id."""
    cid = cid or codebook_id(codebook)
    raw = cid.encode()
    body = _CB_HEADER.pack(CODEBOOK_MAGIC, VERSION, codebook.bitwidth, codebook.dim,
                           len(raw)) + raw + _f16(codebook.entries)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return cid


def load_codebook(path) -> tuple[Codebook, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    data = path.read_bytes()
    if data[:4] != CODEBOOK_MAGIC:
        raise ModelFormatError(f"{path}: not a codebook file (bad magic)")
    body = _check_crc(data, path)
    r = _Reader(body, path)
    _, version, b, k, id_len = _CB_HEADER.unpack(r.take(_CB_HEADER.size))
    if version != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    cid = r.take(id_len).decode()
    cb = Codebook(r.f16((2 ** b, k)))
    if r.off != len(body):
        raise ModelFormatError(f"{path}: trailing bytes")
    return cb, cid


# --------------------------------------------------------------- benchmark
def benchmark_stages(model: NeuBrdfModel, wi: SphereCoord, wo: SphereCoord,
                     chunk: int = EVAL_CHUNK) -> dict[str, float]:
    """Seconds spent in pixel lookup, grid+codebook gather, and the MLP.

    ``total`` is the wall time of the whole staged pass, so the three stages
    plus loop overhead add up to it.
    """
    g = model.grid
    t_pix = t_gather = t_mlp = 0.0
    start = time.perf_counter()
    if model.isotropic:
        wi, wo = isotropic_reparam(wi, wo)
    t0 = time.perf_counter()
    tables = model.pixel_tables()
    t_gather += time.perf_counter() - t0
    for s in range(0, len(wi), chunk):
        sl = slice(s, s + chunk)
        t0 = time.perf_counter()
        pix = []
        for hemi, dirs in ((Hemisphere.NORTH, wi[sl]), (Hemisphere.SOUTH, wo[sl].flip())):
            pix.append(g.grid.ang2pix(g._clamp_theta(dirs.theta, hemi), dirs.phi))
        t1 = time.perf_counter()
        x = np.concatenate([tables[Hemisphere.NORTH][pix[0]], tables[Hemisphere.SOUTH][pix[1]]],
                           axis=1)
        t2 = time.perf_counter()
        decode_output(_mlp.forward(x, model.mlp), model.output_transform)
        t3 = time.perf_counter()
        t_pix += t1 - t0
        t_gather += t2 - t1
        t_mlp += t3 - t2
    total = time.perf_counter() - start
    return {"ang2pix": t_pix, "gather": t_gather, "mlp": t_mlp, "total": total}

"""Joint optimisation of codebook, soft indices, MLP and neural texture.

The forward pass indexes the codebook with the hard ``argmax`` of the soft
logits; the backward pass differentiates the tempered softmax blend instead
(straight-through). One :class:`Adam` instance updates every trainable
tensor. Several materials can be trained against one shared codebook and MLP
by stacking their logits; positions of member ``j`` are offset by ``j * 2n``.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import mlp as _mlp
from .brdf_data import BidirSamples, isotropic_reparam
from .mlp import MlpParams
from .model import (MaterialCluster, NeuBrdfModel, NeuralTexture, codebook_id, decode_output,
                    encode_target, TRANSFORMS)
from .sphgrid import Codebook, Hemisphere, Mode, SphericalIndexGrid, hemi_corners, softmax

__all__ = [
    "NumericalError",
    "ModelConfig",
    "TrainConfig",
    "TrainReport",
    "Adam",
    "Trainer",
    "temperature",
    "learning_rate",
    "loss",
    "init_model",
    "train_step",
    "fit",
    "fit_shared",
]

LOSSES = ("log_l1", "log_l2", "l1", "l2")
LOGIT_INIT_SCALE = 1e-2
# near-zero codebook entries make every vertex feature equal to the codebook
# mean and training stalls there, so entries start well separated
CODEBOOK_INIT_SCALE = 1.0
DENSE_INIT_SCALE = 1e-4


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


# ------------------------------------------------------------------ configs
def _parse_value(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        items = [s for s in raw.replace(",", " ").split() if s]
        return tuple(float(s) if "." in s or "e" in s.lower() else int(s) for s in items)
    if like is None and raw.strip().lower() in ("", "none"):
        return None
    return raw.strip()


class _KeyValueConfig:
    @classmethod
    def from_mapping(cls, values: dict):
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown {cls.__name__} key {key!r}")
            kwargs[key] = _parse_value(raw, getattr(defaults, key)) if isinstance(raw, str) else raw
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, section: str | None = None):
        """Parse ``key = value`` lines; ``#`` starts a comment.

        Keys that belong to other config classes are ignored, so one file may
        hold both model and training settings.
        """
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key.replace("-", "_") in known:
                values[key] = raw
        return cls.from_mapping(values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ModelConfig(_KeyValueConfig):
    """Architecture of a model to be trained.

    ``texture_shape`` is ``(h, w, c)`` for spatially varying data.
    ``quantize=False`` stores free ``k``-vectors at every vertex instead of
    codebook indices (the no-codebook reference).
    """

    nside: int = 64
    k: int = 16
    bitwidth: int = 9
    quantize: bool = True
    isotropic: bool = False
    texture_shape: tuple | None = None
    output_transform: str = "log1p"

    def __post_init__(self):
        if self.nside < 1 or self.nside & (self.nside - 1):
            raise ValueError("nside must be a power of two")
        if self.k < 1 or not 1 <= self.bitwidth <= 16:
            raise ValueError("need k >= 1 and 1 <= bitwidth <= 16")
        if self.output_transform not in TRANSFORMS:
            raise ValueError(f"output transform must be one of {TRANSFORMS}")
        if self.texture_shape is not None:
            shape = tuple(int(s) for s in self.texture_shape)
            if len(shape) != 3 or min(shape) < 1:
                raise ValueError("texture_shape must be (h, w, c) with sizes >= 1")
            object.__setattr__(self, "texture_shape", shape)


@dataclass(frozen=True)
class TrainConfig(_KeyValueConfig):
    """Optimisation hyperparameters.

    The learning rate is multiplied by ``lr_decay`` at every milestone
    (given as fractions of ``epochs``). The temperature falls linearly from
    ``tau_start`` to ``tau_min`` over the first ``tau_anneal_fraction`` of
    the epochs.
    """

    epochs: int = 30
    batch_size: int = 2 ** 14
    lr: float = 1e-2
    lr_milestones: tuple = (0.6, 0.85)
    lr_decay: float = 0.5
    tau_start: float = 1.0
    tau_min: float = 0.5
    tau_anneal_fraction: float = 0.8
    loss: str = "log_l1"
    seed: int = 0
    dtype: str = "float32"
    train_codebook: bool = True
    train_mlp: bool = True
    train_indices: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not self.tau_start >= self.tau_min > 0:
            raise ValueError("need tau_start >= tau_min > 0")
        if not 0 < self.tau_anneal_fraction <= 1:
            raise ValueError("tau_anneal_fraction must lie in (0, 1]")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        object.__setattr__(self, "lr_milestones", tuple(float(m) for m in self.lr_milestones))


@dataclass
class TrainReport:
    loss_trace: list[float] = field(default_factory=list)
    churn_trace: list[float] = field(default_factory=list)
    final_mse: float = float("nan")
    heldout_mse: float | None = None
    heldout_log_mae: float | None = None
    wall_clock: float = 0.0
    steps: int = 0


# ---------------------------------------------------------------- schedules
def temperature(epoch: int, config: TrainConfig) -> float:
    """Linear anneal from ``tau_start`` to ``tau_min``, then constant."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    end = config.tau_anneal_fraction * config.epochs
    if epoch >= end:
        return config.tau_min
    return config.tau_start + (config.tau_min - config.tau_start) * epoch / end


def learning_rate(epoch: int, config: TrainConfig) -> float:
    passed = sum(epoch >= m * config.epochs for m in config.lr_milestones)
    return config.lr * config.lr_decay ** passed


# -------------------------------------------------------------------- loss
def loss(pred, target, kind: str = "log_l1") -> float:
    """Reflectance error averaged over samples and channels.

    ``log_*`` variants compare ``log(1 + x)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(target))):
        raise ValueError("loss inputs must be finite")
    if np.any(target < 0):
        raise ValueError("targets must be non-negative")
    if kind.startswith("log_"):
        if np.any(pred <= -1):
            raise ValueError("log-domain loss needs predictions above -1")
        r = np.log1p(pred) - np.log1p(target)
    elif kind in ("l1", "l2"):
        r = pred - target
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(np.mean(np.abs(r)) if kind.endswith("l1") else np.mean(r * r))


def _loss_and_grad(y: np.ndarray, target: np.ndarray, kind: str, transform: str):
    """Loss of raw network output ``y`` and its gradient with respect to ``y``."""
    size = y.size
    if kind.startswith("log_"):
        if transform == "log1p":
            r, dr = y - np.log1p(target), 1.0
        else:
            p = np.maximum(y, -1 + 1e-6)
            r, dr = np.log1p(p) - np.log1p(target), 1.0 / (1.0 + p)
    else:
        if transform == "log1p":
            r, dr = np.expm1(y) - target, np.exp(y)
        else:
            r, dr = y - target, 1.0
    if kind.endswith("l1"):
        return float(np.mean(np.abs(r))), np.sign(r) * dr / size
    return float(np.mean(r * r)), 2.0 * r * dr / size


# -------------------------------------------------------------------- adam
class Adam:
    """Canonical Adam with bias correction, one moment pair per tensor.

    ``step`` accepts dense gradients, or ``(rows, values)`` pairs for tensors
    whose gradient is non-zero on a few rows only; both give the same update.
    """

    def __init__(self, params: dict[str, np.ndarray], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, g in grads.items():
            p, m, v = self.params[name], self.m[name], self.v[name]
            m *= self.b1
            v *= self.b2
            if isinstance(g, tuple):
                rows, vals = g
                m[rows] += (1.0 - self.b1) * vals
                v[rows] += (1.0 - self.b2) * vals * vals
            else:
                m += (1.0 - self.b1) * g
                v += (1.0 - self.b2) * g * g
            denom = np.sqrt(v / c2)
            denom += self.eps
            p -= (lr / c1) * m / denom


# ------------------------------------------------------------------ engine
def init_model(model_config: ModelConfig, rng=None, dtype="float32",
               name: str = "") -> NeuBrdfModel:
    """Fresh model in training state (soft logits attached)."""
    rng = np.random.default_rng(rng)
    mc = model_config
    sgrid = SphericalIndexGrid(mc.nside, mc.bitwidth)
    c = mc.texture_shape[2] if mc.texture_shape else 0
    if mc.quantize:
        sgrid.set_soft_logits(
            rng.normal(0.0, LOGIT_INIT_SCALE, size=(sgrid.size, 2 ** mc.bitwidth)).astype(dtype))
        cb = Codebook.initial(mc.bitwidth, mc.k, rng, CODEBOOK_INIT_SCALE, dtype=dtype)
        dense = None
    else:
        cb = None
        dense = rng.uniform(-DENSE_INIT_SCALE, DENSE_INIT_SCALE,
                            size=(sgrid.size, mc.k)).astype(dtype)
    params = MlpParams.initial(2 * mc.k + c, rng, dtype)
    tex = NeuralTexture.initial(mc.texture_shape, rng, dtype=dtype) if mc.texture_shape else None
    return NeuBrdfModel(sgrid, cb, params, tex, name=name, isotropic=mc.isotropic,
                        output_transform=mc.output_transform, dense_features=dense)


@dataclass
class _Prepared:
    """Per-sample corner positions and training weights, computed once per fit."""

    pos: np.ndarray      # (N, 8) stacked positions, member offset included
    weights: np.ndarray  # (N, 8)
    target: np.ndarray   # (N, 3)
    uv: np.ndarray | None

    def __len__(self) -> int:
        return len(self.target)

    def take(self, idx) -> "_Prepared":
        return _Prepared(self.pos[idx], self.weights[idx], self.target[idx],
                         None if self.uv is None else self.uv[idx])


class Trainer:
    """Holds the trainable tensors of one or more members plus the optimiser.

    All members share the codebook (or nothing, when non-quantized), the MLP,
    and the texture; each member owns ``2n`` rows of the stacked logits.
    """

    def __init__(self, models: list[NeuBrdfModel], config: TrainConfig):
        if not models:
            raise ValueError("need at least one model")
        first = models[0]
        for m in models:
            if (m.nside, m.k, m.bitwidth, m.quantized) != (
                    first.nside, first.k, first.bitwidth, first.quantized):
                raise ValueError("members disagree on nside/k/b/quantization")
            if m.quantized and m.grid.soft_logits is None:
                raise ValueError("model is not in training state (no soft logits)")
            if m.isotropic != first.isotropic or m.output_transform != first.output_transform:
                raise ValueError("members disagree on isotropy or output transform")
            if (m.texture is None) != (first.texture is None):
                raise ValueError("members disagree on texture presence")
        self.models = models
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.rows = first.grid.size
        dt = self.dtype
        p: dict[str, np.ndarray] = {}
        if first.quantized:
            p["logits"] = np.concatenate([m.grid.soft_logits for m in models]).astype(dt)
            p["codebook"] = first.codebook.entries.astype(dt, copy=True)
        else:
            p["features"] = np.concatenate([m.dense_features for m in models]).astype(dt)
        for k, v in first.mlp.as_dict().items():
            p[k] = v.astype(dt, copy=True)
        if first.texture is not None:
            p["texture"] = first.texture.values.astype(dt, copy=True)
        self.params = p
        self.trainable = self._trainable_names()
        self.optimizer = Adam({k: p[k] for k in self.trainable})
        self.indices = np.argmax(p["logits"], axis=1) if "logits" in p else None
        self.transform = first.output_transform
        self.isotropic = first.isotropic

    def _trainable_names(self) -> list[str]:
        cfg = self.config
        names = []
        if "logits" in self.params and cfg.train_indices:
            names.append("logits")
        if "codebook" in self.params and cfg.train_codebook:
            names.append("codebook")
        if "features" in self.params and cfg.train_indices:
            names.append("features")
        if cfg.train_mlp:
            names += list(_mlp.PARAM_NAMES)
            if "texture" in self.params:
                names.append("texture")
        return names

    # ---------------------------------------------------------- data prep
    def prepare(self, datasets: list[BidirSamples]) -> _Prepared:
        if len(datasets) != len(self.models):
            raise ValueError("need one dataset per member")
        parts = []
        for j, (model, data) in enumerate(zip(self.models, datasets)):
            if len(data) == 0:
                raise ValueError("empty training set")
            if (data.uv is None) != (model.texture is None):
                raise ValueError("uv must be present exactly when the model has a texture")
            wi, wo = data.wi, data.wo
            if self.isotropic:
                wi, wo = isotropic_reparam(wi, wo)
            pi, wti = hemi_corners(model.grid, wi, Hemisphere.NORTH, Mode.TRAINING)
            po, wto = hemi_corners(model.grid, wo.flip(), Hemisphere.SOUTH, Mode.TRAINING)
            pos = np.concatenate([pi, po], axis=1) + j * self.rows
            w = np.concatenate([wti, wto], axis=1)
            parts.append(_Prepared(pos, w, data.rgb, data.uv))
        return _Prepared(np.concatenate([p.pos for p in parts]),
                         np.concatenate([p.weights for p in parts]).astype(self.dtype),
                         np.concatenate([p.target for p in parts]),
                         None if parts[0].uv is None else np.concatenate([p.uv for p in parts]))

    # ------------------------------------------------------- forward/back
    def _table_rows(self, uniq: np.ndarray, tau: float, soft: bool):
        """Feature rows for the unique positions, plus the softmax if needed."""
        p = self.params
        if "features" in p:
            return p["features"][uniq], None
        s = softmax(p["logits"][uniq], tau) if (soft or "logits" in self.trainable) else None
        if soft:
            return s @ p["codebook"], s
        return p["codebook"][self.indices[uniq]], s

    def loss_and_grads(self, batch: _Prepared, tau: float, soft: bool = False):
        """Batch loss and gradients of every parameter tensor.

        ``soft=False`` is the straight-through pass: hard codebook rows in the
        forward pass, softmax-blend derivatives in the backward pass. With
        ``soft=True`` the forward pass uses the blend as well, so the returned
        gradients are exact derivatives of the returned loss. Gradients of the
        logits or dense features come back as ``(rows, values)`` pairs.
        """
        if len(batch) == 0:
            raise ValueError("empty batch")
        p = self.params
        k = p["codebook"].shape[1] if "codebook" in p else p["features"].shape[1]
        uniq, inv = np.unique(batch.pos, return_inverse=True)
        inv = inv.reshape(batch.pos.shape)
        rows, s = self._table_rows(uniq, tau, soft)
        feats = rows[inv]                                    # (B, 8, k)
        wf = batch.weights[..., None] * feats
        x = wf.reshape(len(batch), 2, 4, k).sum(axis=2).reshape(len(batch), 2 * k)
        if "texture" in p:
            tex = NeuralTexture(p["texture"])
            x = np.concatenate([x, tex.lookup(batch.uv).astype(x.dtype)], axis=1)
        params = MlpParams(*(p[n] for n in _mlp.PARAM_NAMES))
        y, cache = _mlp.forward(x, params, return_cache=True)
        value, dy = _loss_and_grad(y, batch.target, self.config.loss, self.transform)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value}")
        grads, gx = _mlp.backward(x, params, dy.astype(y.dtype), cache)
        if "texture" in p:
            grads["texture"] = tex.lookup_backward(batch.uv, gx[:, 2 * k:])
        gf = gx[:, :2 * k].reshape(len(batch), 2, 1, k)
        contrib = (batch.weights.reshape(len(batch), 2, 4, 1) * gf).reshape(-1, k)
        flat = inv.ravel()
        g_rows = np.empty((uniq.size, k), dtype=contrib.dtype)
        for c in range(k):
            g_rows[:, c] = np.bincount(flat, weights=contrib[:, c], minlength=uniq.size)
        if "features" in p:
            grads["features"] = (uniq, g_rows)
        else:
            if s is None:
                s = softmax(p["logits"][uniq], tau)
            grads["codebook"] = s.T @ g_rows
            gd = g_rows @ p["codebook"].T
            dc = s * (gd - np.sum(s * gd, axis=1, keepdims=True)) / tau
            grads["logits"] = (uniq, dc)
        return value, grads

    def step(self, batch: _Prepared, tau: float, lr: float) -> float:
        value, grads = self.loss_and_grads(batch, tau)
        self.optimizer.step({k: grads[k] for k in self.trainable}, lr)
        for name in self.trainable:
            if name in ("logits", "features", "codebook"):
                rows = grads[name][0] if isinstance(grads[name], tuple) else slice(None)
                bad = not np.all(np.isfinite(self.params[name][rows]))
            else:
                bad = not np.all(np.isfinite(self.params[name]))
            if bad:
                raise NumericalError(f"non-finite values in {name} after update")
        if "logits" in self.trainable:
            self.indices = np.argmax(self.params["logits"], axis=1)
        return value

    # ------------------------------------------------------------ export
    def export(self, keep_logits: bool = False) -> list[NeuBrdfModel]:
        """Current state as models sharing one codebook/MLP/texture object each."""
        p = self.params
        params = MlpParams(*(p[n].copy() for n in _mlp.PARAM_NAMES))
        first = self.models[0]
        if "codebook" in p:
            if "codebook" in self.trainable or first.codebook.entries.dtype != self.dtype:
                cb = Codebook(p["codebook"].copy())
            else:
                cb = first.codebook
        tex = NeuralTexture(p["texture"].copy()) if "texture" in p else None
        out = []
        for j, m in enumerate(self.models):
            sl = slice(j * self.rows, (j + 1) * self.rows)
            grid = m.grid.copy()
            if "logits" in p:
                grid.indices = self.indices[sl].astype(np.int64)
                grid.soft_logits = p["logits"][sl].copy() if keep_logits else None
                out.append(NeuBrdfModel(grid, cb, params, tex, name=m.name,
                                        isotropic=m.isotropic,
                                        output_transform=m.output_transform,
                                        shared_codebook_id=m.shared_codebook_id))
            else:
                out.append(NeuBrdfModel(grid, None, params, tex, name=m.name,
                                        isotropic=m.isotropic,
                                        output_transform=m.output_transform,
                                        dense_features=p["features"][sl].copy()))
        return out

    def run(self, datasets: list[BidirSamples], seed: int, log=None) -> TrainReport:
        """Epoch loop over shuffled minibatches of the pooled member data."""
        cfg = self.config
        data = self.prepare(datasets)
        rng = np.random.default_rng(seed)
        report = TrainReport()
        start = time.perf_counter()
        for epoch in range(cfg.epochs):
            tau = temperature(epoch, cfg)
            lr = learning_rate(epoch, cfg)
            before = None if self.indices is None else self.indices.copy()
            perm = rng.permutation(len(data))
            total = 0.0
            for s in range(0, len(data), cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                total += self.step(data.take(idx), tau, lr) * len(idx)
                report.steps += 1
            report.loss_trace.append(total / len(data))
            report.churn_trace.append(
                0.0 if before is None else float(np.mean(before != self.indices)))
            if log is not None:
                log(f"epoch {epoch + 1}/{cfg.epochs} loss {report.loss_trace[-1]:.6g} "
                    f"tau {tau:.3f} lr {lr:.3g} churn {report.churn_trace[-1]:.4f}")
        report.wall_clock = time.perf_counter() - start
        return report


def train_step(batch: BidirSamples, model: NeuBrdfModel, config: TrainConfig,
               epoch: int) -> tuple[NeuBrdfModel, float]:
    """One straight-through Adam step on ``batch``.

    The optimiser state travels with the returned model, so repeated calls
    continue one Adam trajectory.

    Raises:
        ValueError: empty batch or a model without soft logits.
        NumericalError: non-finite loss or parameters.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    trainer = getattr(model, "_trainer", None)
    if trainer is None or trainer.config != config:
        trainer = Trainer([model], config)
    data = trainer.prepare([batch])
    value = trainer.step(data, temperature(epoch, config), learning_rate(epoch, config))
    (out,) = trainer.export(keep_logits=True)
    trainer.models = [out]
    out._trainer = trainer
    return out, value


def _evaluate(model: NeuBrdfModel, data: BidirSamples) -> tuple[float, float]:
    pred = model.eval(data.wi, data.wo, data.uv)
    mse = float(np.mean((pred - data.rgb) ** 2))
    log_mae = float(np.mean(np.abs(np.log1p(pred) - np.log1p(data.rgb))))
    return mse, log_mae


def fit(dataset: BidirSamples, model_config: ModelConfig, train_config: TrainConfig,
        heldout: BidirSamples | None = None, init: NeuBrdfModel | None = None,
        name: str = "", log=None) -> tuple[NeuBrdfModel, TrainReport]:
    """Train one material and return a deployable model plus its report.

    Args:
        dataset: training samples.
        heldout: optional samples for the report's held-out metrics.
        init: start from this model's codebook/MLP/texture (fresh logits are
            drawn when it has none); frozen tensors stay shared with it.
    """
    models, reports = _fit_members([dataset], model_config, train_config, init, [name],
                                   heldout=[heldout], log=log)
    return models[0], reports[0]


def _fit_members(datasets, model_config, train_config, init, names, heldout, log=None):
    if any(len(d) == 0 for d in datasets):
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(train_config.seed)
    dtype = train_config.dtype
    members = []
    for name in names:
        m = init_model(model_config, rng, dtype, name)
        if init is not None:
            m = _graft(m, init, model_config)
        members.append(m)
    if len(members) > 1:
        # one codebook/MLP/texture for all members
        for m in members[1:]:
            m.codebook, m.mlp, m.texture = members[0].codebook, members[0].mlp, members[0].texture
    trainer = Trainer(members, train_config)
    report = trainer.run(datasets, seed=train_config.seed + 1, log=log)
    models = trainer.export()
    reports = []
    for j, (model, data) in enumerate(zip(models, datasets)):
        r = TrainReport(list(report.loss_trace), list(report.churn_trace),
                        wall_clock=report.wall_clock, steps=report.steps)
        r.final_mse = _evaluate(model, data)[0]
        if heldout[j] is not None and len(heldout[j]):
            r.heldout_mse, r.heldout_log_mae = _evaluate(model, heldout[j])
        reports.append(r)
    return models, reports


def _graft(fresh: NeuBrdfModel, init: NeuBrdfModel, mc: ModelConfig) -> NeuBrdfModel:
    if (init.nside, init.k, init.bitwidth, init.quantized) != (
            mc.nside, mc.k, mc.bitwidth, mc.quantize):
        raise ValueError("initial model does not match the model config")
    grid = fresh.grid
    if init.grid.soft_logits is not None:
        grid.set_soft_logits(init.grid.soft_logits.copy())
    return NeuBrdfModel(grid, init.codebook, init.mlp, init.texture, name=fresh.name,
                        isotropic=init.isotropic, output_transform=init.output_transform,
                        shared_codebook_id=init.shared_codebook_id,
                        dense_features=None if init.quantized else init.dense_features.copy())


def fit_shared(datasets: list[BidirSamples], model_config: ModelConfig,
               train_config: TrainConfig, names: list[str] | None = None,
               heldout: list[BidirSamples] | None = None, log=None) -> MaterialCluster:
    """Train several materials against one codebook and one MLP.

    Batches are drawn from the pooled samples of all members, so each
    member's share of a batch is proportional to its dataset size.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("need at least one member dataset")
    if not model_config.quantize:
        raise ValueError("shared fitting needs a quantized model config")
    names = list(names) if names is not None else [f"m{j}" for j in range(len(datasets))]
    if len(names) != len(datasets):
        raise ValueError("need one name per dataset")
    heldout = list(heldout) if heldout is not None else [None] * len(datasets)
    models, reports = _fit_members(datasets, model_config, train_config, None, names,
                                   heldout=heldout, log=log)
    cid = codebook_id(models[0].codebook)
    for m in models:
        m.shared_codebook_id = cid
    return MaterialCluster(names, models, cid, reports)

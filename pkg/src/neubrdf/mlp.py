"""Tiny fully connected decoder: ``in -> 64 -> 64 -> 3`` with ReLU hidden layers.

Forward and reverse-mode passes are written out by hand for this fixed
topology; inputs are batched row-wise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["HIDDEN", "OUT", "MlpParams", "forward", "backward"]

HIDDEN = 64
OUT = 3
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    in_dim: int = field(init=False)

    def __post_init__(self):
        self.in_dim = int(self.w1.shape[0])
        expected = {
            "w1": (self.in_dim, HIDDEN), "b1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN), "b2": (HIDDEN,),
            "w3": (HIDDEN, OUT), "b3": (OUT,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def initial(cls, in_dim: int, rng=None, dtype=np.float64) -> "MlpParams":
        """Uniform init in ``+-1/sqrt(fan_in)`` for weights and biases."""
        rng = np.random.default_rng(rng)
        sizes = [(in_dim, HIDDEN), (HIDDEN, HIDDEN), (HIDDEN, OUT)]
        arrays = []
        for fan_in, fan_out in sizes:
            bound = 1.0 / np.sqrt(fan_in)
            arrays.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            arrays.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
        return cls(*arrays)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d) -> "MlpParams":
        return cls(*(np.asarray(d[name]) for name in PARAM_NAMES))

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(*(getattr(self, n).astype(dtype) for n in PARAM_NAMES))

    @property
    def parameter_count(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)


def forward(x, params: MlpParams, return_cache: bool = False):
    """Affine-ReLU-affine-ReLU-affine; ``x`` has shape ``(N, in_dim)`` or ``(in_dim,)``."""
    x = np.asarray(x)
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != {params.in_dim}")
    z1 = x @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    y = h2 @ params.w3 + params.b3
    if return_cache:
        return y, (x, z1, h1, z2, h2)
    return y


def backward(x, params: MlpParams, upstream, cache=None):
    """Gradients of ``sum(upstream * forward(x))``.

    Returns:
        ``(grads, grad_x)`` where ``grads`` maps parameter names to arrays.
    """
    upstream = np.asarray(upstream)
    if cache is None:
        y, cache = forward(x, params, return_cache=True)
        if upstream.shape != y.shape:
            raise ValueError(f"upstream shape {upstream.shape} != output {y.shape}")
    x, z1, h1, z2, h2 = cache
    if upstream.shape[-1] != OUT:
        raise ValueError("upstream must have 3 channels")
    batched = x.ndim == 2
    xs, h1s, h2s, g = (a if batched else a[None] for a in (x, h1, h2, upstream))
    z1s, z2s = (z1, z2) if batched else (z1[None], z2[None])

    gw3 = h2s.T @ g
    gb3 = g.sum(axis=0)
    gh2 = g @ params.w3.T
    gz2 = gh2 * (z2s > 0)
    gw2 = h1s.T @ gz2
    gb2 = gz2.sum(axis=0)
    gh1 = gz2 @ params.w2.T
    gz1 = gh1 * (z1s > 0)
    gw1 = xs.T @ gz1
    gb1 = gz1.sum(axis=0)
    gx = gz1 @ params.w1.T
    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return grads, (gx if batched else gx[0])

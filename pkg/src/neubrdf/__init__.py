"""Compact neural reflectance: HEALPix index grids, a primitive codebook, and a tiny MLP."""

__version__ = "0.1.0"

from .healpix import HealpixGrid, SphereCoord  # noqa: E402
from .model import MaterialCluster, NeuBrdfModel, NeuralTexture, load, save  # noqa: E402
from .sphgrid import Codebook, SphericalIndexGrid, compression_ratio  # noqa: E402
from .train import ModelConfig, TrainConfig, fit, fit_shared  # noqa: E402

__all__ = [
    "__version__",
    "HealpixGrid",
    "SphereCoord",
    "Codebook",
    "SphericalIndexGrid",
    "compression_ratio",
    "NeuBrdfModel",
    "NeuralTexture",
    "MaterialCluster",
    "ModelConfig",
    "TrainConfig",
    "fit",
    "fit_shared",
    "save",
    "load",
]

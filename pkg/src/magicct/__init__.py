"""Low-dose fan-beam CT reconstruction with unrolled networks on image and patch-graph domains.

The main entry points:

- :mod:`magicct.geometry` : scan geometry and the distance-driven projector pair
- :mod:`magicct.fbp` : filtered back-projection
- :mod:`magicct.noise` : Poisson plus electronic-noise measurement model
- :mod:`magicct.patchgraph` : patch extraction and k-NN patch graphs
- :mod:`magicct.graphconv`, :mod:`magicct.spatialconv` : the GCN and CNN modules
- :mod:`magicct.unrolled` : the unrolled network with hand-written gradients
- :mod:`magicct.training` : losses, Adam and the training loop
- :mod:`magicct.metrics`, :mod:`magicct.data` : evaluation and datasets
"""
from .errors import ConfigError, DivergenceError, FormatError, InputError, MagicError
from .fbp import fbp_reconstruct
from .geometry import ScanGeometry, back_project, desk_geometry, forward_project, paper_geometry
from .metrics import psnr, roi_stats, ssim
from .noise import DoseModel, simulate_lowdose
from .unrolled import MagicNetwork, reconstruct

__version__ = "0.1.0"

__all__ = [
    "MagicError",
    "ConfigError",
    "InputError",
    "FormatError",
    "DivergenceError",
    "ScanGeometry",
    "desk_geometry",
    "paper_geometry",
    "forward_project",
    "back_project",
    "fbp_reconstruct",
    "DoseModel",
    "simulate_lowdose",
    "MagicNetwork",
    "reconstruct",
    "psnr",
    "ssim",
    "roi_stats",
]

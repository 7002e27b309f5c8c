"""Core-readout encoding model of mouse V1 built on a vision transformer
with per-block behavioral modulation, plus the training and analysis
tooling needed to fit and inspect it on image/response datasets.
"""

from .tensor import Tensor, RngState, make_rng
from .gradcheck import grad_check

__all__ = ["Tensor", "RngState", "make_rng", "grad_check"]
__version__ = "0.1.0"

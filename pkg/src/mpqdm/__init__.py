"""Mixed-precision quantization of a toy diffusion denoiser.

Modules: ``quant`` (uniform affine quantization), ``omq`` (outlier-driven
intra-layer bit allocation), ``trd`` (time-smoothed relation distillation),
``diffusion`` (toy DDPM host), ``pipeline``/``cli`` (orchestration).
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]

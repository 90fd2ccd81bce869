"""Two-stage audio-visual sound source localization.

A visual-only network proposes where sound *could* come from (the potential
map); an audio-conditioned selection module picks the objects that are
actually sounding (the localization map).
"""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]

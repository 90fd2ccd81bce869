"""Hot metric kernels, compiled when available.

``BACKEND`` is ``"cython"`` when ``avsl._ckernels`` imported, ``"python"``
otherwise. Set ``AVSL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
ciou_sweep = _pykernels.ciou_sweep

if os.environ.get("AVSL_PURE_PYTHON") != "1":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        ciou_sweep = _ckernels.ciou_sweep
        BACKEND = "cython"

__all__ = ["BACKEND", "ciou_sweep"]

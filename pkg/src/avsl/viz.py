"""Heat-map overlays for potential and localization maps."""
from __future__ import annotations

import numpy as np
from matplotlib import colormaps

from .metrics import prediction_map


def overlay(image: np.ndarray, raw_map: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the jet-coloured, upsampled and min-max normalized map onto ``image``."""
    h, w = image.shape[:2]
    heat = prediction_map(raw_map, (h, w)).upsampled
    rgb = colormaps["jet"](heat)[..., :3] * 255.0
    out = (1.0 - alpha) * np.asarray(image, dtype=np.float64) + alpha * rgb
    return np.clip(np.round(out), 0, 255).astype(np.uint8)

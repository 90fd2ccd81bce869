"""Audio-conditioned selection: attention map, localization map, filtered projection.

Functions accept single items (``v``: K×H×W, ``s``: K) or batches
(``v``: B×K×H×W, ``s``: B×K) as tensors or array-likes.
"""
from __future__ import annotations

import torch

EPS = 1e-12


class DegenerateSoundError(ValueError):
    """Sound feature vector is all zero, so cosine attention is undefined."""


class DegenerateMapError(ValueError):
    """sum(A * P) is zero, so the localization map cannot be normalized."""


def _tensor(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def cosine_attention(v: torch.Tensor, s: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Unchecked cosine similarity between every pixel of ``v`` and ``s``."""
    s_ = s[..., :, None, None]
    dot = (v * s_).sum(dim=-3)
    norm_v = torch.linalg.vector_norm(v, dim=-3)
    norm_s = torch.linalg.vector_norm(s, dim=-1)[..., None, None]
    return dot / (norm_s * norm_v).clamp_min(eps)


def attention(v, s, eps: float = EPS) -> torch.Tensor:
    """Per-pixel cosine similarity of image features with the sound features.

    Pixels with an all-zero feature vector get 0. Raises
    :class:`DegenerateSoundError` when ``s`` is zero.
    """
    s = _tensor(s)
    v = _tensor(v, s)
    if bool((torch.linalg.vector_norm(s, dim=-1) == 0).any()):
        raise DegenerateSoundError("sound features are all zero")
    return cosine_attention(v, s, eps)


def uniform_like(p: torch.Tensor) -> torch.Tensor:
    h, w = p.shape[-2:]
    return torch.full_like(p, 1.0 / (h * w))


def localization_map(A, P, ablate_constant_p: bool = False) -> torch.Tensor:
    """``A * P`` L1-normalized over pixels; P is replaced by a constant map when ablated."""
    A = _tensor(A)
    P = _tensor(P, A)
    if ablate_constant_p:
        P = uniform_like(P)
    prod = A * P
    z = prod.sum(dim=(-2, -1), keepdim=True)
    if bool((z == 0).any()):
        raise DegenerateMapError("sum of attention times potential map is zero")
    return prod / z


def pool_features(v: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``sum_ij v[k, i, j] * alpha[i, j]`` for every channel k."""
    return (v * alpha[..., None, :, :]).sum(dim=(-2, -1))


def filtered_projection(model_or_fc, v, alpha) -> torch.Tensor:
    """Project the localization-weighted image features through the selection FC pair.

    ``model_or_fc`` is an :class:`~avsl.model.AVSLNet` or any module mapping
    K-vectors to K-vectors (used directly).
    """
    fc = getattr(model_or_fc, "select_fc", model_or_fc)
    dtype = next(fc.parameters()).dtype
    v = _tensor(v).to(dtype)
    alpha = _tensor(alpha).to(dtype)
    if v.shape[-2:] != alpha.shape[-2:]:
        raise ValueError(f"feature map {tuple(v.shape)} and localization map {tuple(alpha.shape)} disagree")
    return fc(pool_features(v, alpha))

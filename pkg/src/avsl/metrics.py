"""Consensus ground truth, cIoU/AUC, IoU, Dice and the random-prediction baseline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels

TAUS = np.round(np.linspace(0.0, 1.0, 101), 2)
DEFAULT_TAU = 0.5
OUT_SIZE = (256, 256)


def consensus_gt(boxes, M: int, H: int = 256, W: int = 256) -> np.ndarray:
    """Fraction of the ``M`` annotators whose boxes cover each pixel.

    ``boxes`` are ``(annotator, x0, y0, x1, y1)`` with exclusive upper bounds;
    several boxes of one annotator are merged before averaging.
    """
    if M < 1:
        raise ValueError("consensus ground truth needs M >= 1 annotators")
    per_annotator = np.zeros((M, H, W), dtype=bool)
    for a, x0, y0, x1, y1 in boxes:
        if not 0 <= a < M:
            raise ValueError(f"annotator id {a} outside [0, {M})")
        per_annotator[a, y0:y1, x0:x1] = True
    return per_annotator.sum(axis=0) / M


def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centres, edge-clamped (align_corners=False)
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H×W or H×W×C array."""
    x = np.asarray(x, dtype=np.float64)
    ry = _bilinear_matrix(out_hw[0], x.shape[0])
    rx = _bilinear_matrix(out_hw[1], x.shape[1])
    if x.ndim == 2:
        return ry @ x @ rx.T
    chans = np.ascontiguousarray(np.moveaxis(x, -1, 0))
    return np.moveaxis(ry @ chans @ rx.T, 0, -1)


@dataclass
class PredictionMap:
    raw: np.ndarray
    upsampled: np.ndarray


def prediction_map(raw, out_hw: tuple[int, int] = OUT_SIZE) -> PredictionMap:
    """Bilinear upsample then min-max normalize to [0, 1]; a constant map becomes 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    up = resize_bilinear(raw, out_hw)
    lo, hi = up.min(), up.max()
    if hi - lo <= 0 or raw.max() == raw.min():
        up = np.full(out_hw, 0.5)
    else:
        up = np.clip((up - lo) / (hi - lo), 0.0, 1.0)
    return PredictionMap(raw, up)


def binarize(pred, tau: float) -> np.ndarray:
    up = pred.upsampled if isinstance(pred, PredictionMap) else np.asarray(pred)
    return (up > tau).astype(np.uint8)


def ciou(G, B) -> float:
    """Consensus IoU: ``sum(G*B) / (sum(G) + sum(B where G == 0))``; 0 if both are empty."""
    G = np.asarray(G, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if G.shape != B.shape:
        raise ValueError(f"shape mismatch {G.shape} vs {B.shape}")
    denom = G.sum() + B[G == 0].sum()
    return float((G * B).sum() / denom) if denom > 0 else 0.0


def iou(G, B) -> float:
    g = np.asarray(G) > 0
    b = np.asarray(B) > 0
    union = np.count_nonzero(g | b)
    return np.count_nonzero(g & b) / union if union else 0.0


def dice(G, U) -> float:
    """``sum(G*U) / (sum(G) + sum(U))``, without the conventional factor 2."""
    G = np.asarray(G, dtype=np.float64)
    U = np.asarray(U, dtype=np.float64)
    if G.shape != U.shape:
        raise ValueError(f"shape mismatch {G.shape} vs {U.shape}")
    denom = G.sum() + U.sum()
    return float((G * U).sum() / denom) if denom > 0 else 0.0


def ciou_curve(G, pred, taus: Sequence[float] = TAUS) -> np.ndarray:
    """cIoU of one prediction at every threshold."""
    up = pred.upsampled if isinstance(pred, PredictionMap) else pred
    return kernels.ciou_sweep(G, up, np.asarray(taus, dtype=np.float64))


def auc(curve) -> float:
    """Trapezoidal area under a cIoU curve given as (tau, ciou) pairs or ciou values on TAUS."""
    c = np.asarray(curve, dtype=np.float64)
    if c.ndim == 2:
        taus, vals = c[:, 0], c[:, 1]
    else:
        taus, vals = TAUS[: len(c)], c
    return float(np.sum((taus[1:] - taus[:-1]) * (vals[1:] + vals[:-1]) / 2.0))


def random_baseline(rng: np.random.Generator, shape: tuple[int, int] = (14, 14),
                    out_hw: tuple[int, int] = OUT_SIZE) -> PredictionMap:
    """I.i.d. uniform heat map pushed through the standard post-processing."""
    return prediction_map(rng.uniform(0.0, 1.0, size=shape), out_hw)


@dataclass
class EvalReport:
    per_sample: list[tuple[str, float]]
    curve: list[tuple[float, float]]
    auc: float
    tau: float = DEFAULT_TAU
    warnings: list[str] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def ciou_at_tau(self) -> float:
        if not self.per_sample:
            return 0.0
        return float(np.mean([c for _, c in self.per_sample]))

    def to_dict(self) -> dict:
        d = {
            f"ciou@{self.tau:g}": self.ciou_at_tau,
            "auc": self.auc,
            "curve": [[t, c] for t, c in self.curve],
            "per_sample": [{"id": i, "ciou": c} for i, c in self.per_sample],
        }
        if self.warnings:
            d["warnings"] = list(self.warnings)
        if self.errors:
            d["errors"] = list(self.errors)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def evaluate(items: Iterable[tuple[str, np.ndarray, PredictionMap]], tau: float = DEFAULT_TAU,
             taus: Sequence[float] = TAUS) -> EvalReport:
    """Aggregate (id, G, prediction) triples into a report, ordered by id."""
    taus = np.asarray(taus, dtype=np.float64)
    rows = []
    for sid, G, pred in items:
        rows.append((sid, ciou_curve(G, pred, taus), float(ciou(G, binarize(pred, tau)))))
    rows.sort(key=lambda r: r[0])
    if rows:
        mean_curve = np.mean([r[1] for r in rows], axis=0)
    else:
        mean_curve = np.zeros(len(taus))
    curve = [(float(t), float(c)) for t, c in zip(taus, mean_curve)]
    return EvalReport([(r[0], r[2]) for r in rows], curve, auc(curve), tau)

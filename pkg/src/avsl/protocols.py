"""Evaluation runners: standard protocol, concat-and-localize, Type-A/B gap, saliency baseline."""
from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .data import Sample, Spectrogram, Waveform, load_manifest, preprocess_image, stft
from .metrics import EvalReport, consensus_gt, evaluate, prediction_map, random_baseline, resize_bilinear
from .model import AVSLNet, _zip_write, load_checkpoint
from .selection import DegenerateMapError, DegenerateSoundError, attention, cosine_attention, localization_map

logger = logging.getLogger(__name__)

MODES = ("localization", "potential")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ inference


class Localizer:
    """Inference wrapper producing raw 14×14 potential and localization maps."""

    def __init__(self, model: AVSLNet):
        self.model = model.eval()
        self.ablate_constant_p = bool(model.config.ablate_constant_p)
        self.dtype = next(model.parameters()).dtype

    @classmethod
    def from_checkpoint(cls, path) -> "Localizer":
        model, _ = load_checkpoint(path)
        return cls(model)

    @torch.no_grad()
    def features(self, image: np.ndarray) -> torch.Tensor:
        x = torch.as_tensor(preprocess_image(image, train_mode=False), dtype=self.dtype)
        return self.model.image_features(x[None])

    @torch.no_grad()
    def potential(self, image: np.ndarray) -> np.ndarray:
        """Visual-only potential map; never touches audio."""
        return self.model.potential_map(self.features(image))[0].double().numpy()

    @torch.no_grad()
    def sound(self, audio: Union[Waveform, Spectrogram]) -> torch.Tensor:
        spec = stft(audio) if isinstance(audio, Waveform) else audio
        x = torch.as_tensor(spec.stacked(), dtype=self.dtype)
        return self.model.sound_features(x[None])

    @torch.no_grad()
    def maps(self, image: np.ndarray, audio) -> dict[str, np.ndarray]:
        """Potential, attention and localization maps; degenerate products fall back to uniform α."""
        v = self.features(image)
        P = self.model.potential_map(v)
        warning = None
        try:
            A = attention(v, self.sound(audio))
            alpha = localization_map(A, P, self.ablate_constant_p)
        except (DegenerateSoundError, DegenerateMapError) as exc:
            warning = str(exc)
            A = torch.zeros_like(P)
            alpha = torch.full_like(P, 1.0 / P[0].numel())
        out = {"potential": P[0].double().numpy(), "attention": A[0].double().numpy(),
               "localization": alpha[0].double().numpy()}
        if warning:
            out["warning"] = warning
        return out


def _localizer(checkpoint) -> Localizer:
    if isinstance(checkpoint, Localizer):
        return checkpoint
    if isinstance(checkpoint, AVSLNet):
        return Localizer(checkpoint)
    return Localizer.from_checkpoint(checkpoint)


def _samples(manifest) -> list[Sample]:
    if isinstance(manifest, (str, Path)):
        return load_manifest(manifest)
    return list(manifest)


def sample_gt(sample) -> np.ndarray:
    gt = getattr(sample, "gt", None)
    if gt is not None:
        return gt
    h, w = sample.image.shape[:2]
    return consensus_gt(sample.boxes, max(sample.n_annotators, 1), h, w)


def evaluate_samples(loc: Localizer, samples: Sequence, mode: str) -> EvalReport:
    """Run one mode over samples with the shared metric pipeline."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    items, warnings, errors = [], [], []
    for s in samples:
        if mode == "potential":
            raw = loc.potential(s.image)
        else:
            try:
                audio = s.audio
            except (FileNotFoundError, OSError, ValueError) as exc:
                errors.append(f"{s.id}: {exc}")
                continue
            m = loc.maps(s.image, audio)
            if "warning" in m:
                warnings.append(f"{s.id}: {m['warning']}; using uniform localization map")
            raw = m["localization"]
        items.append((s.id, sample_gt(s), prediction_map(raw)))
    report = evaluate(items)
    report.warnings.extend(warnings)
    report.errors.extend(errors)
    return report


def run_standard_eval(checkpoint, manifest, mode: str = "localization") -> EvalReport:
    """Evaluate the ``test`` split of a manifest in localization or potential mode."""
    samples = [s for s in _samples(manifest) if s.split == "test"]
    if not samples:
        raise ConfigError("manifest has no test samples")
    return evaluate_samples(_localizer(checkpoint), samples, mode)


def run_random_eval(manifest, seed: int = 0) -> EvalReport:
    """Random-prediction baseline over the ``test`` split."""
    samples = [s for s in _samples(manifest) if s.split == "test"]
    if not samples:
        raise ConfigError("manifest has no test samples")
    return random_report(samples, seed)


def random_report(samples: Sequence, seed: int = 0) -> EvalReport:
    rng = np.random.default_rng(seed)
    items = [(s.id, sample_gt(s), random_baseline(rng)) for s in sorted(samples, key=lambda s: s.id)]
    return evaluate(items)


def report_gap(loc: EvalReport, pot: EvalReport) -> dict[str, float]:
    return {"ciou@0.5": loc.ciou_at_tau - pot.ciou_at_tau, "auc": loc.auc - pot.auc}


# ----------------------------------------------------------- concat-and-localize


@dataclass(eq=False)
class ConcatSample:
    """Side-by-side composite carrying one source's audio and rescaled boxes."""

    id: str
    image: np.ndarray
    source: Sample
    boxes: list[tuple[int, int, int, int, int]]
    gt: np.ndarray
    side: str
    provenance: tuple[str, str]
    split: str = "test"

    @property
    def audio(self) -> Waveform:
        return self.source.audio


def _half_boxes(boxes, offset: int):
    out = []
    for a, x0, y0, x1, y1 in boxes:
        out.append((a, offset + x0 // 2, y0, offset + int(math.ceil(x1 / 2)), y1))
    return out


def concat_synthesize(a: Sample, b: Sample, pair_id: str = "concat") -> tuple[ConcatSample, ConcatSample]:
    """Concatenate two images side by side, rescale to the original size, and
    build one variant per source audio with that source's ground truth."""
    if a.image.shape != b.image.shape or a.image.ndim != 3:
        raise ValueError(f"image shapes differ: {a.image.shape} vs {b.image.shape}")
    h, w, _ = a.image.shape
    wide = np.concatenate([a.image, b.image], axis=1).astype(np.float64)
    image = resize_bilinear(wide, (h, w))
    prov = (a.id, b.id)
    out = []
    for side, src, offset in (("left", a, 0), ("right", b, w // 2)):
        boxes = _half_boxes(src.boxes, offset)
        gt = consensus_gt(boxes, max(src.n_annotators, 1), h, w)
        out.append(ConcatSample(f"{pair_id}_{side}", image, src, boxes, gt, side, prov))
    return out[0], out[1]


def concat_pool(samples: Sequence[Sample], n_pairs: int, seed: int = 0) -> list[ConcatSample]:
    """``2 * n_pairs`` composites from seeded random pairs of distinct samples."""
    if n_pairs < 1:
        raise ConfigError("n_pairs must be >= 1")
    if len(samples) < 2:
        raise ConfigError("concat-and-localize needs at least 2 test samples")
    rng = np.random.default_rng(seed)
    out = []
    for p in range(n_pairs):
        i, j = rng.choice(len(samples), size=2, replace=False)
        out.extend(concat_synthesize(samples[i], samples[j], pair_id=f"concat{p:05d}"))
    return out


def run_concat_eval(checkpoint, manifest, n_pairs: int = 500, seed: int = 0):
    """Evaluate both modes on concat-and-localize composites of the test split.

    Returns ``(localization_report, potential_report, gap)`` where ``gap`` is
    localization minus potential for cIoU@0.5 and AUC.
    """
    samples = [s for s in _samples(manifest) if s.split == "test"]
    pool = concat_pool(samples, n_pairs, seed)
    loc = _localizer(checkpoint)
    r_loc = evaluate_samples(loc, pool, "localization")
    r_pot = evaluate_samples(loc, pool, "potential")
    return r_loc, r_pot, report_gap(r_loc, r_pot)


# ---------------------------------------------------------------- type gap


@dataclass
class GapTable:
    rows: dict[str, dict[str, dict[str, float]]]

    def to_dict(self) -> dict:
        return {"rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def render(self) -> str:
        cols = ("localization", "potential", "gap", "random")
        head = f"{'':8s}" + "".join(f"{c[:12]:>22s}" for c in cols)
        sub = f"{'':8s}" + "".join(f"{'IoU':>11s}{'AUC':>11s}" for _ in cols)
        lines = [head, sub]
        for name, row in self.rows.items():
            cells = "".join(f"{100 * row[c]['iou']:11.1f}{100 * row[c]['auc']:11.1f}" for c in cols)
            lines.append(f"{name:8s}{cells}")
        return "\n".join(lines) + "\n"


def run_type_gap_analysis(checkpoint, typeA_manifest, typeB_manifest, seed: int = 0) -> GapTable:
    """IoU@0.5 and AUC per scene type for both modes, their gap, and the random baseline."""
    loc = _localizer(checkpoint)
    rows = {}
    for name, manifest in (("Type A", typeA_manifest), ("Type B", typeB_manifest)):
        samples = _samples(manifest)
        if not samples:
            raise ConfigError(f"{name} manifest is empty")
        r_loc = evaluate_samples(loc, samples, "localization")
        r_pot = evaluate_samples(loc, samples, "potential")
        r_rnd = random_report(samples, seed)
        gap = report_gap(r_loc, r_pot)
        rows[name] = {
            "localization": {"iou": r_loc.ciou_at_tau, "auc": r_loc.auc},
            "potential": {"iou": r_pot.ciou_at_tau, "auc": r_pot.auc},
            "gap": {"iou": gap["ciou@0.5"], "auc": gap["auc"]},
            "random": {"iou": r_rnd.ciou_at_tau, "auc": r_rnd.auc},
        }
    return GapTable(rows)


# ----------------------------------------------------------------- saliency


@dataclass
class SaliencyStack:
    """Per-class saliency maps ordered by descending class score."""

    maps: np.ndarray
    class_ids: list
    scores: list[float]

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3 or self.maps.shape[0] < 1:
            raise ValueError("saliency stack must be N×H×W with N >= 1")
        if np.any(self.maps < 0):
            raise ValueError("saliency values must be nonnegative")

    @property
    def n(self) -> int:
        return self.maps.shape[0]


def saliency_topn_merge(stack: SaliencyStack, N: int) -> np.ndarray:
    """Pixel-wise maximum over the first ``N`` maps of the stack."""
    if not 1 <= N <= stack.n:
        raise ConfigError(f"N must be in [1, {stack.n}], got {N}")
    return stack.maps[:N].max(axis=0)


# Saliency stack archive: zip with maps/NNNN.npy (rank order, H×W float64)
# and meta.json {"class_ids": [...], "scores": [...]}.

def save_saliency_stack(path, stack: SaliencyStack) -> Path:
    path = Path(path)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps({"class_ids": list(stack.class_ids),
                                                "scores": [float(s) for s in stack.scores]}).encode())
        for r, m in enumerate(stack.maps):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(m), allow_pickle=False)
            _zip_write(zf, f"maps/{r:04d}.npy", buf.getvalue())
    return path


def load_saliency_stack(path) -> SaliencyStack:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        names = sorted(n for n in zf.namelist() if n.startswith("maps/") and n.endswith(".npy"))
        maps = np.stack([np.load(io.BytesIO(zf.read(n)), allow_pickle=False) for n in names])
    return SaliencyStack(maps, meta["class_ids"], meta["scores"])


def gradient_saliency_stack(model: AVSLNet, image: np.ndarray, class_audio: dict,
                            out_hw: tuple[int, int] = (256, 256)) -> SaliencyStack:
    """Gradient saliency of each synthetic class, ranked by class score.

    The score of a class is ``sum(A * P)`` with the class's reference sound;
    its saliency is ``|d score / d image|`` maxed over colour channels and
    resized to ``out_hw``.
    """
    model = model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(preprocess_image(image, False), dtype=dtype)[None].requires_grad_(True)
    maps, scores, ids = [], [], []
    for cid, audio in class_audio.items():
        spec = stft(audio) if isinstance(audio, Waveform) else audio
        with torch.no_grad():
            s = model.sound_features(torch.as_tensor(spec.stacked(), dtype=dtype)[None])
        v = model.image_features(x)
        P = model.potential_map(v)
        score = (cosine_attention(v, s) * P).sum()
        (g,) = torch.autograd.grad(score, x)
        sal = g[0].abs().amax(dim=0).double().numpy()
        maps.append(np.clip(resize_bilinear(sal, out_hw), 0.0, None))
        scores.append(float(score.detach()))
        ids.append(cid)
    order = np.argsort(-np.asarray(scores), kind="stable")
    return SaliencyStack(np.stack(maps)[order], [ids[i] for i in order], [scores[i] for i in order])


def run_saliency_eval(samples: Sequence, stacks: Sequence[SaliencyStack], N: int) -> EvalReport:
    """Score the top-N merged saliency maps as predictions."""
    items = [(s.id, sample_gt(s), prediction_map(saliency_topn_merge(st, N), st.maps.shape[1:]))
             for s, st in zip(samples, stacks)]
    return evaluate(items)

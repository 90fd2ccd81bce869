"""Samples, manifests, image/audio preprocessing and the synthetic scene generator."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

logger = logging.getLogger(__name__)

SAMPLE_RATE = 22050
IMAGE_SIZE = 256
CROP_SIZE = 224
STFT_WINDOW = 1022
STFT_HOP = 511
N_ANNOTATORS = 3

# Per-channel mean of the synthetic corpus (scripts/compute_mean.py, seed 0,
# 400 mixed scenes, 2 classes, one decimal). Used instead of ImageNet statistics.
DEFAULT_MEAN = (119.2, 114.6, 118.2)

SHAPES = ("circle", "square", "triangle")
DEFAULT_TONE_MAP = {0: 330.0, 1: 880.0, 2: 1250.0}

# class_id -> base RGB colour of rendered objects
_CLASS_COLOURS = {
    0: (225.0, 60.0, 45.0),
    1: (40.0, 90.0, 225.0),
    2: (235.0, 205.0, 40.0),
}


class ManifestError(ValueError):
    """A manifest line failed to parse or violated a sample invariant."""


class InputTooShortError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    rate_hz: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class Spectrogram:
    amplitude: np.ndarray
    phase: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.amplitude.shape

    def stacked(self) -> np.ndarray:
        """2×F×T float32 array (amplitude, phase) as fed to the sound network."""
        return np.stack([self.amplitude, self.phase]).astype(np.float32)


# Called with the audio path whenever a manifest sample reads its audio file.
# Evaluation tests use it to prove that visual-only paths never touch audio.
audio_read_hooks: list[Callable[[Path], None]] = []


@dataclass(init=False, eq=False)
class Sample:
    """One image/audio pair with per-annotator boxes.

    ``boxes`` holds ``(annotator, x0, y0, x1, y1)`` tuples with exclusive upper
    bounds. Audio from a manifest is read lazily on first access so that
    image-only code paths never open the file.
    """

    id: str
    image: np.ndarray
    boxes: list[tuple[int, int, int, int, int]]
    split: str = "test"
    audio_path: Optional[Path] = None
    _audio: Optional[Waveform] = field(default=None, repr=False)

    def __init__(self, id, image, audio=None, boxes=(), split="test", audio_path=None):
        self.id = id
        self.image = image
        self.boxes = [tuple(int(x) for x in b) for b in boxes]
        self.split = split
        self.audio_path = Path(audio_path) if audio_path is not None else None
        self._audio = audio
        validate_boxes(self.boxes, image.shape[0], image.shape[1])

    @property
    def audio(self) -> Waveform:
        if self._audio is None:
            if self.audio_path is None:
                raise FileNotFoundError(f"sample {self.id!r} has no audio")
            for hook in audio_read_hooks:
                hook(self.audio_path)
            self._audio = read_wav(self.audio_path)
        return self._audio

    @property
    def n_annotators(self) -> int:
        return 1 + max((b[0] for b in self.boxes), default=-1)


@dataclass
class SceneObject:
    shape: str
    class_id: int
    mask: np.ndarray


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    sounding: list[int]
    tone_map: dict[int, float]

    @property
    def scene_type(self) -> str:
        return "A" if len(self.sounding) == len(self.objects) else "B"


def validate_boxes(boxes, height: int, width: int) -> None:
    annotators = set()
    for a, x0, y0, x1, y1 in boxes:
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ManifestError(f"invalid box {(x0, y0, x1, y1)} for {width}x{height} image")
        annotators.add(a)
    if annotators and annotators != set(range(len(annotators))):
        raise ManifestError(f"annotator ids not contiguous from 0: {sorted(annotators)}")


# --------------------------------------------------------------------- audio


def read_wav(path, rate_hz: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV as floats in [-1, 1], mixed to mono and resampled to ``rate_hz``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    rate, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if rate != rate_hz:
        g = np.gcd(int(rate), int(rate_hz))
        data = resample_poly(data, rate_hz // g, rate // g)
    return Waveform(np.clip(data, -1.0, 1.0), rate_hz)


def write_wav(path, wave: Waveform) -> None:
    pcm = np.round(np.clip(wave.samples, -1.0, 1.0) * 32767).astype(np.int16)
    wavfile.write(path, wave.rate_hz, pcm)


def stft(w: Waveform, window: int = STFT_WINDOW, hop: int = STFT_HOP) -> Spectrogram:
    """Hann-windowed STFT without padding.

    Frame count is ``1 + (len - window) // hop``; ``F = window // 2 + 1``.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    if len(x) < window:
        raise InputTooShortError(f"waveform has {len(x)} samples, window needs {window}")
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop]
    spec = np.fft.rfft(frames * get_window("hann", window), axis=1).T
    phase = np.angle(spec)
    phase[phase <= -np.pi] = np.pi
    return Spectrogram(np.abs(spec).astype(np.float32), phase.astype(np.float32))


# --------------------------------------------------------------------- image


def load_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(image), 0, 255).astype(np.uint8)).save(path)


def crop_offsets(train_mode: bool, rng: Optional[np.random.Generator] = None,
                 size: int = IMAGE_SIZE, crop: int = CROP_SIZE) -> tuple[int, int]:
    if not train_mode:
        return (size - crop) // 2, (size - crop) // 2
    if rng is None:
        raise ValueError("train_mode cropping needs an rng")
    y, x = rng.integers(0, size - crop + 1, size=2)
    return int(y), int(x)


def preprocess_image(image: np.ndarray, train_mode: bool = False,
                     rng: Optional[np.random.Generator] = None,
                     mean: Sequence[float] = DEFAULT_MEAN) -> np.ndarray:
    """Mean-subtract and crop to 224, returning a channel-first float32 array."""
    image = np.asarray(image)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValueError(f"expected a 256x256x3 image, got {image.shape}")
    y, x = crop_offsets(train_mode, rng)
    crop = image[y:y + CROP_SIZE, x:x + CROP_SIZE].astype(np.float32)
    crop -= np.asarray(mean, dtype=np.float32)
    return np.ascontiguousarray(crop.transpose(2, 0, 1))


def dataset_mean(samples: Sequence[Sample]) -> tuple[float, float, float]:
    acc = np.zeros(3)
    for s in samples:
        acc += s.image.reshape(-1, 3).mean(axis=0)
    return tuple(float(v) for v in acc / max(len(samples), 1))


# ------------------------------------------------------------------ manifest


def _parse_line(line: str, lineno: int, root: Path) -> Sample:
    try:
        rec = json.loads(line)
        sid = str(rec["id"])
        boxes = [tuple(int(v) for v in b) for b in rec.get("boxes", [])]
        if any(len(b) != 5 for b in boxes):
            raise ValueError("boxes must be [annotator, x0, y0, x1, y1]")
        split = rec.get("split", "test")
        if split not in ("train", "test"):
            raise ValueError(f"unknown split {split!r}")
        image_path = root / rec["image"]
        audio_path = root / rec["audio"] if rec.get("audio") else None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc
    image = load_png(image_path)
    if image.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ManifestError(f"line {lineno}: image {image_path} is {image.shape}, expected 256x256x3")
    try:
        return Sample(sid, image, boxes=boxes, split=split, audio_path=audio_path)
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from exc


def load_manifest(path) -> list[Sample]:
    """Read a JSON-lines manifest; paths inside are relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                samples.append(_parse_line(line, lineno, path.parent))
    return samples


def write_manifest(path, samples: Sequence[Sample], media_dir: str = "media") -> Path:
    """Write PNG/WAV media next to ``path`` and a manifest referencing them."""
    path = Path(path)
    media = path.parent / media_dir
    media.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel = f"{media_dir}/{s.id}.png"
        wav_rel = f"{media_dir}/{s.id}.wav"
        save_png(path.parent / img_rel, s.image)
        write_wav(path.parent / wav_rel, s.audio)
        lines.append(json.dumps({
            "id": s.id, "image": img_rel, "audio": wav_rel,
            "boxes": [list(b) for b in s.boxes], "split": s.split,
        }))
    path.write_text("".join(line + "\n" for line in lines))
    return path


# ----------------------------------------------------------------- synthetic


def _shape_mask(shape: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    if shape == "triangle":
        # upward isosceles triangle inscribed in the radius-r box
        top, bottom = cy - r, cy + r
        half = (yy - top) / (2 * r) * r
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(8, 8, 3))
    reps = size // 8
    smooth = np.kron(coarse, np.ones((reps, reps, 1)))
    # cheap blur of the blocky field
    for axis in (0, 1):
        smooth = (smooth + np.roll(smooth, reps // 2, axis=axis) + np.roll(smooth, -reps // 2, axis=axis)) / 3
    tint = rng.uniform(95, 140, size=3)
    img = tint + 18.0 * smooth + rng.normal(0.0, 6.0, size=(size, size, 3))
    return img


def tone_signature(rng: np.random.Generator, f0: float, n: int, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Fundamental plus two harmonics with random phases and slight detune."""
    t = np.arange(n) / rate
    f = f0 * (1.0 + rng.uniform(-0.01, 0.01))
    sig = np.zeros(n)
    for h, amp in ((1, 1.0), (2, 0.5), (3, 0.25)):
        sig += amp * np.sin(2 * np.pi * h * f * t + rng.uniform(0, 2 * np.pi))
    return sig / 1.75


def generate_scene(rng: np.random.Generator, n_objects: int, type: str = "A", canvas: int = IMAGE_SIZE,
                   n_classes: int = 2, tone_map: Optional[dict[int, float]] = None,
                   classes: Optional[Sequence[int]] = None, sounding_classes: Optional[Sequence[int]] = None,
                   sample_id: str = "scene", split: str = "test", duration_s: float = 3.0,
                   max_retries: int = 200) -> tuple[Sample, SceneSpec]:
    """Render a scene of disjoint shapes and the tones of its sounding objects.

    Shape and colour are determined by class. In a Type-B scene the sounding
    objects are all objects of a proper subset of the classes present, so the
    audio alone tells sounding objects apart from silent ones.
    """
    if type not in ("A", "B"):
        raise ValueError(f"type must be 'A' or 'B', got {type!r}")
    if not 1 <= n_objects <= 4:
        raise ValueError("n_objects must be in [1, 4]")
    if type == "B" and n_objects < 2:
        raise ValueError("a Type-B scene needs at least 2 objects")
    if not 1 <= n_classes <= len(SHAPES):
        raise ValueError(f"n_classes must be in [1, {len(SHAPES)}]")
    tone_map = dict(DEFAULT_TONE_MAP if tone_map is None else tone_map)

    if classes is None:
        while True:
            classes = [int(c) for c in rng.integers(0, n_classes, size=n_objects)]
            if type == "A" or len(set(classes)) >= 2:
                break
            if n_classes < 2:
                raise ValueError("a Type-B scene needs at least 2 classes")
    classes = list(classes)
    if len(classes) != n_objects:
        raise ValueError("len(classes) != n_objects")
    present = sorted(set(classes))
    if type == "A":
        sounding_classes = present
    elif sounding_classes is None:
        k = int(rng.integers(1, len(present)))
        sounding_classes = sorted(int(c) for c in rng.choice(present, size=k, replace=False))
    sounding = [i for i, c in enumerate(classes) if c in set(sounding_classes)]
    if not sounding or (type == "B" and len(sounding) == n_objects):
        raise ValueError(f"sounding classes {sounding_classes} do not make a Type-{type} scene")

    image = _background(rng, canvas)
    occupied = np.zeros((canvas, canvas), dtype=bool)
    margin = canvas * 3 // 32
    objects = []
    for cls in classes:
        shape = SHAPES[cls]
        for _ in range(max_retries):
            r = rng.uniform(canvas * 0.08, canvas * 0.13)
            cy, cx = rng.uniform(margin + r, canvas - margin - r, size=2)
            mask = _shape_mask(shape, cy, cx, r, canvas)
            # keep a 6 px gap between objects
            y0, y1 = max(int(cy - r) - 6, 0), min(int(cy + r) + 7, canvas)
            x0, x1 = max(int(cx - r) - 6, 0), min(int(cx + r) + 7, canvas)
            if mask.any() and not occupied[y0:y1, x0:x1].any():
                occupied[y0:y1, x0:x1] = True
                break
        else:
            raise GenerationError(f"could not place {n_objects} disjoint objects after {max_retries} tries")
        colour = np.asarray(_CLASS_COLOURS[cls]) + rng.uniform(-20, 20, size=3)
        texture = rng.normal(0.0, 8.0, size=(canvas, canvas, 3))
        image[mask] = (colour + texture)[mask]
        objects.append(SceneObject(shape, cls, mask))
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)

    n = int(round(duration_s * SAMPLE_RATE))
    audio = np.zeros(n)
    for i in sounding:
        audio += tone_signature(rng, tone_map[objects[i].class_id], n)
    audio = 0.6 * audio / len(sounding) + rng.normal(0.0, 0.01, size=n)

    boxes = []
    for a in range(N_ANNOTATORS):
        for i in sounding:
            ys, xs = np.nonzero(objects[i].mask)
            boxes.append((a, int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1))
    sample = Sample(sample_id, image, audio=Waveform(np.clip(audio, -1, 1), SAMPLE_RATE),
                    boxes=boxes, split=split)
    return sample, SceneSpec(objects, sounding, tone_map)


def _dataset_item(args) -> Sample:
    seed, i, type_mix, n_classes, split, prefix, max_objects = args
    rng = np.random.default_rng([seed, i])
    t = type_mix if type_mix in ("A", "B") else ("A" if i % 2 == 0 else "B")
    if n_classes < 2:
        t = "A"
    lo = 2 if t == "B" else 1
    n_obj = int(rng.integers(lo, max_objects + 1))
    sample, _ = generate_scene(rng, n_obj, t, n_classes=n_classes, sample_id=f"{prefix}{i:05d}", split=split)
    return sample


def generate_dataset(seed: int, n: int, type_mix: str = "mixed", n_classes: int = 2,
                     split: str = "train", prefix: str = "s", max_objects: int = 3,
                     workers: int = 1) -> list[Sample]:
    """Generate ``n`` scenes; scene ``i`` depends only on ``(seed, i)``.

    ``type_mix`` is ``"A"``, ``"B"`` or ``"mixed"`` (alternating A/B, with
    single-object scenes only in Type A). ``workers > 1`` renders in a
    process pool with identical results.
    """
    if type_mix not in ("A", "B", "mixed"):
        raise ValueError(f"type_mix must be A, B or mixed, got {type_mix!r}")
    jobs = [(seed, i, type_mix, n_classes, split, prefix, max_objects) for i in range(n)]
    if workers > 1 and n > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_dataset_item, jobs, chunksize=8))
    return [_dataset_item(j) for j in jobs]

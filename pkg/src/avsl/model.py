"""Image network, sound network and the potential-localization head.

All learnable state lives in one :class:`AVSLNet` module so that a single
``named_parameters()`` walk covers every array of the checkpoint.
"""
from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import InputTooShortError, Spectrogram

CHECKPOINT_VERSION = 1

# VGG-11 convolutional stack (conv widths, "M" = 2x2 max pool)
IMAGE_LAYERS = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M")
# VGG-like sound stack; every conv is followed by batch norm
SOUND_LAYERS = (32, 32, "M", 64, 64, "M", 128, 128, "M", 128, 128, "M", 128, 128)

# mean-subtracted pixels have a spread of a few tens; bring them to O(1)
IMAGE_INPUT_SCALE = 1.0 / 64.0


class ShapeError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    """Checkpoint arrays do not match the architecture its config describes."""


@dataclass
class ModelConfig:
    k: int = 128
    width_multiplier: float = 1.0
    fc_hidden: int = 256
    n_freq: int = 512
    ablate_constant_p: bool = False
    version: int = CHECKPOINT_VERSION

    def width(self, c: int) -> int:
        return max(1, int(round(c * self.width_multiplier)))


def _conv_stack(layers, in_ch: int, cfg: ModelConfig, batch_norm: bool) -> nn.Sequential:
    mods: list[nn.Module] = []
    for spec in layers:
        if spec == "M":
            mods.append(nn.MaxPool2d(2, 2))
            continue
        out = cfg.width(spec)
        mods.append(nn.Conv2d(in_ch, out, 3, stride=1, padding=1))
        if batch_norm:
            # torch momentum 0.1 == running-average decay 0.9
            mods.append(nn.BatchNorm2d(out, momentum=0.1))
        mods.append(nn.ReLU())
        in_ch = out
    return nn.Sequential(*mods)


class AVSLNet(nn.Module):
    """Every learnable array of the two-stage localizer.

    ``image`` and ``feat_head`` produce the K-channel image features,
    ``potential_head`` the logits of the potential map, ``sound_conv`` and
    ``sound_fc`` the sound features, ``select_fc`` the projection applied to
    the localization-weighted image features.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        k = cfg.k
        self.image = _conv_stack(IMAGE_LAYERS, 3, cfg, batch_norm=False)
        img_out = cfg.width(IMAGE_LAYERS[-2])
        self.feat_head = nn.Sequential(
            nn.Conv2d(img_out, k, 1), nn.ReLU(),
            nn.Conv2d(k, k, 1), nn.ReLU(),
        )
        self.potential_head = nn.Conv2d(k, 1, 1)
        self.sound_conv = _conv_stack(SOUND_LAYERS, 2, cfg, batch_norm=True)
        snd_out = cfg.width(SOUND_LAYERS[-1])
        if cfg.n_freq < 16:
            raise ValueError("n_freq must be >= 16")
        hidden = cfg.width(cfg.fc_hidden)
        self.sound_fc = nn.Sequential(
            nn.Linear(snd_out * (cfg.n_freq // 16), hidden), nn.ReLU(),
            nn.Linear(hidden, k), nn.ReLU(),
        )
        self.select_fc = nn.Sequential(
            nn.Linear(k, k), nn.ReLU(),
            nn.Linear(k, k), nn.ReLU(),
        )

    # ------------------------------------------------------------- image path

    def image_backbone(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-3:] != (3, 224, 224):
            raise ShapeError(f"image input must be 3x224x224, got {tuple(x.shape[-3:])}")
        return self.image(x * IMAGE_INPUT_SCALE)

    def image_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.feat_head(self.image_backbone(x))

    def potential_logits(self, v: torch.Tensor) -> torch.Tensor:
        return self.potential_head(v)[:, 0]

    def potential_map(self, v: torch.Tensor) -> torch.Tensor:
        return spatial_softmax(self.potential_logits(v))

    # ------------------------------------------------------------- sound path

    def sound_conv_features(self, spec: torch.Tensor) -> torch.Tensor:
        if spec.shape[-3] != 2 or spec.shape[-2] != self.config.n_freq:
            raise ShapeError(f"spectrogram must be 2x{self.config.n_freq}xT, got {tuple(spec.shape[-3:])}")
        if spec.shape[-1] < 16:
            raise InputTooShortError(f"spectrogram has {spec.shape[-1]} frames, need >= 16")
        return self.sound_conv(spec)

    def sound_features(self, spec: torch.Tensor) -> torch.Tensor:
        h = self.sound_conv_features(spec)
        pooled = h.mean(dim=-1)  # average over time only
        return self.sound_fc(pooled.flatten(1))

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.select_fc(pooled)


def spatial_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax jointly over the last two (spatial) axes."""
    flat = logits.reshape(*logits.shape[:-2], -1)
    return torch.softmax(flat, dim=-1).reshape(logits.shape)


HEAD_BIAS = 0.1
_HEAD_PREFIXES = ("feat_head.", "sound_fc.", "select_fc.")


def init_params(model: AVSLNet, seed: int = 0) -> AVSLNet:
    """He-normal weights from a private generator seeded by ``seed``.

    The selection FC pair starts as the identity, so that at step 0 the
    projected vector is the attention-pooled image feature itself and the
    similarity loss compares image and sound features directly. The
    potential head starts at zero, i.e. with a uniform potential map.
    Biases are zero except in the layers that end in the nonnegative
    feature vectors (feature head, sound FC, selection FC), which start at
    ``HEAD_BIAS`` so those few units begin active and feature supports overlap.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.fill_(HEAD_BIAS if name.startswith(_HEAD_PREFIXES) else 0.0)
            elif p.dim() == 1:  # batch-norm scale
                p.fill_(1.0)
            elif name.startswith("select_fc."):
                p.copy_(torch.eye(p.shape[0], p.shape[1], dtype=p.dtype))
            elif name.startswith("potential_head."):
                p.zero_()  # uniform potential map at step 0
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * np.sqrt(2.0 / fan_in))
    return model


def build_model(config: ModelConfig | None = None, seed: int = 0, dtype=torch.float32) -> AVSLNet:
    return init_params(AVSLNet(config), seed).to(dtype).eval()


def _as_batch(x, dtype) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)
    return (t, False) if t.dim() == 4 else (t.unsqueeze(0), True)


def image_forward(model: AVSLNet, image) -> torch.Tensor:
    """K×14×14 nonnegative image features of a preprocessed 3×224×224 image."""
    dtype = next(model.parameters()).dtype
    x, single = _as_batch(image, dtype)
    v = model.image_features(x)
    return v[0] if single else v


def potential_map(model: AVSLNet, v) -> torch.Tensor:
    """Softmax over all spatial positions of the potential head logits."""
    dtype = next(model.parameters()).dtype
    v, single = _as_batch(v, dtype)
    p = model.potential_map(v)
    return p[0] if single else p


def sound_forward(model: AVSLNet, spec) -> torch.Tensor:
    """Length-K nonnegative sound features of a spectrogram (F×T pair or 2×F×T array)."""
    dtype = next(model.parameters()).dtype
    if isinstance(spec, Spectrogram):
        spec = spec.stacked()
    x = torch.as_tensor(np.asarray(spec) if not isinstance(spec, torch.Tensor) else spec, dtype=dtype)
    single = x.dim() == 3
    s = model.sound_features(x.unsqueeze(0) if single else x)
    return s[0] if single else s


# -------------------------------------------------------------- checkpoints
#
# A checkpoint is a zip archive (stored, fixed timestamps) holding
#   config.json          ModelConfig fields plus "extra" metadata
#   params/<name>.npy    one .npy per state-dict entry: the NumPy format
#                        header records dtype and shape, followed by the
#                        row-major (C-order) little-endian payload.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(model: AVSLNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["extra"] = extra or {}
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "config.json", json.dumps(cfg, indent=2, sort_keys=True).encode())
        for name, t in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, np.array(t.detach().cpu().numpy(), order="C"), allow_pickle=False)
            _zip_write(zf, f"params/{name}.npy", buf.getvalue())
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        cfg = json.loads(zf.read("config.json"))
        arrays = {}
        for name in zf.namelist():
            if name.startswith("params/") and name.endswith(".npy"):
                arrays[name[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return cfg, arrays


def load_checkpoint(path, dtype=torch.float32) -> tuple[AVSLNet, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, extra)``."""
    cfg, arrays = read_checkpoint(path)
    extra = cfg.pop("extra", {})
    fields = ModelConfig.__dataclass_fields__
    config = ModelConfig(**{k: v for k, v in cfg.items() if k in fields})
    model = AVSLNet(config)
    _assign(model, arrays, strict=True)
    return model.to(dtype).eval(), extra


def _assign(model: AVSLNet, arrays: dict[str, np.ndarray], strict: bool, prefix: str = "") -> None:
    state = model.state_dict()
    wanted = {k: v for k, v in state.items() if k.startswith(prefix)}
    missing = sorted(set(wanted) - set(arrays))
    if strict and (missing or set(arrays) - set(state)):
        raise ConfigMismatchError(f"checkpoint arrays do not match config: missing={missing[:5]}, "
                                  f"unexpected={sorted(set(arrays) - set(state))[:5]}")
    for name, ref in wanted.items():
        if name not in arrays:
            raise ConfigMismatchError(f"missing array {name}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ConfigMismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {tuple(ref.shape)}")
        state[name] = torch.as_tensor(arr, dtype=ref.dtype)
    model.load_state_dict(state)


def load_pretrained_image_weights(model: AVSLNet, path) -> AVSLNet:
    """Copy the ``image.*`` conv stack from a checkpoint-format archive."""
    _, arrays = read_checkpoint(path)
    _assign(model, {k: v for k, v in arrays.items() if k.startswith("image.")}, strict=False, prefix="image.")
    return model


def param_groups(model: AVSLNet) -> dict[str, list[str]]:
    """Parameter names by network part (image stack, image heads, sound, selection)."""
    groups: dict[str, list[str]] = {"image": [], "heads": [], "sound": [], "select": []}
    for name, _ in model.named_parameters():
        if name.startswith("image."):
            groups["image"].append(name)
        elif name.startswith(("feat_head.", "potential_head.")):
            groups["heads"].append(name)
        elif name.startswith("sound_"):
            groups["sound"].append(name)
        else:
            groups["select"].append(name)
    return groups

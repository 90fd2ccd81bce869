"""Similarity-loss training: pair sampling, loss, Adam loop, checkpoints, gradient check."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Sample, load_manifest, preprocess_image, stft
from .model import AVSLNet, ModelConfig, build_model, load_pretrained_image_weights, save_checkpoint
from .selection import EPS, cosine_attention, pool_features, uniform_like

logger = logging.getLogger(__name__)

POSITIVE, NEGATIVE = "positive", "negative"


class DegeneratePairError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, pair_ids: list, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}; pairs {pair_ids}")
        self.step = step
        self.pair_ids = pair_ids
        self.loss = loss


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 30
    lr_main: float = 1e-4
    lr_image: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    ablate_constant_p: bool = False
    pretrained: bool = False
    pretrained_weights: Optional[str] = None
    k: int = 128
    width_multiplier: float = 1.0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_image <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 to form negatives")


# ---------------------------------------------------------------------- loss


def _cos(s: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
    return (s * s_hat).sum(-1) / (torch.linalg.vector_norm(s, dim=-1)
                                  * torch.linalg.vector_norm(s_hat, dim=-1)).clamp_min(EPS)


def similarity_loss(s, s_hat, label: str) -> torch.Tensor:
    """``1 - cos(s, s_hat)`` for a positive pair, ``cos(s, s_hat)`` for a negative one."""
    s = torch.as_tensor(s, dtype=torch.float64) if not isinstance(s, torch.Tensor) else s
    s_hat = torch.as_tensor(s_hat, dtype=s.dtype) if not isinstance(s_hat, torch.Tensor) else s_hat
    if label not in (POSITIVE, NEGATIVE):
        raise ValueError(f"label must be {POSITIVE!r} or {NEGATIVE!r}")
    if bool((torch.linalg.vector_norm(s, dim=-1) == 0).any()) or bool(
            (torch.linalg.vector_norm(s_hat, dim=-1) == 0).any()):
        raise DegeneratePairError("zero-norm feature vector in pair")
    c = _cos(s, s_hat)
    return 1.0 - c if label == POSITIVE else c


# --------------------------------------------------------------------- pairs


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ConfigError("a derangement needs n >= 2")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


@dataclass
class PairBatch:
    """B matched (image, audio) pairs plus B mismatched ones.

    Negative ``b`` pairs image ``b`` with audio ``neg_audio[b]``.
    """

    ids: list[str]
    images: torch.Tensor
    spectrograms: torch.Tensor
    neg_audio: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def items(self) -> list[tuple[str, str, str]]:
        pos = [(i, i, POSITIVE) for i in self.ids]
        neg = [(self.ids[b], self.ids[j], NEGATIVE) for b, j in enumerate(self.neg_audio)]
        return pos + neg


class PreparedSet:
    """Decoded images and spectrograms held in memory for fast batching."""

    def __init__(self, samples: Sequence[Sample]):
        self.ids = [s.id for s in samples]
        self.images = [s.image for s in samples]
        self.specs = [stft(s.audio).stacked() for s in samples]

    def __len__(self):
        return len(self.ids)

    def batch(self, idx: Sequence[int], rng: np.random.Generator, train_mode: bool = True,
              dtype=torch.float32) -> PairBatch:
        idx = list(idx)
        if len(idx) < 2:
            raise ConfigError("a pair batch needs at least 2 samples")
        imgs = np.stack([preprocess_image(self.images[i], train_mode, rng) for i in idx])
        t_min = min(self.specs[i].shape[-1] for i in idx)
        specs = np.stack([self.specs[i][..., :t_min] for i in idx])
        return PairBatch([self.ids[i] for i in idx], torch.as_tensor(imgs, dtype=dtype),
                         torch.as_tensor(specs, dtype=dtype), derangement(len(idx), rng))


def sample_pairs(samples: Sequence[Sample], rng: np.random.Generator, batch_size: int = 8,
                 train_mode: bool = True) -> PairBatch:
    """Draw ``batch_size`` samples (all of them if fewer) and pair them.

    Positives are the matched pairs; negatives re-pair the audio clips by a
    within-batch derangement.
    """
    if len(samples) < 2:
        raise ConfigError("pair sampling needs at least 2 samples")
    n = min(batch_size, len(samples))
    idx = np.sort(rng.choice(len(samples), size=n, replace=False)) if n < len(samples) else np.arange(n)
    chosen = [samples[i] for i in idx]
    return PreparedSet(chosen).batch(range(n), rng, train_mode)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


# ------------------------------------------------------------------ forward


@dataclass
class BatchLoss:
    loss: torch.Tensor
    pos_loss: float
    neg_loss: float
    n_skipped: int
    pos_values: torch.Tensor = field(repr=False)
    neg_values: torch.Tensor = field(repr=False)


def pair_losses(model: AVSLNet, images: torch.Tensor, specs: torch.Tensor, neg_audio,
                ablate_constant_p: bool = False):
    """Per-pair positive and negative losses plus validity masks for one batch."""
    v = model.image_features(images)
    s = model.sound_features(specs)
    return losses_from_features(model, v, s, neg_audio, ablate_constant_p)


def losses_from_features(model: AVSLNet, v: torch.Tensor, s: torch.Tensor, neg_audio,
                         ablate_constant_p: bool = False):
    P = model.potential_map(v)
    if ablate_constant_p:
        P = uniform_like(P).detach()
    neg_audio = torch.as_tensor(np.asarray(neg_audio), dtype=torch.long)

    def branch(s_b):
        A = cosine_attention(v, s_b)
        prod = A * P
        z = prod.sum(dim=(-2, -1))
        alpha = prod / z.clamp_min(EPS)[:, None, None]
        # A*P summing to zero pools with a uniform map, as at evaluation, so the
        # pair still pays its loss instead of dropping out of the batch
        alpha = torch.where((z == 0)[:, None, None], uniform_like(P), alpha)
        s_hat = model.project(pool_features(v, alpha))
        # NaN compares unequal to 0, so non-finite pairs stay valid and surface in the loss
        valid = ~((torch.linalg.vector_norm(s_b, dim=-1) == 0)
                  | (torch.linalg.vector_norm(s_hat, dim=-1) == 0))
        return _cos(s_b, s_hat), valid

    cos_pos, valid_pos = branch(s)
    cos_neg, valid_neg = branch(s[neg_audio])
    return 1.0 - cos_pos, valid_pos, cos_neg, valid_neg


def batch_loss(model: AVSLNet, batch: PairBatch, ablate_constant_p: bool = False) -> BatchLoss:
    pos, vp, neg, vn = pair_losses(model, batch.images, batch.spectrograms, batch.neg_audio, ablate_constant_p)
    values = torch.cat([pos[vp], neg[vn]])
    n_skipped = int((~vp).sum() + (~vn).sum())
    loss = values.mean() if len(values) else pos.sum() * 0.0
    pos_d, neg_d = pos.detach(), neg.detach()
    return BatchLoss(loss, float(pos_d[vp].mean()) if vp.any() else float("nan"),
                     float(neg_d[vn].mean()) if vn.any() else float("nan"), n_skipped,
                     pos.detach(), neg.detach())


# -------------------------------------------------------------------- train


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)


def make_optimizer(model: AVSLNet, cfg: TrainConfig) -> torch.optim.Adam:
    image = [p for n, p in model.named_parameters() if n.startswith("image.")]
    rest = [p for n, p in model.named_parameters() if not n.startswith("image.")]
    lr_image = cfg.lr_image if cfg.pretrained else cfg.lr_main
    return torch.optim.Adam(
        [{"params": image, "lr": lr_image}, {"params": rest, "lr": cfg.lr_main}],
        betas=cfg.betas, eps=cfg.adam_eps,
    )


def _json_float(x: float):
    return None if x != x else round(float(x), 10)


def train(config: TrainConfig, manifest, out_dir, log_every: int = 0) -> tuple[Path, list[dict]]:
    """Train on the ``train`` split of ``manifest`` (path or sample list).

    Writes ``checkpoint_epochNNN.zip`` every epoch, ``checkpoint.zip`` for the
    final weights and ``trace.jsonl`` with one loss record per step.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = load_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    train_samples = [s for s in samples if s.split == "train"]
    if len(train_samples) < 2:
        raise ConfigError("manifest needs at least 2 training samples")

    if config.deterministic:
        set_deterministic(True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    mcfg = ModelConfig(k=config.k, width_multiplier=config.width_multiplier,
                       ablate_constant_p=config.ablate_constant_p)
    model = build_model(mcfg, seed=config.seed)
    if config.pretrained:
        if not config.pretrained_weights:
            raise ConfigError("pretrained mode needs pretrained_weights")
        load_pretrained_image_weights(model, config.pretrained_weights)
    model.train()
    opt = make_optimizer(model, config)
    data = PreparedSet(train_samples)

    trace: list[dict] = []
    trace_path = out_dir / "trace.jsonl"
    extra = {"train_config": {k: v for k, v in asdict(config).items() if k != "pretrained_weights"}}
    step = 0
    ckpt = out_dir / "checkpoint.zip"
    with open(trace_path, "w") as trace_fh:
        for epoch in range(config.epochs):
            epoch_losses = []
            for idx in epoch_batches(len(data), config.batch_size, rng):
                batch = data.batch(idx, rng, train_mode=True)
                res = batch_loss(model, batch, config.ablate_constant_p)
                lv = float(res.loss.detach())
                if not math.isfinite(lv):
                    raise NonFiniteLossError(step, [it[:2] for it in batch.items], lv)
                opt.zero_grad(set_to_none=True)
                if res.loss.requires_grad:
                    res.loss.backward()
                    opt.step()
                rec = {"step": step, "loss": _json_float(lv), "pos_loss": _json_float(res.pos_loss),
                       "neg_loss": _json_float(res.neg_loss)}
                if res.n_skipped:
                    rec["skipped"] = res.n_skipped
                trace.append(rec)
                trace_fh.write(json.dumps(rec) + "\n")
                epoch_losses.append(lv)
                step += 1
                if log_every and step % log_every == 0:
                    logger.info("step %d loss %.4f", step, lv)
            logger.info("epoch %d mean loss %.4f", epoch + 1, float(np.mean(epoch_losses)))
            model.eval()
            save_checkpoint(model, out_dir / f"checkpoint_epoch{epoch + 1:03d}.zip", extra)
            model.train()
    model.eval()
    save_checkpoint(model, ckpt, extra)
    return ckpt, trace


# --------------------------------------------------------------- grad check


def analytic_gradients(model: AVSLNet, image: torch.Tensor, spec: torch.Tensor, label: str,
                       ablate_constant_p: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of one pair's similarity loss w.r.t. every parameter (zeros where disconnected)."""
    model.zero_grad(set_to_none=True)
    loss = single_pair_loss(model, image, spec, label, ablate_constant_p)
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p)) for (n, p), g in zip(params.items(), grads)}


def single_pair_loss(model: AVSLNet, image, spec, label: str, ablate_constant_p: bool = False,
                     cache: Optional[dict] = None) -> torch.Tensor:
    """Similarity loss for one (image, spectrogram) pair; ``cache`` reuses untouched branches."""
    cache = cache or {}
    conv = cache.get("conv")
    if conv is None:
        conv = model.image_backbone(image[None])
    s = cache.get("s")
    if s is None:
        s = model.sound_features(spec[None])
    v = model.feat_head(conv)
    pos, _, neg, _ = losses_from_features(model, v, s, [0], ablate_constant_p)
    return (pos if label == POSITIVE else neg)[0]


class ActivationPattern:
    """Records which side of every ReLU and max-pool kink a forward pass lands on.

    Two evaluations with the same pattern lie in one linear piece of the
    network, so a central difference between them is free of kink error.
    """

    def __init__(self, model: nn.Module):
        self.model = model
        self.pattern: list[torch.Tensor] = []
        self._handles = []

    def _relu_hook(self, mod, inputs, out):
        self.pattern.append(inputs[0] > 0)

    def _pool_hook(self, mod, inputs, out):
        _, idx = F.max_pool2d(inputs[0], mod.kernel_size, mod.stride, return_indices=True)
        self.pattern.append(idx)

    def __enter__(self):
        for m in self.model.modules():
            if isinstance(m, nn.ReLU):
                self._handles.append(m.register_forward_hook(self._relu_hook))
            elif isinstance(m, nn.MaxPool2d):
                self._handles.append(m.register_forward_hook(self._pool_hook))
        return self

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()

    def take(self) -> list[torch.Tensor]:
        out, self.pattern = self.pattern, []
        return out


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict
    probed: int
    kinks_skipped: int
    unverified: list = field(default_factory=list)
    max_abs_error: float = 0.0


def grad_check(model: AVSLNet, pair: tuple, step: float = 1e-5, coords_per_param: int = 6,
               seed: int = 0, abs_floor: float = 1e-8, ablate_constant_p: bool = False,
               params=None, max_tries: int = 40, return_details: bool = False):
    """Max relative error between autograd and central finite differences.

    ``pair`` is ``(image 3×224×224, spectrogram 2×F×T, label)``. Every
    parameter tensor (or those named in ``params``) is probed at up to
    ``coords_per_param`` random entries. Relative error is
    ``|a - f| / max(|a|, |f|)``; where both are below ``abs_floor`` the
    absolute difference is used instead.

    A probe whose ``θ+h`` and ``θ-h`` evaluations fall on different sides of
    a ReLU or max-pool kink measures the kink, not the derivative; such
    entries are replaced by other random entries of the same tensor (at most
    ``max_tries`` draws per tensor). A tensor with no kink-free entry cannot
    be checked at this point and is listed in ``unverified`` of the detailed
    result; callers should cover it with another pair.
    """
    image, spec, label = pair
    model = model.double()
    image = torch.as_tensor(image, dtype=torch.float64)
    spec = torch.as_tensor(spec, dtype=torch.float64)
    was_training = model.training
    model.train()
    buffers = {n: b.clone() for n, b in model.named_buffers()}
    rng = np.random.default_rng(seed)
    wanted = None if params is None else set(params)

    analytic = analytic_gradients(model, image, spec, label, ablate_constant_p)
    with torch.no_grad():
        conv0 = model.image_backbone(image[None])
        s0 = model.sound_features(spec[None])

    details = {}
    worst = 0.0
    probed = skipped = 0
    unverified = []
    worst_abs = 0.0
    with torch.no_grad(), ActivationPattern(model) as monitor:
        for name, p in model.named_parameters():
            if wanted is not None and name not in wanted:
                continue
            if name.startswith("image."):
                cache = {"s": s0}
            elif name.startswith("sound_"):
                cache = {"conv": conv0}
            else:
                cache = {"conv": conv0, "s": s0}
            flat = p.view(-1)
            n = flat.numel()
            order = rng.permutation(n)[:max_tries]
            errs, kinked = [], []
            for i in order:
                if len(errs) >= coords_per_param:
                    break
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = single_pair_loss(model, image, spec, label, ablate_constant_p, cache).item()
                pat_plus = monitor.take()
                flat[i] = orig - step
                f_minus = single_pair_loss(model, image, spec, label, ablate_constant_p, cache).item()
                pat_minus = monitor.take()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * step)
                a = analytic[name].view(-1)[i].item()
                denom = max(abs(a), abs(fd))
                err = abs(a - fd) / denom if denom >= abs_floor else abs(a - fd)
                if _same_pattern(pat_plus, pat_minus):
                    errs.append(err)
                    worst_abs = max(worst_abs, abs(a - fd))
                else:
                    kinked.append(err)
            skipped += len(kinked)
            if not errs:
                unverified.append(name)
                continue
            probed += len(errs)
            details[name] = max(errs)
            worst = max(worst, details[name])
    for n, b in model.named_buffers():
        b.copy_(buffers[n])
    model.train(was_training)
    if return_details:
        return GradCheckResult(worst, details, probed, skipped, unverified, worst_abs)
    return worst

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from avsl.data import InputTooShortError
from avsl.training import ActivationPattern
from avsl.model import (AVSLNet, ConfigMismatchError, ModelConfig, ShapeError, build_model, image_forward,
                        load_checkpoint, load_pretrained_image_weights, param_groups, potential_map,
                        save_checkpoint, sound_forward, spatial_softmax)

SMALL = ModelConfig(k=8, width_multiplier=0.125)


@pytest.fixture(scope="module")
def small():
    return build_model(SMALL, seed=0)


@pytest.fixture(scope="module")
def small64():
    return build_model(SMALL, seed=1, dtype=torch.float64)


def rand_image(seed=0):
    return torch.as_tensor(np.random.default_rng(seed).normal(0, 40, size=(3, 224, 224)), dtype=torch.float32)


def rand_spec(seed=0, t=32):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(np.stack([rng.uniform(0, 5, (512, t)), rng.uniform(-np.pi, np.pi, (512, t))]),
                           dtype=torch.float32)


def zero_biases(model):
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n.endswith("bias"):
                p.zero_()
    return model


# ---------------------------------------------------------------- image path


def test_image_features_shape_and_sign(small):
    v = image_forward(small, rand_image())
    assert v.shape == (8, 14, 14)
    assert (v >= 0).all()


def test_zero_image_zero_features():
    model = zero_biases(build_model(SMALL, seed=0))
    assert not image_forward(model, torch.zeros(3, 224, 224)).any()


def test_head_biases_start_positive(small):
    for name, p in small.named_parameters():
        if name.endswith("bias") and name.startswith(("feat_head.", "sound_fc.", "select_fc.")):
            assert (p > 0).all(), name


def test_image_forward_deterministic():
    a = image_forward(build_model(SMALL, seed=3), rand_image(1))
    b = image_forward(build_model(SMALL, seed=3), rand_image(1))
    assert torch.equal(a, b)


def test_image_rejects_non_224(small):
    with pytest.raises(ShapeError):
        image_forward(small, torch.zeros(3, 256, 256))


# ------------------------------------------------------------- potential map


def test_constant_features_give_uniform_map(small):
    P = potential_map(small, torch.full((8, 14, 14), 0.7))
    torch.testing.assert_close(P, torch.full((14, 14), 1 / 196))


def test_softmax_hand_value():
    P = spatial_softmax(torch.tensor([[0.0, math.log(2)], [0.0, 0.0]], dtype=torch.float64))
    torch.testing.assert_close(P, torch.tensor([[0.2, 0.4], [0.2, 0.2]], dtype=torch.float64))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(seed, c):
    logits = torch.as_tensor(np.random.default_rng(seed).normal(0, 3, size=(14, 14)))
    P = spatial_softmax(logits)
    assert abs(P.sum().item() - 1) <= 1e-6
    assert (P > 0).all()
    P2 = spatial_softmax(logits + c)
    assert torch.max(torch.abs(P2 - P)).item() <= 1e-9
    assert torch.argmax(P2) == torch.argmax(P)


def test_potential_map_sums_to_one(small):
    P = potential_map(small, image_forward(small, rand_image(2)))
    assert P.shape == (14, 14)
    assert abs(P.sum().item() - 1) <= 1e-6


# ---------------------------------------------------------------- sound path


@pytest.mark.parametrize("t", [16, 37, 128])
def test_sound_features_length_k(small, t):
    s = sound_forward(small, rand_spec(t=t))
    assert s.shape == (8,) and (s >= 0).all()


def test_zero_spectrogram_zero_features():
    model = zero_biases(build_model(SMALL, seed=0))
    assert not sound_forward(model, torch.zeros(2, 512, 32)).any()


def test_short_spectrogram_rejected(small):
    with pytest.raises(InputTooShortError):
        sound_forward(small, rand_spec(t=15))


def test_gap_is_time_permutation_invariant(small):
    h = small.sound_conv_features(rand_spec(3)[None])
    perm = torch.as_tensor(np.random.default_rng(0).permutation(h.shape[-1]))
    a = small.sound_fc(h.mean(dim=-1).flatten(1))
    b = small.sound_fc(h[..., perm].mean(dim=-1).flatten(1))
    torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_features_nonnegative_for_random_params(seed):
    model = build_model(SMALL, seed=seed % 1000)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(seed % 997)) * 0.1)
    assert (image_forward(model, rand_image(seed % 13)) >= 0).all()
    assert (sound_forward(model, rand_spec(seed % 11)) >= 0).all()


# ----------------------------------------------------------- gradient checks


def _fd_check(model, fn, coords=3, h=1e-5, seed=0, max_tries=30):
    """Worst relative error over kink-free central differences."""
    rng = np.random.default_rng(seed)
    model.zero_grad()
    fn().backward()
    worst, checked = 0.0, 0
    with torch.no_grad(), ActivationPattern(model) as mon:
        for name, p in model.named_parameters():
            flat = p.view(-1)
            g = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
            done = 0
            for i in rng.permutation(flat.numel())[:max_tries]:
                if done == coords:
                    break
                orig = flat[i].item()
                flat[i] = orig + h
                fp, pat_p = fn().item(), mon.take()
                flat[i] = orig - h
                fm, pat_m = fn().item(), mon.take()
                flat[i] = orig
                if not all(torch.equal(a, b) for a, b in zip(pat_p, pat_m)):
                    continue
                done += 1
                fd = (fp - fm) / (2 * h)
                a = g[i].item()
                denom = max(abs(a), abs(fd))
                worst = max(worst, abs(a - fd) / denom if denom >= 1e-8 else abs(a - fd))
            checked += done
    assert checked > 0
    return worst


def test_gradcheck_potential_map(small64):
    x = rand_image(4).double()[None]
    w = torch.as_tensor(np.random.default_rng(0).normal(size=(14, 14)))
    # weighted sum so the gradient is not identically zero
    err = _fd_check(small64, lambda: (small64.potential_map(small64.image_features(x))[0] * w).sum())
    assert err < 1e-4


def test_gradcheck_sound_features(small64):
    small64.eval()
    x = rand_spec(5, t=16).double()[None]
    w = torch.as_tensor(np.random.default_rng(1).normal(size=8))
    err = _fd_check(small64, lambda: (small64.sound_features(x)[0] * w).sum())
    assert err < 1e-4


def test_sum_of_potential_map_has_zero_gradient(small64):
    x = rand_image(6).double()[None]
    small64.zero_grad()
    small64.potential_map(small64.image_features(x)).sum().backward()
    assert max(p.grad.abs().max().item() for p in small64.parameters() if p.grad is not None) < 1e-10


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path, small):
    small.eval()
    path = save_checkpoint(small, tmp_path / "c.zip", {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    x, spec = rand_image(7)[None], rand_spec(7)[None]
    with torch.no_grad():
        assert torch.equal(small.image_features(x), loaded.image_features(x))
        assert torch.equal(small.sound_features(spec), loaded.sound_features(spec))


def test_checkpoint_bytes_deterministic(tmp_path, small):
    a = save_checkpoint(small, tmp_path / "a.zip").read_bytes()
    b = save_checkpoint(small, tmp_path / "b.zip").read_bytes()
    assert a == b


def test_checkpoint_config_mismatch(tmp_path, small):
    import json
    import zipfile

    path = save_checkpoint(small, tmp_path / "c.zip")
    with zipfile.ZipFile(path) as zf:
        files = {n: zf.read(n) for n in zf.namelist()}
    cfg = json.loads(files["config.json"])
    cfg["k"] = 16
    files["config.json"] = json.dumps(cfg).encode()
    with zipfile.ZipFile(tmp_path / "bad.zip", "w") as zf:
        for n, b in files.items():
            zf.writestr(n, b)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(tmp_path / "bad.zip")


def test_pretrained_image_weights(tmp_path):
    src = build_model(SMALL, seed=11)
    path = save_checkpoint(src, tmp_path / "pre.zip")
    dst = load_pretrained_image_weights(build_model(SMALL, seed=12), path)
    for (n, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        if n.startswith("image."):
            assert torch.equal(a, b)
        elif a.dim() > 1 and not n.startswith(("select_fc.", "potential_head.")):
            # He-initialised weights differ between seeds
            assert not torch.equal(a, b)


def test_param_groups_cover_everything(small):
    groups = param_groups(small)
    names = [n for n, _ in small.named_parameters()]
    assert sorted(sum(groups.values(), [])) == sorted(names)
    assert groups["heads"] == ["feat_head.0.weight", "feat_head.0.bias", "feat_head.2.weight",
                               "feat_head.2.bias", "potential_head.weight", "potential_head.bias"]


def test_full_width_shapes():
    model = AVSLNet(ModelConfig())
    assert model.image[0].out_channels == 64
    assert model.sound_conv[0].out_channels == 32
    assert model.potential_head.in_channels == 128

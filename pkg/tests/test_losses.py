import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from tests.conftest import check_gradients, moment_features
from threemti.errors import BadChannelCount, ConfigError, RangeError, ShapeMismatch
from threemti.losses import (
    LossConfig,
    PerceptualDistance,
    RandomPyramid,
    ThermalLoss,
    l2_loss,
    load_extractor,
    perceptual_distance,
    total_loss,
)
from threemti.scenes import generate_toy_scene


def pair(shape=(2, 1, 16, 16), seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=dtype), torch.rand(shape, generator=g, dtype=dtype)


def test_l2_closed_forms():
    a, _ = pair()
    assert float(l2_loss(a, a)) == 0.0
    b = a.double()
    assert float(l2_loss(b + 0.1, b)) == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        l2_loss(a, a[:, :, :8])


def test_l2_matches_scalar_loop():
    a, b = pair(shape=(1, 1, 6, 7), dtype=torch.float64)
    total = 0.0
    for y in range(6):
        for x in range(7):
            total += (float(a[0, 0, y, x]) - float(b[0, 0, y, x])) ** 2
    assert float(l2_loss(a, b)) == pytest.approx(total / 42, abs=1e-7)


def test_perceptual_identity_and_symmetry():
    d = PerceptualDistance()
    for seed in range(5):
        a, b = pair(seed=seed)
        assert float(d(a, a)) == 0.0
        assert float(d(a, b)) > 0.0
        assert float(d(a, b)) == pytest.approx(float(d(b, a)), abs=1e-7)


def test_perceptual_is_reproducible_per_seed():
    a, b = pair(shape=(1, 3, 32, 32))
    cfg = LossConfig(feature_seed=4)
    assert float(perceptual_distance(a, b, cfg)) == float(perceptual_distance(a, b, cfg))
    other = perceptual_distance(a, b, LossConfig(feature_seed=5))
    assert float(other) != float(perceptual_distance(a, b, cfg))


def test_pyramid_is_frozen_buffers():
    pyramid = RandomPyramid(seed=0)
    assert list(pyramid.parameters()) == []
    feats = pyramid(torch.zeros(1, 3, 32, 32))
    assert [f.shape[1] for f in feats] == [16, 32, 64, 128]
    assert [f.shape[-1] for f in feats] == [16, 8, 4, 2]


def test_perceptual_input_checks():
    d = PerceptualDistance()
    a, b = pair()
    with pytest.raises(RangeError):
        d(a + 1.0, b)
    with pytest.raises(RangeError):
        d(a, b - 1.0)
    with pytest.raises(BadChannelCount):
        d(torch.rand(1, 2, 8, 8), torch.rand(1, 2, 8, 8))
    with pytest.raises(ShapeMismatch):
        d(a, b[:1])
    # training skips the range check
    assert torch.isfinite(d(a * 1.2, b, check_range=False))


def test_external_extractor():
    with pytest.raises(ConfigError):
        PerceptualDistance(LossConfig(feature_net="external"))
    calls = []

    def extractor(x):
        calls.append(x.shape)
        return [x]

    d = PerceptualDistance(LossConfig(feature_net="external"), extractor=extractor)
    a, b = pair()
    assert float(d(a, b)) > 0.0
    assert calls[0] == (2, 3, 16, 16)


def test_extractor_from_import_path():
    assert load_extractor("tests.conftest:moment_features") is moment_features
    assert isinstance(load_extractor("threemti.losses:RandomPyramid"), RandomPyramid)
    bad_refs = (
        "tests.conftest",
        "tests.conftest:nope",
        "no_such_module:x",
        "threemti.losses:NORM_EPS",
    )
    for bad in bad_refs:
        with pytest.raises(ConfigError):
            load_extractor(bad)
    cfg = LossConfig(feature_net="external", extractor="tests.conftest:moment_features")
    a, b = pair()
    assert float(PerceptualDistance(cfg)(a, b)) == pytest.approx(
        float(PerceptualDistance(cfg, extractor=moment_features)(a, b))
    )


def shuffle_patches(img: np.ndarray, patch: int, rng: np.random.Generator) -> np.ndarray:
    c, h, w = img.shape
    tiles = img.reshape(c, h // patch, patch, w // patch, patch).transpose(1, 3, 0, 2, 4)
    flat = tiles.reshape(-1, c, patch, patch)[rng.permutation((h // patch) * (w // patch))]
    tiles = flat.reshape(h // patch, w // patch, c, patch, patch).transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(tiles.reshape(c, h, w))


def test_blur_is_closer_than_shuffled_patches():
    d = PerceptualDistance()
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        rgb, _ = generate_toy_scene(rng, 64)
        img = rgb.numpy()
        blurred = np.stack([gaussian_filter(ch, sigma=1.0) for ch in img])
        shuffled = shuffle_patches(img, 8, rng)
        x = torch.from_numpy(img)[None]
        near = float(d(x, torch.from_numpy(blurred)[None].clamp(0, 1)))
        far = float(d(x, torch.from_numpy(shuffled)[None]))
        wins += near < far
    assert wins >= 95


def test_total_loss_composition():
    a, b = pair()
    assert float(total_loss(a, a)) == 0.0
    assert torch.equal(total_loss(a, b, LossConfig(perceptual_weight=0.0)), l2_loss(a, b))
    terms = ThermalLoss(LossConfig(perceptual_weight=1.0))(a, b)
    separate = l2_loss(a, b) + perceptual_distance(a, b)
    assert float(terms.total) == pytest.approx(float(separate), abs=1e-7)
    assert float(terms.total) >= 0.0
    assert set(terms.as_floats()) == {"l2", "perceptual", "total"}
    with pytest.raises(ConfigError):
        LossConfig(perceptual_weight=-1.0)


def test_total_loss_gradients():
    g = torch.Generator().manual_seed(0)
    pred = (0.1 + 0.8 * torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64))
    gt = 0.1 + 0.8 * torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    pred.requires_grad_(True)
    loss_fn = ThermalLoss()
    check_gradients(lambda: loss_fn(pred, gt, check_range=False).total, [pred], count=50)

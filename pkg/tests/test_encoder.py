import numpy as np
import pytest

from protoreg.autodiff import DTensor, ShapeError, grad_check
from protoreg.encoder import EncoderConfig, encode, init_params


def _cfg(**kw):
    base = dict(input_shape=(32, 32), base_channels=(4, 8, 8), c_z=8, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


def test_latent_shape():
    cfg = _cfg()
    params = init_params(cfg)
    z = encode(np.zeros((32, 32, 1)), params, cfg)
    assert z.shape == (4, 4, 8)
    zb = encode(np.zeros((3, 32, 32, 1)), params, cfg)
    assert zb.shape == (3, 4, 4, 8)


def test_latent_in_open_unit_interval():
    cfg = _cfg()
    params = init_params(cfg)
    rng = np.random.default_rng(0)
    z = encode(rng.uniform(size=(32, 32, 1)), params, cfg)
    assert np.min(z.data) > 0.0 and np.max(z.data) < 1.0


def test_encode_deterministic():
    cfg = _cfg()
    params = init_params(cfg)
    img = np.random.default_rng(1).uniform(size=(32, 32, 1))
    z1 = encode(img, params, cfg)
    z2 = encode(img, params, cfg)
    np.testing.assert_array_equal(z1.data, z2.data)


def test_shape_mismatch():
    cfg = _cfg()
    params = init_params(cfg)
    with pytest.raises(ShapeError):
        encode(np.zeros((16, 16, 1)), params, cfg)


def test_grid_divisibility_validated():
    with pytest.raises(ValueError):
        _cfg(input_shape=(30, 30)).grid_shape


def test_no_addon_head_uses_base_channels():
    cfg = _cfg(use_addon_head=False)
    params = init_params(cfg)
    assert "h0.w" not in params.weights
    z = encode(np.random.default_rng(2).uniform(size=(32, 32, 1)), params, cfg)
    assert z.shape == (4, 4, 8)
    assert np.min(z.data) >= 0.0  # relu output, no sigmoid squeeze


def test_init_deterministic_and_seed_sensitive():
    cfg = _cfg()
    a, b = init_params(cfg), init_params(cfg)
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k].data, b.weights[k].data)
    c = init_params(cfg, rng_seed=99)
    assert any(not np.array_equal(a.weights[k].data, c.weights[k].data) for k in a.weights)


def test_init_fan_in_bound():
    cfg = _cfg()
    params = init_params(cfg)
    for name, t in params.items():
        if name.endswith(".w"):
            kh, kw, cin, _ = t.shape
            bound = np.sqrt(6.0 / (kh * kw * cin))
            assert np.max(np.abs(t.data)) <= bound
        else:
            np.testing.assert_array_equal(t.data, np.zeros_like(t.data))


def test_translation_covariance_of_conv_stages():
    # shifting the input by one stride step shifts the interior of the
    # stage-1 feature map by one cell (checked away from the padded border)
    cfg = _cfg(base_channels=(4,), c_z=4, input_shape=(16, 16), use_addon_head=False)
    params = init_params(cfg)
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(16, 16, 1))
    shifted = np.zeros_like(img)
    shifted[:, 2:, :] = img[:, :-2, :]   # shift right by one stride (2 px)
    z = encode(img, params, cfg).data
    zs = encode(shifted, params, cfg).data
    np.testing.assert_allclose(zs[2:-2, 3:-1, :], z[2:-2, 2:-2, :], atol=1e-12)


def test_encode_grad_check():
    cfg = _cfg(input_shape=(8, 8), base_channels=(3, 4), c_z=4, seed=1)
    params = init_params(cfg)
    rng = np.random.default_rng(4)
    img = DTensor(rng.uniform(size=(8, 8, 1)), requires_grad=True)
    leaves = [img] + params.tensors()

    def build(*leaves):
        return encode(leaves[0], params, cfg).sum()

    report = grad_check(build, leaves, h=1e-5, tol=1e-4)
    assert report.passed, repr(report)

import numpy as np
import pytest

from protoreg.pgmio import read_pgm, write_pgm
from protoreg.synthdata import (AugmentConfig, SynthConfig, affine_warp,
                                augment, generate, load_manifest, make_sample,
                                mirror_permutation, mirror_transform,
                                render_phantom)


def _cfg(**kw):
    base = dict(n_samples=20, image_size=32, label_min=0.0, label_max=30.0,
                noise_std=0.02, occlusion_strength=0.6, seed=7)
    base.update(kw)
    return SynthConfig(**base)


# ---------------------------------------------------------------------------
# pgm round trip


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(12, 10, 1))
    path = tmp_path / "x.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.shape == (12, 10, 1)
    np.testing.assert_allclose(back, img, atol=0.5 / 255.0 + 1e-12)
    quantized = np.rint(img * 255.0) / 255.0
    np.testing.assert_allclose(back, quantized, atol=1e-12)


def test_pgm_deterministic_bytes(tmp_path):
    img = np.random.default_rng(1).uniform(size=(8, 8, 1))
    write_pgm(tmp_path / "a.pgm", img)
    write_pgm(tmp_path / "b.pgm", img)
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


# ---------------------------------------------------------------------------
# generation


def test_regeneration_bit_identical():
    cfg = _cfg()
    a = make_sample(11, cfg)
    b = make_sample(11, cfg)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.label == b.label and a.side == b.side


def test_generate_deterministic(tmp_path):
    cfg = _cfg()
    d1 = generate(cfg, out_dir=tmp_path / "a")
    d2 = generate(cfg, out_dir=tmp_path / "b")
    np.testing.assert_array_equal(d1.images, d2.images)
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == \
        (tmp_path / "b" / "manifest.csv").read_bytes()
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        q = tmp_path / "b" / "images" / p.name
        assert p.read_bytes() == q.read_bytes()


def test_manifest_round_trip(tmp_path):
    cfg = _cfg()
    ds = generate(cfg, out_dir=tmp_path)
    back = load_manifest(tmp_path / "manifest.csv")
    assert len(back) == len(ds)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.sides == ds.sides
    quantized = np.rint(ds.images * 255.0) / 255.0
    np.testing.assert_allclose(back.images, quantized, atol=1e-12)


def test_mirror_invariant_of_sides():
    cfg = _cfg(noise_std=0.0)
    left = render_phantom(12.0, "left", cfg)
    right = render_phantom(12.0, "right", cfg)
    np.testing.assert_array_equal(mirror_transform(left), right)


def test_no_occlusion_sides_coincide_and_symmetric():
    cfg = _cfg(noise_std=0.0, occlusion_strength=0.0)
    left = render_phantom(7.0, "left", cfg)
    right = render_phantom(7.0, "right", cfg)
    np.testing.assert_array_equal(left, right)
    np.testing.assert_array_equal(mirror_transform(left), right)


def test_cortical_band_grows_with_label():
    cfg = _cfg(noise_std=0.0, occlusion_strength=0.0)
    counts = []
    for frac in (0.1, 0.5, 0.9):
        label = cfg.label_min + frac * (cfg.label_max - cfg.label_min)
        img = render_phantom(label, "left", cfg)
        counts.append(int(np.sum(img == 0.75)))
    assert counts[0] < counts[1] < counts[2]


def test_ventricle_shrinks_with_label():
    cfg = _cfg(noise_std=0.0, occlusion_strength=0.0)
    areas = []
    for frac in (0.1, 0.5, 0.9):
        label = cfg.label_min + frac * (cfg.label_max - cfg.label_min)
        img = render_phantom(label, "left", cfg)
        areas.append(int(np.sum(img == 0.08)))
    assert areas[0] > areas[1] > areas[2]


def test_sides_balanced_at_default_scale():
    ds = generate(SynthConfig())        # default 2000 samples
    frac_left = np.mean([s == "left" for s in ds.sides])
    assert abs(frac_left - 0.5) <= 0.05


def test_label_recoverable_from_structures():
    # least squares from (band pixel count, ventricle pixel count) to label
    cfg = _cfg(n_samples=60, noise_std=0.0, occlusion_strength=0.0)
    ds = generate(cfg)
    feats = np.stack([
        [np.sum(img == 0.75), np.sum(img == 0.08), 1.0] for img in ds.images])
    coef, *_ = np.linalg.lstsq(feats, ds.labels, rcond=None)
    pred = feats @ coef
    ss_res = np.sum((ds.labels - pred) ** 2)
    ss_tot = np.sum((ds.labels - ds.labels.mean()) ** 2)
    assert 1.0 - ss_res / ss_tot > 0.95


# ---------------------------------------------------------------------------
# transforms


def test_mirror_involutive():
    img = np.random.default_rng(2).uniform(size=(16, 16, 1))
    np.testing.assert_array_equal(mirror_transform(mirror_transform(img)), img)


def test_mirror_permutation_even_and_odd():
    p4 = mirror_permutation(4, 1)
    np.testing.assert_array_equal(p4, [3, 2, 1, 0])
    assert not np.any(p4 == np.arange(4))
    p5 = mirror_permutation(5, 1)
    np.testing.assert_array_equal(p5, [4, 3, 2, 1, 0])
    assert p5[2] == 2                     # fixed center column
    p22 = mirror_permutation(2, 2)
    np.testing.assert_array_equal(p22, [1, 0, 3, 2])


def test_mirror_permutation_matches_image_mirror():
    # patch p of mirror(img) contains the mirrored content of patch T(p)
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(8, 8, 1))
    t = mirror_permutation(4, 4)
    mirrored = mirror_transform(img)
    for p in range(16):
        r, c = divmod(p, 4)
        rt, ct = divmod(int(t[p]), 4)
        patch_m = mirrored[2 * r:2 * r + 2, 2 * c:2 * c + 2, 0]
        patch = img[2 * rt:2 * rt + 2, 2 * ct:2 * ct + 2, 0]
        np.testing.assert_array_equal(patch_m, patch[:, ::-1])


def test_augment_disabled_identity():
    img = np.random.default_rng(4).uniform(size=(32, 32, 1))
    out = augment(img, np.random.default_rng(0), AugmentConfig(enabled=False))
    np.testing.assert_array_equal(out, img)


def test_affine_identity_parameters():
    img = np.random.default_rng(5).uniform(size=(32, 32, 1))
    out = affine_warp(img, 0.0, 0.0, 0.0, 1.0)
    np.testing.assert_array_equal(out, img)


def test_affine_translation_moves_peak():
    img = np.zeros((32, 32, 1))
    img[16, 10, 0] = 1.0
    out = affine_warp(img, 0.0, 6.0, 0.0, 1.0)
    assert out[16, 16, 0] == 1.0
    assert np.sum(out > 0.5) == 1


def test_augment_ranges_respected():
    cfg = AugmentConfig()
    rng = np.random.default_rng(6)
    img = np.random.default_rng(7).uniform(0.2, 0.8, size=(32, 32, 1))
    for _ in range(10):
        out = augment(img, rng, cfg)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(label_min=2.0, label_max=1.0)
    with pytest.raises(ValueError):
        SynthConfig(noise_std=-0.1)

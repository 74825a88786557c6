import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from omniscale.imaging import (
    DegradationConfig,
    Image,
    PairSpec,
    bicubic_resample,
    center_crop,
    compute_scale,
    degrade,
    hr_size_for,
    lr_size_for,
    num_classes,
    random_crop,
    read_png,
    resample_weights,
    sample_pair_spec,
    synth_dataset,
    synth_image,
    to_bytes,
    write_png,
)


def rand_image(rng, h, w, c=3):
    return Image(rng.random((h, w, c)))


# ------------------------------------------------------------------ Image
def test_image_clamps_to_range():
    img = Image(np.array([[[-0.5, 0.5, 1.5]]]))
    assert img.data.min() == 0.0 and img.data.max() == 1.0
    s = Image(np.full((2, 2, 1), 3.0), "signed")
    assert np.all(s.data == 1.0)


@pytest.mark.parametrize("shape", [(0, 3, 3), (3, 3, 2), (3, 3, 4), (2, 2, 2, 3)])
def test_image_rejects_bad_shapes(shape):
    with pytest.raises(ValueError):
        Image(np.zeros(shape))


def test_image_rejects_unknown_tag_and_nan():
    with pytest.raises(ValueError):
        Image(np.zeros((2, 2, 3)), "percent")
    with pytest.raises(ValueError):
        Image(np.full((2, 2, 3), np.nan))


def test_signed_unit_round_trip():
    rng = np.random.default_rng(0)
    img = rand_image(rng, 5, 6)
    np.testing.assert_allclose(img.to_signed().to_unit().data, img.data, atol=1e-15)
    assert img.to_signed().data.min() >= -1.0


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = Image(rng.integers(0, 256, (7, 5, 3)) / 255.0)
    write_png(img, tmp_path / "a.png")
    back = read_png(tmp_path / "a.png")
    assert np.array_equal(to_bytes(back), to_bytes(img))
    gray = Image(rng.integers(0, 256, (4, 4, 1)) / 255.0)
    write_png(gray, tmp_path / "g.png")
    assert read_png(tmp_path / "g.png").channels == 1


def test_to_bytes_rounds_half_up():
    img = Image(np.array([[[0.5 / 255, 1.5 / 255, 254.5 / 255]]]))
    assert to_bytes(img).tolist() == [[[1, 2, 255]]]
    signed = Image(np.array([[[-1.0, 0.0, 1.0]]]), "signed")
    assert to_bytes(signed).tolist() == [[[0, 128, 255]]]


def test_read_png_signed_domain(tmp_path):
    img = Image(np.array([[[0.0, 1.0, 128 / 255]]]))
    write_png(img, tmp_path / "s.png")
    s = read_png(tmp_path / "s.png", "signed")
    np.testing.assert_allclose(s.data[0, 0], [-1.0, 1.0, 128 / 127.5 - 1.0])


# -------------------------------------------------------------- bicubic
def test_bicubic_identity_is_bit_exact():
    img = rand_image(np.random.default_rng(2), 4, 4)
    out = bicubic_resample(img, 4, 4)
    assert np.array_equal(out.data, img.data)


@pytest.mark.parametrize("size", [(1, 1), (3, 9), (17, 5), (40, 40)])
def test_bicubic_constant_image(size):
    img = Image(np.full((6, 7, 3), 0.3))
    out = bicubic_resample(img, *size)
    assert out.shape == (*size, 3)
    np.testing.assert_allclose(out.data, 0.3, atol=1e-12)


def test_bicubic_ramp_matches_direct_convolution():
    ramp = np.tile(np.array([0, 1 / 3, 2 / 3, 1.0])[None, :, None], (4, 1, 1))
    out = bicubic_resample(Image(ramp), 8, 8)
    want = oracles.bicubic(ramp, 8, 8)
    assert np.max(np.abs(out.data - np.clip(want, 0, 1))) < 1e-6


def test_bicubic_random_cases_match_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        h, w = rng.integers(2, 9, 2)
        oh, ow = rng.integers(1, 17, 2)
        img = rand_image(rng, h, w, int(rng.choice([1, 3])))
        got = bicubic_resample(img, int(oh), int(ow)).data
        want = np.clip(oracles.bicubic(img.data, int(oh), int(ow)), 0, 1)
        assert np.max(np.abs(got - want)) < 1e-10


def test_bicubic_rejects_non_positive():
    img = rand_image(np.random.default_rng(4), 3, 3)
    with pytest.raises(ValueError):
        bicubic_resample(img, 0, 3)


def test_bicubic_upscale_interpolates_samples():
    # at an exact x3 upscale every third output sits on an input pixel centre (offset 1)
    img = rand_image(np.random.default_rng(5), 5, 5, 1)
    out = bicubic_resample(img, 15, 15)
    np.testing.assert_allclose(out.data[1::3, 1::3], img.data, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.booleans())
def test_resample_rows_sum_to_one(n_in, n_out, aa):
    w = resample_weights(n_in, n_out, aa)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 24), st.integers(1, 24), st.integers(0, 2**16))
def test_bicubic_respects_range(h, w, oh, ow, seed):
    rng = np.random.default_rng(seed)
    for tag in ("unit", "signed"):
        lo = -1.0 if tag == "signed" else 0.0
        img = Image(lo + (1 - lo) * rng.random((h, w, 3)), tag)
        out = bicubic_resample(img, oh, ow)
        assert out.range_tag == tag
        assert out.data.min() >= lo and out.data.max() <= 1.0


# ---------------------------------------------------------- scale sizes
def test_compute_scale_grid_pairs():
    assert compute_scale(64, 340) == 5.3125
    assert compute_scale(32, 512) == 16.0
    assert compute_scale(64, 64) == 1.0
    with pytest.raises(ValueError):
        compute_scale(0, 64)


@pytest.mark.parametrize("lr,hr", [(64, 340), (64, 512), (32, 342), (32, 512), (32, 666), (32, 768)])
def test_rounding_rule_reproduces_grid_pairs(lr, hr):
    s = compute_scale(lr, hr)
    assert lr_size_for(hr, s) == lr
    assert hr_size_for(lr, s) == hr


def test_pair_spec_invariant():
    assert PairSpec.make(512, 4.0).lr_size == 128
    with pytest.raises(ValueError):
        PairSpec(64, 4.0, 17)
    with pytest.raises(ValueError):
        PairSpec.make(64, 1.0)


def test_sample_pair_spec_defaults_in_bounds():
    for seed in range(300):
        spec = sample_pair_spec(seed)
        assert 4.0 <= spec.scale <= 16.0
        assert 32 <= spec.hr_size <= 512
        assert spec.lr_size >= 8
        assert spec.lr_size == math.floor(spec.hr_size / spec.scale + 0.5)


def test_sample_pair_spec_forced_scale():
    spec = sample_pair_spec(0, hr_bounds=(512, 512), scale_bounds=(4, 4))
    assert spec.lr_size == 128


def test_sample_pair_spec_multiple():
    for seed in range(50):
        assert sample_pair_spec(seed, (32, 128), multiple=16).hr_size % 16 == 0


def test_sample_pair_spec_infeasible():
    with pytest.raises(ValueError):
        sample_pair_spec(0, hr_bounds=(32, 40), scale_bounds=(16, 16))
    with pytest.raises(ValueError):
        sample_pair_spec(0, hr_bounds=(64, 32))


def test_scale_histogram_covers_every_decile():
    scales = np.array([sample_pair_spec(seed).scale for seed in range(10000)])
    counts, _ = np.histogram(scales, bins=np.linspace(4, 16, 11))
    assert np.all(counts > 0)


# ------------------------------------------------------------ degradation
def test_degrade_constant_image():
    img = Image(np.full((32, 32, 3), 0.6))
    out = degrade(img, DegradationConfig(), PairSpec.make(32, 4.0), 0)
    assert out.shape == (8, 8, 3)
    np.testing.assert_allclose(out.data, 0.6, atol=1e-12)


def test_degrade_realworld_degenerate_chain_is_bicubic():
    img = rand_image(np.random.default_rng(6), 40, 40)
    spec = PairSpec.make(40, 5.0)
    cfg = DegradationConfig((0.0, 0.0), (0.0, 0.0), None, "realworld")
    assert np.array_equal(degrade(img, cfg, spec, 3).data, bicubic_resample(img, 8, 8).data)


def test_degrade_deterministic_and_seed_dependent():
    img = rand_image(np.random.default_rng(7), 48, 48)
    spec = PairSpec.make(48, 4.0)
    cfg = DegradationConfig(mode="realworld")
    a = degrade(img, cfg, spec, 11)
    b = degrade(img, cfg, spec, 11)
    c = degrade(img, cfg, spec, 12)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_degrade_bicubic_only_ignores_chain_settings():
    img = rand_image(np.random.default_rng(8), 32, 32)
    spec = PairSpec.make(32, 4.0)
    loud = DegradationConfig((1.0, 2.0), (0.1, 0.2), 4, "bicubic_only")
    assert np.array_equal(degrade(img, loud, spec, 0).data, bicubic_resample(img, 8, 8).data)


def test_degradation_config_validation():
    with pytest.raises(ValueError):
        DegradationConfig(blur_sigma_range=(2.0, 1.0))
    with pytest.raises(ValueError):
        DegradationConfig(quantize_levels=1)
    with pytest.raises(ValueError):
        DegradationConfig(mode="jpeg")


# ---------------------------------------------------------------- corpus
def test_synth_dataset_deterministic():
    a = synth_dataset(3, seed=5, size=32)
    b = synth_dataset(3, seed=5, size=32)
    for (x, cx), (y, cy) in zip(a, b):
        assert cx == cy and np.array_equal(to_bytes(x), to_bytes(y))


def test_synth_dataset_prefix_stable():
    small = synth_dataset(2, seed=9, size=24)
    big = synth_dataset(5, seed=9, size=24)
    assert np.array_equal(small[1][0].data, big[1][0].data)


@pytest.mark.parametrize("kind", ["basic", "extended"])
def test_synth_class_ids_in_range(kind):
    k = num_classes(kind)
    for img, c in synth_dataset(24, kind, seed=1, size=32):
        assert 0 <= c < k
        assert img.shape == (32, 32, 3)
        assert img.range_tag == "unit"


def test_synth_unknown_kind():
    with pytest.raises(ValueError):
        synth_dataset(2, kind="photos")
    with pytest.raises(ValueError):
        synth_dataset(0)


def _spectral_centroid(img: Image) -> float:
    """Mean radial frequency under the Hann-windowed power spectrum."""
    g = img.data.mean(axis=2)
    g = g - g.mean()
    win = np.hanning(g.shape[0])
    g = g * win[:, None] * win[None, :]
    power = np.abs(np.fft.fft2(g)) ** 2
    fy = np.fft.fftfreq(g.shape[0])[:, None]
    fx = np.fft.fftfreq(g.shape[1])[None, :]
    return float((power * np.sqrt(fy**2 + fx**2)).sum() / power.sum())


def test_classes_have_distinct_spectral_centroids():
    stats = []
    for c in range(num_classes()):
        v = [_spectral_centroid(synth_image(c, 96, seed)) for seed in range(24)]
        stats.append((np.mean(v), np.std(v) / np.sqrt(len(v))))
    stats.sort()
    for (m0, e0), (m1, e1) in zip(stats, stats[1:]):
        assert m1 - m0 > 3 * np.hypot(e0, e1), stats


def test_crops():
    img = rand_image(np.random.default_rng(10), 20, 30)
    c = center_crop(img, 10)
    assert np.array_equal(c.data, img.data[5:15, 10:20])
    r = random_crop(img, 12, np.random.default_rng(0))
    assert r.shape == (12, 12, 3)
    with pytest.raises(ValueError):
        random_crop(img, 21, np.random.default_rng(0))

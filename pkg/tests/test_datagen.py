import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from flowlab.datagen import (Dataset, GlyphBGSpec, gaussian_blur, interpolate, load_dataset,
                             make_annuli_dataset, make_blobs, make_glyph_bg,
                             mask_correlation_classify, pad_noise, save_dataset, simplex_means)
from flowlab.oracle import AnnulusSpec, CounterexampleParams, sample_annulus


# --- annuli ------------------------------------------------------------------

def test_annuli_pure_components():
    ds = make_annuli_dataset(CounterexampleParams(1.0, 0.0, 0.3, 3), 4000, 0)
    r = np.linalg.norm(ds.x, axis=1)
    assert np.all(r[ds.y == 0] <= 1.0)
    assert np.all((r[ds.y == 1] >= 2.0) & (r[ds.y == 1] <= 3.0))


def test_annuli_shell_fraction_and_balance():
    n = 100_000
    ds = make_annuli_dataset(CounterexampleParams(0.05, 0.02, 0.3, 4), n, 1)
    r = np.linalg.norm(ds.x[ds.y == 0], axis=1)
    assert abs((r >= 1.0).mean() - 0.95) < 0.01
    assert abs(ds.y.mean() - 0.5) < 3 / math.sqrt(n)


def test_annuli_radii_match_oracle_components():
    params = CounterexampleParams(0.3, 0.4, 0.5, 5)
    n = 10_000
    ds = make_annuli_dataset(params, 4 * n, 2)
    r = np.linalg.norm(ds.x, axis=1)
    groups = [
        ((ds.y == 0) & (r < 1), AnnulusSpec(0, 1, 5)),
        ((ds.y == 0) & (r >= 1), AnnulusSpec(1, 1.5, 5)),
        ((ds.y == 1) & (r < 1), AnnulusSpec(0, 1, 5)),
        ((ds.y == 1) & (r >= 2), AnnulusSpec(2, 3, 5)),
    ]
    assert sum(int(m.sum()) for m, _ in groups) == len(r)
    for mask, spec in groups:
        a = r[mask]
        b = np.linalg.norm(sample_annulus(spec, n, 3), axis=1)
        crit = 1.358 * math.sqrt((len(a) + len(b)) / (len(a) * len(b)))
        assert ks_2samp(a, b).statistic < crit


def test_annuli_requires_two_dimensions():
    with pytest.raises(ValueError):
        make_annuli_dataset(CounterexampleParams(0.5, 0.5, 0.3, 1), 10, 0)


# --- blobs -------------------------------------------------------------------

@pytest.mark.parametrize("c,d", [(2, 2), (3, 2), (4, 5), (10, 9)])
def test_simplex_means_equidistant(c, d):
    m = simplex_means(c, d, 7.5)
    dist = np.linalg.norm(m[:, None] - m[None], axis=2)
    off = dist[~np.eye(c, dtype=bool)]
    np.testing.assert_allclose(off, 7.5, atol=1e-9)


def test_blobs_zero_noise_sits_on_means():
    ds = make_blobs(3, 4, 5.0, 0.0, 50, 0)
    np.testing.assert_array_equal(ds.x, simplex_means(3, 4, 5.0)[ds.y])


def test_blobs_bayes_accuracy():
    ds = make_blobs(2, 2, 6.0, 1.0, 20_000, 1)
    means = simplex_means(2, 2, 6.0)
    pred = np.argmin(((ds.x[:, None] - means[None]) ** 2).sum(axis=2), axis=1)
    assert (pred == ds.y).mean() > 0.997


def test_blobs_validation():
    with pytest.raises(ValueError):
        make_blobs(1, 2, 1.0, 1.0, 10, 0)
    with pytest.raises(ValueError):
        make_blobs(5, 2, 1.0, 1.0, 10, 0)


# --- glyph backgrounds -------------------------------------------------------

def test_glyph_pure_glyphs_classified_perfectly():
    spec = GlyphBGSpec(amplitude=0.0, glyph_noise=0.0)
    ds = make_glyph_bg(spec, 500, 0)
    assert (mask_correlation_classify(spec, ds.x) == ds.y).mean() == 1.0


@pytest.mark.parametrize("blur", [0.0, 1.0, 5.0])
def test_glyph_reference_classifier_accuracy(blur):
    spec = GlyphBGSpec(blur_sigma=blur)
    ds = make_glyph_bg(spec, 2000, 1)
    assert (mask_correlation_classify(spec, ds.x) == ds.y).mean() >= 0.99
    assert np.all((ds.x >= 0) & (ds.x <= 1))
    assert ds.dim == 64 and ds.n_classes == 4


def test_blur_lowers_background_pixel_variance():
    var = {}
    for blur in (0.0, 1.0, 5.0):
        spec = GlyphBGSpec(intensity=0.0, glyph_noise=0.0, blur_sigma=blur)
        x = make_glyph_bg(spec, 4000, 2).x
        var[blur] = x.var(axis=0).mean()
    assert var[5.0] < var[1.0] < var[0.0]


def test_glyph_spec_validation():
    with pytest.raises(ValueError):
        GlyphBGSpec(glyphs=("hbar", "hbar"))
    with pytest.raises(ValueError):
        GlyphBGSpec(blur_sigma=-1.0)
    with pytest.raises(ValueError):
        GlyphBGSpec(amplitude=1.5)
    with pytest.raises(ValueError):
        GlyphBGSpec(contrast_min=0.0)


# --- blur --------------------------------------------------------------------

def test_blur_identity_and_constant():
    img = np.random.default_rng(0).random((8, 8))
    np.testing.assert_array_equal(gaussian_blur(img, 0.0), img)
    np.testing.assert_allclose(gaussian_blur(np.full((6, 9), 0.37), 1.5), 0.37, atol=1e-15)
    with pytest.raises(ValueError):
        gaussian_blur(img, -0.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), sigma=st.floats(0.1, 6.0), h=st.integers(3, 12),
       w=st.integers(3, 12))
def test_blur_preserves_mean(seed, sigma, h, w):
    img = np.random.default_rng(seed).random((h, w))
    assert abs(gaussian_blur(img, sigma).mean() - img.mean()) < 1e-9


def test_blur_reduces_white_noise_variance():
    img = np.random.default_rng(1).random((32, 32))
    assert gaussian_blur(img, 2.0).var() < img.var()


def test_blur_batched_matches_single():
    imgs = np.random.default_rng(2).random((3, 8, 8))
    out = gaussian_blur(imgs, 1.2)
    for i in range(3):
        np.testing.assert_allclose(out[i], gaussian_blur(imgs[i], 1.2), rtol=0, atol=1e-15)


# --- padding and interpolation -----------------------------------------------

def test_pad_noise_examples():
    x = np.random.default_rng(0).normal(size=(100, 3))
    xp, corr = pad_noise(x, 4, 1.0, 1)
    assert corr == 0.0
    np.testing.assert_array_equal(xp[:, :3], x)
    _, corr = pad_noise(x, 2, 1 / 128, 1)
    assert corr == pytest.approx(2 * math.log(128))
    xp, _ = pad_noise(x, 5, 0.25, 2)
    assert np.all((xp[:, 3:] >= 0) & (xp[:, 3:] <= 0.25))
    for k, s in ((0, 1.0), (2, 0.0)):
        with pytest.raises(ValueError):
            pad_noise(x, k, s, 0)


def test_interpolate_examples():
    x0, x1 = np.array([0.0, 0.0]), np.array([2.0, 4.0])
    np.testing.assert_array_equal(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_array_equal(interpolate(x0, x1, 0.5), [1.0, 2.0])
    path = interpolate(x0, x1, np.linspace(0, 1, 5))
    np.testing.assert_allclose(np.linalg.norm(path - x0, axis=1),
                               np.linspace(0, 1, 5) * np.linalg.norm(x1 - x0))
    with pytest.raises(ValueError):
        interpolate(x0, np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        interpolate(x0, x1, 1.5)


# --- datasets and files ------------------------------------------------------

def test_generators_reproducible():
    spec = GlyphBGSpec(blur_sigma=1.0)
    for make in (lambda s: make_glyph_bg(spec, 50, s), lambda s: make_blobs(3, 2, 4.0, 1.0, 50, s),
                 lambda s: make_annuli_dataset(CounterexampleParams(0.2, 0.2, 0.3, 3), 50, s)):
        a, b, c = make(5), make(5), make(6)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        assert not np.array_equal(a.x, c.x)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1, 2], 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), [0], 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1, 0], 2, train_idx=np.array([0, 1]), test_idx=np.array([1]))
    ds = make_blobs(2, 2, 4.0, 1.0, 101, 0).split(0.25, 0)
    assert len(ds.train) + len(ds.test) == 101
    assert len(set(ds.train_idx) & set(ds.test_idx)) == 0


def test_save_load_round_trip(tmp_path):
    ds = make_glyph_bg(GlyphBGSpec(blur_sigma=1.0), 30, 0).split(0.3, 1)
    path = tmp_path / "glyph.txt"
    save_dataset(ds, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "D=64 C=4"
    assert len(lines) == 31 and len(lines[1].split(",")) == 65
    back = load_dataset(path)
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.train_idx, ds.train_idx)
    assert back.meta["kind"] == "glyph_bg" and back.meta["blur_sigma"] == 1.0


def test_load_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("dimension 3\n0,1,2,3\n")
    with pytest.raises(ValueError):
        load_dataset(p)

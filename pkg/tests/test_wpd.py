import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbmd.data import EegWindow
from mbmd.errors import AlignmentError, ShapeError
from mbmd.wpd import (
    DB4,
    _analysis_matrix,
    _split,
    band_grouping_preset,
    band_reconstruct,
    decompose_array,
    decompose_bands,
    frequency_order,
    leaf_mask,
    wpd_analyze,
    wpd_synthesize,
)

FS = 128.0
T512 = np.arange(512) / FS


def _window(x):
    return EegWindow("p", 0, FS, np.atleast_2d(x), "p/t", 0)


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_quadrature_mirror_filters():
    g, h = DB4.synth_low, DB4.synth_high
    n = len(g)
    np.testing.assert_allclose(h, [(-1) ** k * g[n - 1 - k] for k in range(n)])
    assert np.isclose(g.sum(), np.sqrt(2)) and np.isclose(np.dot(g, g), 1.0)
    assert abs(h.sum()) < 1e-12
    # analysis taps are time-reversed synthesis taps
    np.testing.assert_array_equal(DB4.low, g[::-1])


@pytest.mark.parametrize("n", [4, 8, 64, 512])
def test_split_matrix_orthogonal(n):
    a = _analysis_matrix(n)
    np.testing.assert_allclose(a @ a.T, np.eye(n), atol=1e-12)


def test_single_level_matches_pywavelets():
    pywt = pytest.importorskip("pywt")
    x = np.random.default_rng(0).standard_normal(256)
    ca, cd = pywt.dwt(x, "db4", mode="periodization")
    # same periodized transform, differing only in where the wrap starts
    lo, hi = _split(np.roll(x, 3))
    np.testing.assert_allclose(lo, ca, atol=1e-12)
    np.testing.assert_allclose(hi, cd, atol=1e-12)


def test_filters_match_pywavelets():
    pywt = pytest.importorskip("pywt")
    w = pywt.Wavelet("db4")
    np.testing.assert_allclose(DB4.synth_low, w.rec_lo, atol=1e-15)
    np.testing.assert_allclose(DB4.synth_high, w.rec_hi, atol=1e-15)


def test_impulse_energy():
    x = np.zeros(512)
    x[0] = 1.0
    tree = wpd_analyze(x, 4)
    assert abs((tree.leaves() ** 2).sum() - 1.0) < 1e-9
    assert tree.levels[4].shape == (16, 32)


def test_zero_signal_zero_tree():
    tree = wpd_analyze(np.zeros(512), 4)
    assert all(not lvl.any() for lvl in tree.levels)


def test_length_not_divisible():
    with pytest.raises(ShapeError):
        wpd_analyze(np.zeros(100), 4)
    with pytest.raises(ShapeError):
        wpd_analyze(np.zeros(64), 0)


def test_10hz_concentrates_in_8_12_leaf():
    tree = wpd_analyze(np.sin(2 * np.pi * 10 * T512), 4)
    e = (tree.leaves("freq") ** 2).sum(-1)
    assert e[2] / e.sum() >= 0.80  # leaf 2 spans 8-12 Hz


def test_frequency_order_tracks_tones():
    # leaf centers 2, 6, ..., 62 Hz: each tone peaks in its own leaf
    for leaf in range(16):
        tree = wpd_analyze(np.sin(2 * np.pi * (4 * leaf + 2) * T512), 4)
        e = (tree.leaves("freq") ** 2).sum(-1)
        assert e.argmax() == leaf


def test_frequency_order_is_gray_decode():
    # freq index f of tree node p satisfies p = f XOR (f >> 1)
    order = frequency_order(4)
    for f, node in enumerate(order):
        assert node == f ^ (f >> 1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(1, 5))
def test_level_energy_conservation(seed, depth):
    x = np.random.default_rng(seed).standard_normal((2, 256))
    tree = wpd_analyze(x, depth)
    for d in range(depth):
        parent = (tree.levels[d] ** 2).sum(-1)
        children = (tree.levels[d + 1] ** 2).reshape(2, -1, 2, tree.levels[d + 1].shape[-1]).sum(axis=(-1, -2))
        np.testing.assert_allclose(children, parent, rtol=1e-9)


def test_full_band_perfect_reconstruction():
    x = np.random.default_rng(1).standard_normal(512)
    tree = wpd_analyze(x, 4)
    assert _rel(band_reconstruct(tree, (0, 64)), x) < 1e-6
    assert _rel(wpd_synthesize(tree.levels[4]), x) < 1e-12


def test_empty_band_is_zero():
    tree = wpd_analyze(np.random.default_rng(2).standard_normal(512), 4)
    assert not band_reconstruct(tree, (8, 8)).any()


def test_dc_lands_in_delta():
    x = np.ones(512)
    delta = band_reconstruct(wpd_analyze(x, 4), (0, 4))
    assert (delta**2).sum() >= 0.99 * (x**2).sum()


def test_misaligned_band():
    tree = wpd_analyze(np.zeros(512), 4)
    with pytest.raises(AlignmentError):
        band_reconstruct(tree, (0, 3))
    with pytest.raises(AlignmentError):
        leaf_mask(4, (0, 68))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), split=st.integers(1, 15))
def test_reconstruction_additivity(seed, split):
    x = np.random.default_rng(seed).standard_normal(512)
    tree = wpd_analyze(x, 4)
    a = band_reconstruct(tree, (0, 4 * split))
    b = band_reconstruct(tree, (4 * split, 64))
    np.testing.assert_allclose(a + b, band_reconstruct(tree, (0, 64)), atol=1e-9)


def test_six_band_sum_recovers_window():
    x = np.random.default_rng(3).standard_normal((3, 512))
    bands = decompose_bands(_window(x), band_grouping_preset(6))
    assert list(bands.signals) == ["delta", "theta", "alpha", "beta", "gamma", "other"]
    assert _rel(sum(bands.signals.values()), x) < 1e-6
    assert all(s.shape == x.shape for s in bands.signals.values())


def test_20hz_into_beta():
    bands = decompose_bands(_window(np.sin(2 * np.pi * 20 * T512)))
    energy = {k: (v**2).sum() for k, v in bands.signals.items()}
    assert energy["beta"] / sum(energy.values()) >= 0.80


def test_zero_window_zero_bands():
    bands = decompose_bands(_window(np.zeros((2, 512))))
    assert all(not s.any() for s in bands.signals.values())


def test_residual_small_for_bandlimited():
    rng = np.random.default_rng(4)
    x = sum(np.sin(2 * np.pi * f * T512 + rng.uniform(0, 6)) for f in (1.5, 7.0, 13.25, 40.0))
    other = decompose_bands(_window(x)).signals["other"]
    assert np.sqrt(np.mean(other**2)) < 0.05 * np.sqrt(np.mean(x**2))


def test_presets():
    six = band_grouping_preset(6)
    assert six.num_branches == 6 and six.bands[0] == ("delta", 0, 4)
    three = band_grouping_preset(3)
    assert [(lo, hi) for _, lo, hi in three.bands] == [(0, 8), (8, 32), (32, 64)]
    assert three.num_branches == 3
    two = band_grouping_preset(2)
    assert two.bands[0][1:] == (0, 16) and two.num_branches == 2
    with pytest.raises(ValueError):
        band_grouping_preset(4)


@pytest.mark.parametrize("b", [2, 3, 6])
def test_grouped_bands_sum_to_window(b):
    x = np.random.default_rng(5).standard_normal((2, 512))
    stacked = decompose_array(x, band_grouping_preset(b))
    assert stacked.shape == (2, b, 512)
    assert _rel(stacked.sum(axis=1), x) < 1e-6

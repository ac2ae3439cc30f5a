import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binaudition.errors import NoValidFrequencyError
from binaudition.grid import build_direction_grid
from binaudition.hrtf import synthesize_hrtf
from binaudition.music import (
    MusicLocalizer, eig2, eig_ratio, music_estimate, music_spectrum, select_bins_by_eigratio,
    spatial_correlation,
)


@pytest.fixture(scope="module")
def hset():
    return synthesize_hrtf(build_direction_grid())


def random_hermitian(rng, n=200):
    a = rng.standard_normal((n, 2, 2)) + 1j * rng.standard_normal((n, 2, 2))
    return a + np.conj(np.swapaxes(a, -1, -2))


def test_eig2_examples():
    l1, l2, e1, _ = eig2(np.eye(2))
    assert (l1, l2) == (1.0, 1.0)
    l1, l2, e1, _ = eig2(np.array([[2.0, 0], [0, 1.0]]))
    assert (l1, l2) == (2.0, 1.0)
    np.testing.assert_allclose(np.abs(e1), [1.0, 0.0])


def test_eig2_residual():
    R = random_hermitian(np.random.default_rng(0))
    l1, l2, e1, e2 = eig2(R)
    assert np.all(l1 >= l2)
    for lam, e in ((l1, e1), (l2, e2)):
        res = np.einsum("nij,nj->ni", R, e) - lam[:, None] * e
        assert np.max(np.abs(res)) < 1e-10
    np.testing.assert_allclose(np.linalg.norm(e1, axis=-1), 1.0, atol=1e-12)
    assert np.max(np.abs(np.sum(np.conj(e1) * e2, axis=-1))) < 1e-12
    ref = np.linalg.eigvalsh(R)
    np.testing.assert_allclose(l1, ref[:, 1], atol=1e-10)
    np.testing.assert_allclose(l2, ref[:, 0], atol=1e-10)


def test_correlation_identical_channels():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    R = spatial_correlation(x, x)
    c = np.mean(np.abs(x) ** 2)
    np.testing.assert_allclose(R, c * np.ones((2, 2)), atol=1e-12)
    l1, l2, _, _ = eig2(R)
    assert l2 == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        spatial_correlation(x[:1], x[:1])


def test_correlation_independent_noise_decorrelates():
    rng = np.random.default_rng(2)
    m = 10000
    xl = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    xr = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    R = spatial_correlation(xl, xr)
    assert abs(R[0, 1]) / R[0, 0].real < 0.05
    np.testing.assert_allclose(R, np.conj(R.T), atol=1e-12)
    assert select_bins_by_eigratio(R[None], 10.0)[0] == np.False_


def test_rank_one_selected_and_argmax(hset):
    b = 200
    sl, sr = hset.normalized([b])
    sl, sr = sl[:, 0], sr[:, 0]
    k = 77
    a = np.array([sl[k], sr[k]])
    R = np.outer(a, np.conj(a))
    assert np.isinf(eig_ratio(R))
    assert select_bins_by_eigratio(R[None])[0]
    scores = music_spectrum(R, sl, sr)
    assert np.all(np.isfinite(scores)) and np.all(scores >= 0)
    best = int(np.argmax(scores))
    if best != k:  # a parallel steering vector is the only acceptable alias
        assert abs(np.vdot(a, [sl[best], sr[best]])) == pytest.approx(1.0, abs=1e-9)
    assert scores[k] >= scores.max() * (1 - 1e-9) or scores[k] == 1e24


def test_identity_scores_finite(hset):
    sl, sr = hset.normalized([50])
    s = music_spectrum(np.eye(2), sl[:, 0], sr[:, 0])
    assert np.all(np.isfinite(s))


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_spectrum_scale_invariant(c):
    rng = np.random.default_rng(3)
    R = random_hermitian(rng, 1)[0] + 5 * np.eye(2)
    sl = np.exp(1j * rng.uniform(0, 6, 30)) * 0.6
    sr = np.exp(1j * rng.uniform(0, 6, 30)) * 0.8
    np.testing.assert_allclose(music_spectrum(c * R, sl, sr), music_spectrum(R, sl, sr), rtol=1e-8)


def test_estimate_errors(hset):
    z = np.zeros((4, 2048), complex)
    rng = np.random.default_rng(4)
    noise = rng.standard_normal((4, 2048)) + 1j * rng.standard_normal((4, 2048))
    with pytest.raises(ValueError):
        music_estimate(noise[:1], noise[:1], hset)
    with pytest.raises(NoValidFrequencyError):
        music_estimate(noise, rng.standard_normal((4, 2048)) + 0j, hset, threshold=1e12)
    est = MusicLocalizer().fit(hset)
    assert est.get_params()["threshold"] == 10.0
    assert z.shape == (4, 2048)


def test_clean_white_source_localized(hset):
    grid = build_direction_grid()
    rng = np.random.default_rng(5)
    k = 30
    s = rng.standard_normal((16, 1024)) + 1j * rng.standard_normal((16, 1024))
    sl, sr = hset.normalized()
    xl = np.concatenate([s * sl[k], np.zeros((16, 1024))], axis=1)
    xr = np.concatenate([s * sr[k], np.zeros((16, 1024))], axis=1)
    xl += 1e-3 * (rng.standard_normal(xl.shape) + 1j * rng.standard_normal(xl.shape))
    xr += 1e-3 * (rng.standard_normal(xr.shape) + 1j * rng.standard_normal(xr.shape))
    est, _ = music_estimate(xl, xr, hset)
    assert np.degrees(np.arccos(np.clip(grid.directions[k] @ grid.directions[est], -1, 1))) < 11.8

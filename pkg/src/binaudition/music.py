"""Two-channel MUSIC baseline with HRTF steering vectors."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import NoValidFrequencyError

SCORE_CAP = 1e24
EIG_RATIO = 10.0
F_LO, F_HI = 100.0, 12000.0


def spatial_correlation(xl, xr):
    """Frame-averaged 2x2 correlation matrices.

    ``xl``/``xr`` have shape (M, ...) with M >= 2 frames; the result has
    shape ``(..., 2, 2)``.
    """
    xl, xr = np.asarray(xl), np.asarray(xr)
    if xl.shape[0] < 2:
        raise ValueError("need at least 2 frames for a spatial correlation")
    x = np.stack([xl, xr], axis=-1)
    return np.einsum("m...i,m...j->...ij", x, x.conj()) / x.shape[0]


def eig2(R):
    """Closed-form eigendecomposition of Hermitian 2x2 matrices.

    Returns ``(lam1, lam2, e1, e2)`` with lam1 >= lam2 and orthonormal
    eigenvectors, broadcasting over leading axes.
    """
    R = np.asarray(R, dtype=np.complex128)
    a = R[..., 0, 0].real
    d = R[..., 1, 1].real
    b = R[..., 0, 1]
    half_tr = 0.5 * (a + d)
    disc = np.sqrt((0.5 * (a - d)) ** 2 + np.abs(b) ** 2)
    lam1, lam2 = half_tr + disc, half_tr - disc
    # e1 from the better-conditioned of two candidate forms
    use_first = a >= d
    v_first = np.stack([lam1 - d, np.conj(b)], axis=-1)
    v_second = np.stack([b, lam1 - a], axis=-1)
    e1 = np.where(use_first[..., None], v_first, v_second)
    n = np.linalg.norm(e1, axis=-1, keepdims=True)
    degenerate = n[..., 0] < 1e-300
    e1 = np.where(degenerate[..., None], np.array([1.0, 0.0]), e1 / np.where(n > 0, n, 1.0))
    e2 = np.stack([-np.conj(e1[..., 1]), np.conj(e1[..., 0])], axis=-1)
    return lam1, lam2, e1, e2


def music_spectrum(R, steer_l, steer_r, cap=SCORE_CAP):
    """Pseudo-spectrum 1 / |a_k^H e2|^2 per direction.

    ``steer_l``/``steer_r`` are unit-normalized steering components with
    shape (D,) for one bin or (B, D) matched to a stack of B matrices.
    """
    _, _, _, e2 = eig2(R)
    proj = np.conj(steer_l) * e2[..., None, 0] + np.conj(steer_r) * e2[..., None, 1]
    p = np.abs(proj) ** 2
    with np.errstate(divide="ignore"):
        return np.where(p < 1.0 / cap, cap, 1.0 / p)


def eig_ratio(R):
    lam1, lam2, _, _ = eig2(R)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(lam2 > 0, lam1 / np.where(lam2 > 0, lam2, 1.0), np.inf)


def select_bins_by_eigratio(R, threshold=EIG_RATIO):
    if threshold <= 1:
        raise ValueError("threshold must exceed 1")
    return eig_ratio(R) >= threshold


def band_bins(n_fft, sample_rate, f_lo=F_LO, f_hi=F_HI):
    lo = int(np.ceil(f_lo * n_fft / sample_rate))
    hi = int(np.floor(f_hi * n_fft / sample_rate))
    return np.arange(lo, hi + 1)


def music_estimate(xl, xr, hset, threshold=EIG_RATIO, bins=None):
    """Sum per-bin pseudo-spectra over eigenratio-selected bins and take the argmax.

    ``xl``/``xr``: complex spectra, shape (M, N). Returns (direction id,
    aggregated spectrum).
    """
    xl, xr = np.atleast_2d(xl), np.atleast_2d(xr)
    if xl.shape[0] < 2:
        raise ValueError("need at least 2 frames")
    if bins is None:
        bins = band_bins(hset.n_fft, hset.sample_rate)
    R = spatial_correlation(xl[:, bins], xr[:, bins])
    sel = select_bins_by_eigratio(R, threshold)
    if not sel.any():
        raise NoValidFrequencyError("no bin passed the eigenvalue-ratio test")
    sl, sr = hset.normalized(bins[sel])
    spec = music_spectrum(R[sel], sl.T, sr.T).sum(axis=0)
    return int(np.argmax(spec)), spec


class MusicLocalizer(BaseEstimator):
    def __init__(self, threshold=EIG_RATIO, f_lo=F_LO, f_hi=F_HI):
        self.threshold = threshold
        self.f_lo = f_lo
        self.f_hi = f_hi

    def fit(self, hset, y=None):
        self.hset_ = hset
        self.bins_ = band_bins(hset.n_fft, hset.sample_rate, self.f_lo, self.f_hi)
        return self

    def spectrum(self, xl, xr):
        check_is_fitted(self, "hset_")
        return music_estimate(xl, xr, self.hset_, self.threshold, self.bins_)[1]

    def predict(self, xl, xr):
        check_is_fitted(self, "hset_")
        return music_estimate(xl, xr, self.hset_, self.threshold, self.bins_)[0]

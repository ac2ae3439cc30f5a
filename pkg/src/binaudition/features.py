"""Interaural level / phase features per frequency bin."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import SilentBinError, SilentChannelError

EPS = 1e-12


@dataclass(frozen=True)
class NormalizedPair:
    xhat_left: complex
    xhat_right: complex


@dataclass(frozen=True)
class IldIpdFeature:
    ild: float
    ipd: tuple
    bin: int

    def as_array(self):
        return np.array([self.ild, *self.ipd])


def normalize_pair(xl, xr, eps=EPS) -> NormalizedPair:
    energy = abs(xl) ** 2 + abs(xr) ** 2
    if not energy > eps:
        raise SilentBinError(f"bin energy {energy:.3g} below {eps}")
    norm = np.sqrt(energy)
    return NormalizedPair(complex(xl) / norm, complex(xr) / norm)


def _check_channels(pair, eps):
    ml, mr = abs(pair.xhat_left), abs(pair.xhat_right)
    if ml <= eps:
        raise SilentChannelError("left channel is silent")
    if mr <= eps:
        raise SilentChannelError("right channel is silent")
    return ml, mr


def ild(pair: NormalizedPair, eps=EPS) -> float:
    """Natural-log magnitude difference, left minus right."""
    ml, mr = _check_channels(pair, eps)
    return float(np.log(ml) - np.log(mr))


def ipd(pair: NormalizedPair, eps=EPS):
    ml, mr = _check_channels(pair, eps)
    ul = pair.xhat_left / ml
    ur = pair.xhat_right / mr
    return (ul.real, ul.imag, ur.real, ur.imag)


def feature_vector(frame, bin: int, eps=EPS) -> IldIpdFeature:
    """5-vector (ILD, IPD[0..3]) of one BinauralFrame at an eligible bin."""
    n = len(frame.spectrum_left)
    if not 1 <= bin < n // 2:
        raise ValueError(f"bin {bin} outside [1, {n // 2})")
    pair = normalize_pair(frame.spectrum_left[bin], frame.spectrum_right[bin], eps)
    return IldIpdFeature(ild(pair, eps), ipd(pair, eps), bin)


def compute_features(xl, xr, eps=EPS):
    """Vectorized feature extraction.

    Parameters
    ----------
    xl, xr : complex array_like, same shape
        Left / right spectral values.

    Returns
    -------
    feats : ndarray, shape ``xl.shape + (5,)``
        Rows where ``valid`` is False are filled with NaN.
    valid : bool ndarray, shape ``xl.shape``
        False for silent bins and bins where one channel is silent.
    """
    xl = np.asarray(xl, dtype=np.complex128)
    xr = np.asarray(xr, dtype=np.complex128)
    energy = np.abs(xl) ** 2 + np.abs(xr) ** 2
    norm = np.sqrt(np.where(energy > eps, energy, 1.0))
    hl, hr = xl / norm, xr / norm
    ml, mr = np.abs(hl), np.abs(hr)
    valid = (energy > eps) & (ml > eps) & (mr > eps)
    ml_safe = np.where(valid, ml, 1.0)
    mr_safe = np.where(valid, mr, 1.0)
    ul, ur = hl / ml_safe, hr / mr_safe
    feats = np.stack(
        [np.log(ml_safe) - np.log(mr_safe), ul.real, ul.imag, ur.real, ur.imag], axis=-1
    )
    feats[~valid] = np.nan
    return feats, valid


def export_features_csv(feats, bins, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "ild", "ipd0", "ipd1", "ipd2", "ipd3"])
        for b, f in zip(bins, feats):
            w.writerow([int(b), *(repr(float(v)) for v in f)])


class BinauralFeatures(TransformerMixin, BaseEstimator):
    """Stateless transformer from stacked spectra to ILD/IPD features.

    ``X`` is complex with shape ``(n_samples, 2)`` (left, right) and the
    output has shape ``(n_samples, 5)``. Silent rows raise unless
    ``on_silent='nan'``.
    """

    def __init__(self, eps=EPS, on_silent="raise"):
        self.eps = eps
        self.on_silent = on_silent

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n_samples, 2)")
        self.n_features_in_ = 2
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.complex128)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n_samples, 2)")
        feats, valid = compute_features(X[:, 0], X[:, 1], self.eps)
        if self.on_silent == "raise" and not valid.all():
            raise SilentBinError(f"{int((~valid).sum())} silent rows")
        return feats

"""Parametric rigid-sphere HRTF model, analysis maps and the binary container.

The model only needs to reproduce the cues the estimators rely on:
interaural delay (Woodworth), first-order head shadow and an
elevation-dependent pinna notch per ear.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CompatibilityError, FormatError
from .frontend import N_FFT, SAMPLE_RATE
from .grid import DirectionGrid, build_direction_grid, from_angles, to_angles

MAGIC = b"HRTF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")


@dataclass(frozen=True)
class HeadModel:
    head_radius: float = 0.0875
    speed_of_sound: float = 343.0
    ear_azimuth: float = 100.0
    ear_elevation: float = 0.0
    shadow_alpha_min: float = 0.1
    shadow_theta_min: float = 150.0
    notch_low_hz: float = 6000.0
    notch_span_hz: float = 4000.0
    notch_depth_db: float = 15.0
    notch_q: float = 5.0
    notch_ear_offset_hz: float = 200.0


def _ear_axes(params: HeadModel):
    az, el = params.ear_azimuth, params.ear_elevation
    return from_angles(az, el), from_angles(-az, el)


def _ear_delay(gamma, params):
    """Per-ear arrival time relative to the head centre, plus a bulk a/c so it is >= 0.

    For ears at +-90 deg the interaural difference reduces to Woodworth's
    (a/c)(g + sin g).
    """
    a_c = params.head_radius / params.speed_of_sound
    t = np.where(gamma <= np.pi / 2, -np.cos(gamma), gamma - np.pi / 2)
    return a_c * (t + 1.0)


def _shadow(gamma, omega, params):
    # one-pole/one-zero spherical-head shadow filter
    w0 = params.speed_of_sound / params.head_radius
    amin = params.shadow_alpha_min
    alpha = (1 + amin / 2) + (1 - amin / 2) * np.cos(gamma * 180.0 / params.shadow_theta_min)
    return (1 + 1j * alpha * omega / (2 * w0)) / (1 + 1j * omega / (2 * w0))


def _notch(f, fc, params):
    g = 10.0 ** (-params.notch_depth_db / 20.0)
    q = params.notch_q
    s = 1j * f / fc
    return (s * s + s * g / q + 1) / (s * s + s / q + 1)


def sphere_hrtf(directions, freqs, params: HeadModel = HeadModel()):
    """Evaluate the model.

    Parameters
    ----------
    directions : array, shape (D, 3) or (3,)
    freqs : array of Hz, shape (F,)

    Returns
    -------
    A_l, A_r : complex arrays, shape (D, F) (or (F,) for a single direction)
    """
    d = np.asarray(directions, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    f = np.asarray(freqs, dtype=np.float64)[None, :]
    omega = 2 * np.pi * f
    e_l, e_r = _ear_axes(params)
    cos_l, cos_r = d @ e_l, d @ e_r
    g_l = np.arccos(np.clip(cos_l, -1, 1))[:, None]
    g_r = np.arccos(np.clip(cos_r, -1, 1))[:, None]
    _, el = to_angles(d)
    fc = params.notch_low_hz + params.notch_span_hz * (el + 90.0) / 180.0
    # ipsilateral ear's notch moves up, contralateral down; mirror-consistent
    lat = (cos_l - cos_r) / (2.0 * np.cos(np.radians(params.ear_elevation)) * np.sin(np.radians(params.ear_azimuth)))
    lat = np.clip(lat, -1.0, 1.0)
    fc_l = (fc + params.notch_ear_offset_hz * lat)[:, None]
    fc_r = (fc - params.notch_ear_offset_hz * lat)[:, None]

    def ear(gamma, fc_ear):
        return (
            np.exp(-1j * omega * _ear_delay(gamma, params))
            * _shadow(gamma, omega, params)
            * _notch(f, fc_ear, params)
        )

    a_l, a_r = ear(g_l, fc_l), ear(g_r, fc_r)
    if single:
        return a_l[0], a_r[0]
    return a_l, a_r


@dataclass(frozen=True, eq=False)
class HrtfSet:
    """Complex transfer pairs for every grid direction at bins 0..N/2-1."""

    left: np.ndarray
    right: np.ndarray
    grid_hash: int
    n_fft: int = N_FFT
    sample_rate: int = SAMPLE_RATE
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for a in (self.left, self.right):
            a.setflags(write=False)
        if self.left.shape != self.right.shape or self.left.shape[1] != self.n_fft // 2:
            raise FormatError("HRTF arrays must have shape (D, N/2)")

    @property
    def n_directions(self):
        return self.left.shape[0]

    def normalized(self, bins=None):
        """Pairs divided by sqrt(|A_l|^2 + |A_r|^2), shape (D, len(bins))."""
        sl = slice(None) if bins is None else bins
        al, ar = self.left[:, sl], self.right[:, sl]
        norm = np.sqrt(np.abs(al) ** 2 + np.abs(ar) ** 2)
        return al / norm, ar / norm

    def impulse_responses(self, k, normalize=True):
        """Length-N impulse responses (left, right) for direction k."""
        if normalize:
            al, ar = self.normalized()
            al, ar = al[k], ar[k]
        else:
            al, ar = self.left[k], self.right[k]
        al = np.concatenate([al, [0.0]])
        ar = np.concatenate([ar, [0.0]])
        al[0], ar[0] = abs(al[0]), abs(ar[0])
        return np.fft.irfft(al, self.n_fft), np.fft.irfft(ar, self.n_fft)

    def equals(self, other):
        return (
            self.grid_hash == other.grid_hash
            and self.n_fft == other.n_fft
            and self.params == other.params
            and np.array_equal(self.left, other.left)
            and np.array_equal(self.right, other.right)
        )


def synthesize_hrtf(grid: DirectionGrid | None = None, params: HeadModel = HeadModel(),
                    n_fft=N_FFT, sample_rate=SAMPLE_RATE) -> HrtfSet:
    grid = grid or build_direction_grid()
    freqs = np.arange(n_fft // 2) * sample_rate / n_fft
    a_l, a_r = sphere_hrtf(grid.directions, freqs, params)
    return HrtfSet(a_l, a_r, grid.hash, n_fft, sample_rate, asdict(params))


def hrtf_ild_map(hset: HrtfSet, bin: int):
    ml, mr = np.abs(hset.left[:, bin]), np.abs(hset.right[:, bin])
    if np.any(ml == 0) or np.any(mr == 0):
        raise ValueError(f"zero HRTF magnitude at bin {bin}")
    return np.log(ml) - np.log(mr)


def hrtf_ipd_map(hset: HrtfSet, bin: int):
    """arg(A_l / A_r) in (-pi, pi]."""
    al, ar = hset.left[:, bin], hset.right[:, bin]
    if np.any(al == 0) or np.any(ar == 0):
        raise ValueError(f"zero HRTF magnitude at bin {bin}")
    # phase difference wrapped; exactly 0 for identical pairs
    ipd = np.angle(al) - np.angle(ar)
    ipd = ipd - 2 * np.pi * np.round(ipd / (2 * np.pi))
    return np.where(ipd <= -np.pi, ipd + 2 * np.pi, ipd)


def save_hrtf(hset: HrtfSet, path):
    meta = json.dumps(hset.params, sort_keys=True).encode()
    d, half = hset.left.shape
    body = np.empty((d, half, 4), dtype="<f8")
    body[..., 0], body[..., 1] = hset.left.real, hset.left.imag
    body[..., 2], body[..., 3] = hset.right.real, hset.right.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, hset.n_fft, hset.grid_hash))
        fh.write(struct.pack("<II", hset.sample_rate, len(meta)))
        fh.write(meta)
        fh.write(body.tobytes())


def load_hrtf(path, grid: DirectionGrid | None = None, check_grid=True) -> HrtfSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size + 8:
        raise FormatError(f"{path}: truncated header")
    magic, version, d, n_fft, ghash = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CompatibilityError(f"{path}: container version {version}, expected {VERSION}")
    pos = _HEADER.size
    sample_rate, meta_len = struct.unpack_from("<II", raw, pos)
    pos += 8
    meta = raw[pos:pos + meta_len]
    pos += meta_len
    expected = d * (n_fft // 2) * 4 * 8
    if len(meta) != meta_len or len(raw) - pos != expected:
        raise FormatError(f"{path}: truncated or oversized body")
    try:
        params = json.loads(meta.decode())
    except ValueError as exc:
        raise FormatError(f"{path}: bad metadata") from exc
    if check_grid:
        grid = grid or build_direction_grid()
        if ghash != grid.hash or d != len(grid):
            raise CompatibilityError(f"{path}: grid hash {ghash:#x} does not match {grid.hash:#x}")
    body = np.frombuffer(raw, dtype="<f8", offset=pos).reshape(d, n_fft // 2, 4)
    left = body[..., 0] + 1j * body[..., 1]
    right = body[..., 2] + 1j * body[..., 3]
    return HrtfSet(left, right, ghash, n_fft, sample_rate, params)


def export_hrtf_csv(hset: HrtfSet, path, grid: DirectionGrid | None = None, bins=None):
    grid = grid or build_direction_grid()
    az, el = to_angles(grid.directions)
    bins = range(hset.n_fft // 2) if bins is None else bins
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction_id", "azimuth", "elevation", "bin", "re_l", "im_l", "re_r", "im_r"])
        for k in range(hset.n_directions):
            for b in bins:
                a, r = hset.left[k, b], hset.right[k, b]
                w.writerow([k, f"{az[k]:.6f}", f"{el[k]:.6f}", b,
                            repr(a.real), repr(a.imag), repr(r.real), repr(r.imag)])

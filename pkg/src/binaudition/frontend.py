"""Two-channel spectral front-end: framing, Hamming window, FFT, WAV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import EmptyStreamError, FormatError

N_FFT = 2048
SAMPLE_RATE = 44100
# 44100 / 62.5 = 705.6 is not an integer; the nearest hop gives 62.55 Hz.
HOP = 705


@dataclass(frozen=True)
class PcmStream:
    left: np.ndarray
    right: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        left = np.asarray(self.left, dtype=np.float64)
        right = np.asarray(self.right, dtype=np.float64)
        if left.ndim != 1 or left.shape != right.shape:
            raise ValueError("left and right channels must be 1-D and equal length")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        left.setflags(write=False)
        right.setflags(write=False)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __len__(self):
        return self.left.shape[0]

    @classmethod
    def from_array(cls, data, sample_rate=SAMPLE_RATE):
        """Build from an ``(n_samples, 2)`` array."""
        data = np.asarray(data)
        if data.ndim != 2 or data.shape[1] != 2:
            raise ValueError(f"expected (n, 2) samples, got shape {data.shape}")
        return cls(data[:, 0], data[:, 1], sample_rate)

    def to_array(self):
        return np.stack([self.left, self.right], axis=1)


@dataclass(frozen=True)
class BinauralFrame:
    spectrum_left: np.ndarray
    spectrum_right: np.ndarray
    frame_index: int
    sample_rate: int = SAMPLE_RATE
    n_fft: int = field(default=N_FFT)

    def bin_hz(self, k):
        return k * self.sample_rate / self.n_fft


def frame_stream(stream: PcmStream, hop: int = HOP, n_fft: int = N_FFT):
    """Cut both channels into aligned frames of ``n_fft`` samples.

    Returns
    -------
    starts : ndarray of int
        Sample offset of each frame.
    frames_left, frames_right : ndarray, shape (n_frames, n_fft)
    """
    if hop < 1:
        raise ValueError("hop must be >= 1")
    n = len(stream)
    if n < n_fft:
        raise EmptyStreamError(f"stream has {n} samples, need at least {n_fft}")
    n_frames = (n - n_fft) // hop + 1
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(n_fft)[None, :]
    return starts, stream.left[idx], stream.right[idx]


def hamming(n: int = N_FFT) -> np.ndarray:
    t = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * t / (n - 1))


def hamming_window(frame):
    """Apply the symmetric Hamming window along the last axis."""
    frame = np.asarray(frame, dtype=np.float64)
    return frame * hamming(frame.shape[-1])


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


def fft_spectrum(frame):
    """Unnormalized forward DFT along the last axis (inverse carries 1/N)."""
    frame = np.asarray(frame)
    if not _is_pow2(frame.shape[-1]):
        raise ValueError(f"frame length {frame.shape[-1]} is not a power of two")
    return np.fft.fft(frame, axis=-1)


def stft_pair(stream: PcmStream, hop: int = HOP, n_fft: int = N_FFT):
    """Vectorized front-end: ``(starts, X_left, X_right)`` with full N-bin spectra."""
    starts, fl, fr = frame_stream(stream, hop, n_fft)
    return starts, fft_spectrum(hamming_window(fl)), fft_spectrum(hamming_window(fr))


def binaural_spectra(stream: PcmStream, hop: int = HOP, n_fft: int = N_FFT):
    """Frame, window and transform both channels into a list of BinauralFrame."""
    _, xl, xr = stft_pair(stream, hop, n_fft)
    return [
        BinauralFrame(xl[i], xr[i], i, stream.sample_rate, n_fft)
        for i in range(xl.shape[0])
    ]


def read_wav(path) -> PcmStream:
    """Read a 2-channel 16-bit PCM or 32-bit float WAV at 44100 Hz."""
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} (no resampling)")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim != 2 or data.shape[1] != 2:
        raise FormatError(f"{path}: expected 2 channels")
    return PcmStream.from_array(data, rate)


def read_mono_wav(path):
    """Read a mono clip (corpus files); stereo input is averaged down."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise FormatError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    else:
        data = data.astype(np.float64)
    if data.ndim == 2:
        data = data.mean(axis=1)
    return data


def write_wav(path, data, sample_rate=SAMPLE_RATE, fmt="float32"):
    """Write samples (mono 1-D or an (n, 2) array / PcmStream) as WAV."""
    if isinstance(data, PcmStream):
        data = data.to_array()
    data = np.asarray(data, dtype=np.float64)
    if fmt == "float32":
        out = data.astype(np.float32)
    elif fmt == "int16":
        out = np.round(np.clip(data, -1.0, 32767 / 32768) * 32768).astype(np.int16)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    wavfile.write(path, sample_rate, out)


def export_spectra_csv(frames, path, max_bin=None):
    """Debug dump: frame_index, bin, re_l, im_l, re_r, im_r."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "bin", "re_l", "im_l", "re_r", "im_r"])
        for fr in frames:
            n = len(fr.spectrum_left) if max_bin is None else max_bin
            for k in range(n):
                a, b = fr.spectrum_left[k], fr.spectrum_right[k]
                w.writerow([fr.frame_index, k, repr(a.real), repr(a.imag), repr(b.real), repr(b.imag)])

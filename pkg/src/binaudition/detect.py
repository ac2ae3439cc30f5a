"""Mel front-end, MelCNN sound detector, binaural fusion and characteristic bins.

The CNN is a small numpy implementation (two 5x5 conv layers with 2x2
max pooling, a 128-unit ReLU layer and one sigmoid output per label),
trained with Adam on per-label binary cross-entropy.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import butter, lfilter
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DivergenceError, FormatError
from .frontend import HOP, N_FFT, SAMPLE_RATE, PcmStream, hamming, read_mono_wav, stft_pair, write_wav
from .ssde import Adam, default_trained_bins

log = logging.getLogger(__name__)

N_MEL = 128
MEL_FRAMES = 25
P_STAR = 0.5
OMEGA_FRACTION = 0.2
OMEGA_FALLBACK = 8
MAGIC = b"MELC"
VERSION = 1
LABELS = ("horn", "alarm", "ratchet", "thump", "transient", "voice")


# --- mel front-end -----------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    """Triangular filters; ``matrix`` has shape (n_mel, N/2 + 1)."""

    matrix: np.ndarray
    centers_hz: np.ndarray
    spacing_mel: float

    def response(self, f):
        """Continuous triangle responses at frequencies ``f`` (Hz), shape (n_mel, len(f))."""
        m = hz_to_mel(np.atleast_1d(f))[None, :]
        c = hz_to_mel(self.centers_hz)[:, None]
        return np.clip(1.0 - np.abs(m - c) / self.spacing_mel, 0.0, None)


def mel_filterbank(n_mel=N_MEL, f_lo=0.0, f_hi=SAMPLE_RATE / 2, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """Triangles on ``n_mel`` equally spaced mel centres from mel(f_lo) to mel(f_hi).

    Each triangle spans its two neighbours' centres; the outer filters
    extend one spacing past the range so that both end bins are covered.
    """
    if n_mel < 2:
        raise ValueError("need at least two mel bands")
    lo, hi = hz_to_mel(f_lo), hz_to_mel(f_hi)
    centers = np.linspace(lo, hi, n_mel)
    spacing = (hi - lo) / (n_mel - 1)
    fb = MelFilterbank(np.empty(0), mel_to_hz(centers), float(spacing))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    mat = fb.response(freqs)
    return MelFilterbank(mat, fb.centers_hz, fb.spacing_mel)


def mel_spectrogram(spectra, fb: MelFilterbank | None = None, n_frames=MEL_FRAMES):
    """Max-normalized log mel power of one channel, shape (n_mel, n_frames).

    ``spectra`` holds ``n_frames`` complex FFT frames (full or half length).
    """
    spectra = np.atleast_2d(spectra)
    if spectra.shape[0] != n_frames:
        raise ValueError(f"expected {n_frames} frames, got {spectra.shape[0]}")
    fb = fb or _default_fb()
    half = fb.matrix.shape[1]
    power = np.abs(spectra[:, :half]) ** 2
    mel = np.log1p(fb.matrix @ power.T)
    peak = mel.max()
    if peak < 1e-12:
        return np.zeros_like(mel)
    return mel / peak


_FB_CACHE = {}


def _default_fb():
    if "fb" not in _FB_CACHE:
        _FB_CACHE["fb"] = mel_filterbank()
    return _FB_CACHE["fb"]


def channel_spectra(x, hop=HOP, n_fft=N_FFT):
    """Hamming-windowed FFT frames of a mono signal, shape (n_frames, n_fft)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < n_fft:
        raise ValueError("signal shorter than one frame")
    frames = sliding_window_view(x, n_fft)[::hop]
    return np.fft.fft(frames * hamming(n_fft), axis=1)


# --- CNN ---------------------------------------------------------------------

def _conv_shapes(n_mel, n_frames, n_labels):
    h1, w1 = n_mel - 4, n_frames - 4
    h2, w2 = h1 // 2 - 4, w1 // 2 - 4
    flat = 32 * (h2 // 2) * (w2 // 2)
    if h2 < 2 or w2 < 2:
        raise ValueError("input too small for the architecture")
    return [(16, 1, 5, 5), (16,), (32, 16, 5, 5), (32,), (flat, 128), (128,), (128, n_labels), (n_labels,)]


def _conv(x, w, b):
    """Valid 2-D convolution (cross-correlation). x (B,C,H,W), w (O,C,k,k)."""
    o, c, k, _ = w.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # B,C,H',W',k,k
    bsz, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, c * k * k)
    y = cols @ w.reshape(o, -1).T
    y += b
    return y.reshape(bsz, ho, wo, o).transpose(0, 3, 1, 2), cols


def _conv_back(dy, x_shape, w, cols, need_dx=True):
    o, c, k, _ = w.shape
    bsz, _, ho, wo = dy.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # one small matmul per kernel offset, accumulated channels-last
    dx = np.zeros((bsz, x_shape[2], x_shape[3], c), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += (dy2 @ w[:, :, i, j]).reshape(bsz, ho, wo, c)
    return dx.transpose(0, 3, 1, 2), dw, db


_QUADS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool(x):
    """2x2 max pooling (floor); ``arg`` records the first maximal quadrant."""
    h2, w2 = x.shape[2] // 2, x.shape[3] // 2
    q = [x[:, :, i:2 * h2:2, j:2 * w2:2] for i, j in _QUADS]
    m = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    arg = np.where(q[0] == m, 0, np.where(q[1] == m, 1, np.where(q[2] == m, 2, 3))).astype(np.int8)
    return m, arg


def _pool_back(dy, arg, x_shape):
    h2, w2 = dy.shape[2:]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for n, (i, j) in enumerate(_QUADS):
        dx[:, :, i:2 * h2:2, j:2 * w2:2] = np.where(arg == n, dy, 0)
    return dx


class MelCNN:
    """Parameters live in one flat buffer so Adam can update them in place."""

    def __init__(self, n_labels, n_mel=N_MEL, n_frames=MEL_FRAMES, rng=None, dtype=np.float32):
        self.n_labels, self.n_mel, self.n_frames = int(n_labels), int(n_mel), int(n_frames)
        self.shapes = _conv_shapes(self.n_mel, self.n_frames, self.n_labels)
        self.flat = np.zeros(sum(int(np.prod(s)) for s in self.shapes), dtype=dtype)
        self._bind()
        if rng is not None:
            for w in self.params[0::2]:
                fan_in = int(np.prod(w.shape[1:])) if w.ndim == 4 else w.shape[0]
                w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)

    def _bind(self):
        self.params, pos = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            self.params.append(self.flat[pos:pos + n].reshape(s))
            pos += n

    def astype(self, dtype):
        net = MelCNN(self.n_labels, self.n_mel, self.n_frames, dtype=dtype)
        net.flat[:] = self.flat
        return net

    def logits(self, x, keep=False):
        x = np.asarray(x, dtype=self.flat.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.n_mel, self.n_frames):
            raise ValueError(f"expected input shape ({self.n_mel}, {self.n_frames}), got {x.shape[1:]}")
        w1, b1, w2, b2, w3, b3, w4, b4 = self.params
        x0 = x[:, None]
        z1, cols1 = _conv(x0, w1, b1)
        a1 = np.maximum(z1, 0)
        p1, arg1 = _pool(a1)
        z2, cols2 = _conv(p1, w2, b2)
        a2 = np.maximum(z2, 0)
        p2, arg2 = _pool(a2)
        f = p2.reshape(len(x), -1)
        z3 = f @ w3 + b3
        a3 = np.maximum(z3, 0)
        z4 = a3 @ w4 + b4
        if keep:
            return z4, (x0, z1, cols1, a1, p1, arg1, z2, cols2, a2, p2, arg2, f, z3, a3)
        return z4

    def forward(self, x):
        return expit(self.logits(x))

    def loss(self, x, y):
        z = self.logits(x).astype(np.float64)
        y = np.asarray(y, dtype=np.float64)
        return float(np.sum(np.logaddexp(0.0, z) - y * z))

    def loss_and_grads(self, x, y, out=None):
        """Summed binary cross-entropy and its flat gradient."""
        z, c = self.logits(x, keep=True)
        x0, z1, cols1, a1, p1, arg1, z2, cols2, a2, p2, arg2, f, z3, a3 = c
        w1, b1, w2, b2, w3, b3, w4, b4 = self.params
        y = np.asarray(y, dtype=z.dtype)
        loss = float(np.sum(np.logaddexp(0.0, z.astype(np.float64)) - y * z))
        grad = np.empty_like(self.flat) if out is None else out
        g, pos = [], 0
        for s in self.shapes:
            n = int(np.prod(s))
            g.append(grad[pos:pos + n].reshape(s))
            pos += n
        dz4 = expit(z) - y
        g[6][...] = a3.T @ dz4
        g[7][...] = dz4.sum(axis=0)
        dz3 = (dz4 @ w4.T) * (z3 > 0)
        g[4][...] = f.T @ dz3
        g[5][...] = dz3.sum(axis=0)
        dp2 = (dz3 @ w3.T).reshape(p2.shape)
        dz2 = _pool_back(dp2, arg2, a2.shape) * (z2 > 0)
        dp1, g[2][...], g[3][...] = _conv_back(dz2, p1.shape, w2, cols2)
        dz1 = _pool_back(dp1, arg1, a1.shape) * (z1 > 0)
        _, g[0][...], g[1][...] = _conv_back(dz1, x0.shape, w1, cols1, need_dx=False)
        return loss, grad


def cnn_forward(model, mel):
    """Label probabilities for one (n_mel, n_frames) input."""
    net = model.net if isinstance(model, MelCnnModel) else model
    return net.forward(mel)[0]


def cnn_gradient_check(net: MelCNN, x, y, n_checks=6, step=1e-5, rng=None):
    """Max relative error of the analytic gradient vs central differences (float64)."""
    rng = rng or np.random.default_rng(0)
    net = net.astype(np.float64)
    _, grad = net.loss_and_grads(x, y)
    worst, pos = 0.0, 0
    for p in net.params:
        flat_p = p.reshape(-1)
        for j in rng.choice(flat_p.size, size=min(n_checks, flat_p.size), replace=False):
            orig = flat_p[j]
            flat_p[j] = orig + step
            lp = net.loss(x, y)
            flat_p[j] = orig - step
            lm = net.loss(x, y)
            flat_p[j] = orig
            num = (lp - lm) / (2 * step)
            ana = grad[pos + j]
            denom = max(abs(num), abs(ana), 1e-7)
            worst = max(worst, abs(num - ana) / denom)
        pos += flat_p.size
    return worst


class MelCNNClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label classifier over mel spectrograms (n, n_mel, n_frames) -> (n, L)."""

    def __init__(self, epochs=12, batch_size=16, lr=1e-3, random_state=0, threshold=P_STAR):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state
        self.threshold = threshold

    def fit(self, X, Y):
        X = np.asarray(X, dtype=np.float32)
        Y = np.asarray(Y, dtype=np.float32)
        if X.ndim != 3 or Y.ndim != 2 or len(X) != len(Y):
            raise ValueError("X must be (n, n_mel, n_frames) and Y (n, L)")
        rng = np.random.default_rng(self.random_state)
        self.net_ = MelCNN(Y.shape[1], X.shape[1], X.shape[2], rng=rng)
        opt = Adam(self.lr)
        grad = np.empty_like(self.net_.flat)
        self.initial_loss_ = self.net_.loss(X, Y) / len(X)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            total = 0.0
            for s in range(0, len(X), self.batch_size):
                idx = order[s:s + self.batch_size]
                loss, _ = self.net_.loss_and_grads(X[idx], Y[idx], out=grad)
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} at epoch {epoch}")
                grad /= len(idx)
                opt.step(self.net_.flat, grad)
                total += loss
            self.loss_curve_.append(total / len(X))
            log.info("melcnn epoch %d loss %.4f", epoch, self.loss_curve_[-1])
        self.classes_ = np.arange(Y.shape[1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = np.asarray(X, dtype=np.float32)
        out = [self.net_.forward(X[s:s + 64]) for s in range(0, len(X), 64)]
        return np.concatenate(out).astype(np.float64)

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(int)


# --- model container ----------------------------------------------------------

@dataclass(eq=False)
class MelCnnModel:
    net: MelCNN
    labels: tuple
    omega: dict = field(default_factory=dict)  # label -> characteristic FFT bins

    def to_bytes(self):
        meta = json.dumps({"labels": list(self.labels),
                           "omega": {k: [int(b) for b in v] for k, v in self.omega.items()}},
                          sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IIIII", VERSION, self.net.n_labels, self.net.n_mel, self.net.n_frames, len(meta)))
        buf.write(meta)
        buf.write(self.net.flat.astype("<f4").tobytes())
        return buf.getvalue()

    def save(self, path):
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:4]!r}")
        try:
            version, n_labels, n_mel, n_frames, meta_len = struct.unpack_from("<IIIII", raw, 4)
        except struct.error as exc:
            raise FormatError(f"{path}: truncated header") from exc
        if version != VERSION:
            from .errors import CompatibilityError
            raise CompatibilityError(f"{path}: version {version}")
        pos = 4 + 20
        try:
            meta = json.loads(raw[pos:pos + meta_len].decode())
        except ValueError as exc:
            raise FormatError(f"{path}: bad metadata") from exc
        pos += meta_len
        net = MelCNN(n_labels, n_mel, n_frames)
        if len(raw) - pos != 4 * net.flat.size:
            raise FormatError(f"{path}: truncated or oversized weights")
        net.flat[:] = np.frombuffer(raw, "<f4", net.flat.size, pos)
        omega = {k: np.asarray(v, dtype=np.int64) for k, v in meta["omega"].items()}
        return cls(net, tuple(meta["labels"]), omega)


def atomic_write_bytes(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --- fusion and characteristic frequencies ------------------------------------

def fuse_binaural(p_l, p_r, v_l, v_r):
    """Volume-weighted mean of the two channels' label probabilities."""
    if v_l < 0 or v_r < 0 or v_l + v_r <= 0:
        raise ValueError("volumes must be non-negative with a positive sum")
    p_l, p_r = np.asarray(p_l, dtype=np.float64), np.asarray(p_r, dtype=np.float64)
    return (v_l * p_l + v_r * p_r) / (v_l + v_r)


def _trained_band(n_fft=N_FFT, sample_rate=SAMPLE_RATE, trained_bins=None):
    tb = default_trained_bins(n_fft, sample_rate) if trained_bins is None else np.asarray(trained_bins)
    step = int(np.max(np.diff(tb))) if len(tb) > 1 else 1
    k = np.arange(n_fft // 2)
    return (k >= tb[0] - step // 2) & (k <= tb[-1] + step // 2)


def characteristic_frequencies(clips, trained_bins=None, fraction=OMEGA_FRACTION,
                               fallback=OMEGA_FALLBACK, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """FFT bins where the label's average magnitude reaches ``fraction`` of its peak.

    Only bins inside the trained SSDE band are kept; an empty result widens
    to the ``fallback`` strongest in-band bins.
    """
    mags = [np.abs(channel_spectra(c, n_fft=n_fft)[:, :n_fft // 2]).mean(axis=0) for c in clips]
    if not mags:
        raise ValueError("label has no clips")
    avg = np.mean(mags, axis=0)
    band = _trained_band(n_fft, sample_rate, trained_bins)
    avg_in = np.where(band, avg, 0.0)
    chosen = np.flatnonzero(band & (avg >= fraction * avg.max()))
    if chosen.size == 0:
        chosen = np.sort(np.argsort(avg_in)[::-1][:fallback])
    return chosen.astype(np.int64)


# --- synthetic corpus -------------------------------------------------------------

def _butter(x, cutoff, kind, fs, order=2):
    b, a = butter(order, cutoff, btype=kind, fs=fs)
    return lfilter(b, a, x)


def _resonator(x, f, bw, fs):
    r = np.exp(-np.pi * bw / fs)
    a = [1.0, -2 * r * np.cos(2 * np.pi * f / fs), r * r]
    return lfilter([1.0 - r], a, x)


def synth_clip(label, rng, duration=1.0, fs=SAMPLE_RATE):
    """One randomized clip of a synthetic sound family, RMS-normalized to 0.05."""
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    if label == "horn":
        f0 = rng.uniform(250, 450)
        slope = rng.uniform(0.5, 1.2)
        h = np.arange(1, int(12000 // f0) + 1)
        x = np.sin(2 * np.pi * f0 * np.outer(t, h) + rng.uniform(0, 2 * np.pi, len(h))) @ (h ** -slope)
    elif label == "alarm":
        f0 = rng.uniform(1000, 2500)
        period, duty = rng.uniform(0.12, 0.25), 0.5
        h = np.array([k for k in (1, 3, 5, 7) if k * f0 < 12000])
        x = np.sin(2 * np.pi * f0 * np.outer(t, h) + rng.uniform(0, 2 * np.pi, len(h))) @ (1.0 / h)
        gate = ((t + rng.uniform(0, period)) % period) < duty * period
        x = x * _butter(gate.astype(float), 200.0, "low", fs)
    elif label == "ratchet":
        rate = rng.uniform(15, 35)
        x = np.zeros(n)
        tau = rng.uniform(0.001, 0.003)
        click_len = int(8 * tau * fs)
        env = np.exp(-np.arange(click_len) / (tau * fs))
        for s in np.arange(rng.uniform(0, 1 / rate), duration, 1 / rate):
            i = int(s * fs)
            seg = env[: n - i] * rng.standard_normal(min(click_len, n - i))
            x[i:i + len(seg)] += seg
        x = _butter(x, [2000.0, 8000.0], "band", fs)
    elif label == "thump":
        x = np.zeros(n)
        cutoff = rng.uniform(150, 400)
        period = rng.uniform(0.2, 0.4)
        tau = rng.uniform(0.03, 0.08)
        for s in np.arange(rng.uniform(0, period), duration, period):
            i = int(s * fs)
            m = n - i
            x[i:] += np.exp(-np.arange(m) / (tau * fs)) * rng.standard_normal(m)
        x = _butter(x, cutoff, "low", fs, order=4)
    elif label == "transient":
        x = np.zeros(n)
        for s in rng.uniform(0, duration - 0.02, rng.integers(2, 5)):
            i = int(s * fs)
            m = int(rng.uniform(0.005, 0.015) * fs)
            x[i:i + m] += rng.standard_normal(m) * np.hanning(m)
        x = _butter(x, 1000.0, "high", fs)
    elif label == "voice":
        f0 = rng.uniform(100, 220)
        phase = np.cumsum(f0 * (1 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))) / fs
        pulses = np.diff(np.floor(phase), prepend=0.0)
        x = sum(_resonator(pulses, f, bw, fs) for f, bw in
                ((rng.uniform(300, 800), 80), (rng.uniform(900, 2200), 100), (rng.uniform(2300, 3000), 150)))
        x = x * (0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(3, 5) * t + rng.uniform(0, 2 * np.pi)))
    else:
        raise ValueError(f"unknown label {label!r}")
    x = np.asarray(x, dtype=np.float64)
    return 0.05 * x / np.sqrt(np.mean(x**2))


def make_corpus(root, n_per_label=50, seed=0, labels=LABELS, duration=1.0):
    """Write ``root/<label>/<label>_NNN.wav`` clips and ``root/manifest.csv``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for li, label in enumerate(labels):
        d = root / label
        d.mkdir(exist_ok=True)
        rng = np.random.default_rng([int(seed), li])
        for i in range(n_per_label):
            write_wav(d / f"{label}_{i:03d}.wav", synth_clip(label, rng, duration))
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "directory"])
        for label in labels:
            w.writerow([label, label])
    return root


def load_corpus(root):
    """``{label: [mono clips]}`` in manifest order, clips sorted by file name."""
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    corpus = {}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            files = sorted((root / row["directory"]).glob("*.wav"))
            corpus[row["label"]] = [read_mono_wav(f) for f in files]
    return corpus


def split_corpus(corpus, test_fraction=0.2, seed=0):
    train, test = {}, {}
    for i, (label, clips) in enumerate(corpus.items()):
        order = np.random.default_rng([int(seed), i, 7]).permutation(len(clips))
        n_test = int(round(test_fraction * len(clips)))
        test[label] = [clips[j] for j in order[:n_test]]
        train[label] = [clips[j] for j in order[n_test:]]
    return train, test


def build_examples(corpus, rng, crops=2, n_mixed=None, n_noise=None, snr_db=(10.0, 30.0),
                   fb=None, n_frames=MEL_FRAMES):
    """Mel inputs and multi-hot targets from single clips, two-label mixtures and noise.

    Each example is a random ``n_frames`` crop; a mixture sums crops of two
    different labels with random relative gain and sets both targets to 1.
    Background white noise at a random SNR is added everywhere.
    """
    fb = fb or _default_fb()
    labels = list(corpus)
    n_len = (n_frames - 1) * HOP + N_FFT
    singles = [(li, c) for li, lab in enumerate(labels) for c in corpus[lab]]
    if len(labels) < 2 or min(len(c) for c in corpus.values()) < 1:
        raise ValueError("need at least two labels with clips")
    n_mixed = len(singles) if n_mixed is None else n_mixed
    n_noise = len(singles) // 6 if n_noise is None else n_noise

    def crop(c):
        s = rng.integers(0, len(c) - n_len + 1)
        return c[s:s + n_len]

    X, Y = [], []

    def add(x, y, clean_power):
        snr = 10 ** (rng.uniform(*snr_db) / 10)
        x = x * 10 ** rng.uniform(-1, 0.5) if clean_power else x
        p = np.mean(x**2) if clean_power else 0.0025
        x = x + np.sqrt(p / snr) * rng.standard_normal(len(x))
        X.append(mel_spectrogram(channel_spectra(x), fb, n_frames))
        Y.append(y)

    for _ in range(crops):
        for li, c in singles:
            y = np.zeros(len(labels))
            y[li] = 1
            add(crop(c), y, True)
    for _ in range(n_mixed):
        a, b = rng.choice(len(labels), 2, replace=False)
        ca = corpus[labels[a]][rng.integers(len(corpus[labels[a]]))]
        cb = corpus[labels[b]][rng.integers(len(corpus[labels[b]]))]
        y = np.zeros(len(labels))
        y[[a, b]] = 1
        add(crop(ca) + 10 ** rng.uniform(-0.25, 0.25) * crop(cb), y, True)
    for _ in range(n_noise):
        add(np.zeros(n_len), np.zeros(len(labels)), False)
    return np.asarray(X, dtype=np.float32), np.asarray(Y, dtype=np.float32)


def train_melcnn(corpus, epochs=12, seed=0, lr=1e-3, batch_size=16, trained_bins=None, crops=2):
    """Train the detector and attach per-label characteristic bins."""
    labels = tuple(corpus)
    if len(labels) < 2 or min(len(v) for v in corpus.values()) < 10:
        raise ValueError("need >= 2 labels with >= 10 clips each")
    rng = np.random.default_rng([int(seed), 1])
    X, Y = build_examples(corpus, rng, crops=crops)
    clf = MelCNNClassifier(epochs=epochs, batch_size=batch_size, lr=lr, random_state=seed).fit(X, Y)
    omega = {lab: characteristic_frequencies(corpus[lab], trained_bins) for lab in labels}
    model = MelCnnModel(clf.net_, labels, omega)
    model.loss_curve_ = clf.loss_curve_
    model.initial_loss_ = clf.initial_loss_
    return model


def macro_f_score(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true, bool), np.asarray(y_pred, bool)
    scores = []
    for j in range(y_true.shape[1]):
        tp = np.sum(y_true[:, j] & y_pred[:, j])
        fp = np.sum(~y_true[:, j] & y_pred[:, j])
        fn = np.sum(y_true[:, j] & ~y_pred[:, j])
        scores.append(2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0)
    return float(np.mean(scores))


# --- detection -----------------------------------------------------------------

@dataclass(frozen=True)
class DetectionEvent:
    label: str
    probability: float
    bins: tuple
    frame_start: int
    frame_end: int  # exclusive
    t_start: float
    t_end: float

    def to_json(self):
        return json.dumps({"label": self.label, "p": round(self.probability, 6),
                           "t_start": round(self.t_start, 6), "t_end": round(self.t_end, 6),
                           "frame_start": self.frame_start, "frame_end": self.frame_end,
                           "bins": list(self.bins)})


def detect(stream: PcmStream, model: MelCnnModel, threshold=P_STAR, stride=MEL_FRAMES // 2,
           floor=None, gate_factor=10.0):
    """Sliding-window detection on both channels, fused by channel volume.

    With ``floor`` (per-bin noise power), event bins are limited to those
    whose window-mean power exceeds ``gate_factor`` times the floor.
    """
    fb = _default_fb()
    nf = model.net.n_frames
    _, xl, xr = stft_pair(stream)
    if len(xl) < nf:
        return []
    events = []
    half = N_FFT // 2
    for s in range(0, len(xl) - nf + 1, stride):
        a, b = s * HOP, (s + nf - 1) * HOP + N_FFT
        v_l = float(np.sqrt(np.mean(stream.left[a:b] ** 2)))
        v_r = float(np.sqrt(np.mean(stream.right[a:b] ** 2)))
        if v_l + v_r <= 0:
            continue
        mel = np.stack([mel_spectrogram(xl[s:s + nf], fb, nf), mel_spectrogram(xr[s:s + nf], fb, nf)])
        p_l, p_r = model.net.forward(mel)
        p = fuse_binaural(p_l, p_r, v_l, v_r)
        if floor is not None:
            power = 0.5 * (np.abs(xl[s:s + nf, :half]) ** 2 + np.abs(xr[s:s + nf, :half]) ** 2).mean(axis=0)
            live = power > gate_factor * np.asarray(floor)
        for j in np.flatnonzero(p >= threshold):
            lab = model.labels[j]
            bins = np.asarray(model.omega.get(lab, []), dtype=np.int64)
            if floor is not None:
                bins = bins[live[bins]]
            events.append(DetectionEvent(lab, float(p[j]), tuple(int(x) for x in bins), s, s + nf,
                                         a / stream.sample_rate, b / stream.sample_rate))
    return events


def write_events_jsonl(events, path):
    atomic_write_bytes(path, "".join(e.to_json() + "\n" for e in events).encode())

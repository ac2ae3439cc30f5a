"""Per-frequency sound-source-existence networks.

Each trained bin owns a 5-500-500-D sigmoid MLP mapping the ILD/IPD feature
to an existence score per grid direction. Training data are virtual
sources rendered through an HRTF set with a Gaussian existence target
centred on the source direction.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import CompatibilityError, DivergenceError, FormatError, NoValidFrequencyError
from .features import compute_features
from .frontend import N_FFT, SAMPLE_RATE
from .grid import DirectionGrid, build_direction_grid

log = logging.getLogger(__name__)

MAGIC = b"SSDE"
VERSION = 1
HIDDEN = (500, 500)


def sigmoid(x, out=None):
    return expit(x, out=out)


def gaussian_target(h, sigma, grid: DirectionGrid | None = None):
    """Peak-normalized existence target for a source at direction id ``h``.

    ``sigma`` is in radians; the angular distance is measured on the sphere.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    grid = grid or build_direction_grid()
    cos = np.clip(grid.directions @ grid.directions[np.atleast_1d(h)].T, -1.0, 1.0)
    delta = np.arccos(cos).T
    out = np.exp(-delta**2 / (2.0 * sigma**2))
    return out[0] if np.ndim(h) == 0 else out


@numba.njit(cache=True, fastmath=True)
def _adam_kernel(p, g, m, v, b1, b2, step, eps):
    # one fused pass; v floored to stay out of the slow denormal range
    c1 = 1 - b1
    c2 = 1 - b2
    floor = np.float32(1e-30)
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = max(b2 * v[i] + c2 * gi * gi, floor)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps)


@dataclass
class Adam:
    """Adam over one flat parameter buffer, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, param, grad):
        """Folded bias correction: ``lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)`` and
        ``eps`` scaled by ``sqrt(1 - b2^t)``; algebraically the textbook update."""
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = np.sqrt(1.0 - self.beta2**self.t)
        f = param.dtype.type
        _adam_kernel(param, grad, self.m, self.v, f(self.beta1), f(self.beta2),
                     f(self.lr * c2 / c1), f(self.eps * c2))


def _layout(sizes):
    shapes = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        shapes.append((a, b))
    shapes += [(b,) for b in sizes[1:]]
    return shapes


def _views(flat, shapes):
    out, pos = [], 0
    for shp in shapes:
        n = int(np.prod(shp))
        out.append(flat[pos:pos + n].reshape(shp))
        pos += n
    return out


class MLP:
    """Dense sigmoid network with explicit backprop.

    All parameters live in one flat buffer (``flat``); ``weights`` and
    ``biases`` are views into it. The loss of a batch is the sum over
    examples of the per-example mean squared error, so gradients add
    across examples.
    """

    def __init__(self, sizes, rng=None, dtype=np.float32):
        self.sizes = tuple(int(s) for s in sizes)
        shapes = _layout(self.sizes)
        self.flat = np.zeros(sum(int(np.prod(s)) for s in shapes), dtype=dtype)
        self._bind()
        if rng is not None:
            for w in self.weights:
                limit = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
                w[...] = rng.uniform(-limit, limit, size=w.shape)

    def _bind(self):
        views = _views(self.flat, _layout(self.sizes))
        n = len(self.sizes) - 1
        self.weights, self.biases = views[:n], views[n:]

    @classmethod
    def from_flat(cls, sizes, flat):
        net = cls.__new__(cls)
        net.sizes = tuple(int(s) for s in sizes)
        net.flat = flat
        net._bind()
        return net

    @property
    def params(self):
        return [*self.weights, *self.biases]

    def astype(self, dtype):
        return MLP.from_flat(self.sizes, self.flat.astype(dtype))

    def forward(self, x, keep=False):
        x = np.asarray(x, dtype=self.flat.dtype)
        acts = [x]
        for w, b in zip(self.weights, self.biases):
            z = x @ w
            z += b
            x = sigmoid(z, out=z)
            acts.append(x)
        return acts if keep else x

    def loss_and_grads(self, x, y, out=None):
        """Return ``(loss, flat_gradient)``; the gradient is written into ``out`` if given."""
        acts = self.forward(x, keep=True)
        pred = acts[-1]
        err = pred - np.asarray(y, dtype=self.flat.dtype)
        n_out = pred.shape[1]
        loss = float(np.sum(err * err, dtype=np.float64) / n_out)
        grad = np.empty_like(self.flat) if out is None else out
        views = _views(grad, _layout(self.sizes))
        n = len(self.weights)
        delta = err * pred
        delta *= 1.0 - pred
        delta *= 2.0 / n_out
        for i in range(n - 1, -1, -1):
            np.matmul(acts[i].T, delta, out=views[i])
            np.sum(delta, axis=0, out=views[n + i])
            if i:
                a = acts[i]
                delta = delta @ self.weights[i].T
                delta *= a
                delta *= 1.0 - a
        return loss, grad

    def loss(self, x, y):
        err = self.forward(x) - y
        return float(np.sum(err * err) / err.shape[1])


def gradient_check(net: MLP, x, y, n_checks=40, step=1e-5, rng=None):
    """Max relative error of analytic gradients vs central differences.

    Runs in float64 on a copy of ``net``; checks a random subset of entries
    of every parameter array.
    """
    rng = rng or np.random.default_rng(0)
    net = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, grad = net.loss_and_grads(x, y)
    worst = 0.0
    for p, g in zip(net.params, _views(grad, _layout(net.sizes))):
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for j in rng.choice(flat_p.size, size=min(n_checks, flat_p.size), replace=False):
            orig = flat_p[j]
            flat_p[j] = orig + step
            lp = net.loss(x, y)
            flat_p[j] = orig - step
            lm = net.loss(x, y)
            flat_p[j] = orig
            num = (lp - lm) / (2 * step)
            denom = max(abs(num), abs(flat_g[j]), 1e-7)
            worst = max(worst, abs(num - flat_g[j]) / denom)
    return worst


class SSDENetRegressor(RegressorMixin, BaseEstimator):
    """One per-bin network as an sklearn regressor: features (n, 5) -> scores (n, D)."""

    def __init__(self, hidden=HIDDEN, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 batch_size=32, epochs=500, first_layer_scale=1.0, random_state=0,
                 dtype="float32"):
        self.hidden = hidden
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.epochs = epochs
        self.first_layer_scale = first_layer_scale
        self.random_state = random_state
        self.dtype = dtype

    def fit(self, X, Y, X_val=None, Y_val=None, resample=None):
        """Minibatch Adam on the MSE loss.

        ``resample(rng)``, if given, returns fresh features for the same
        targets and is called at the start of every epoch after the first.
        """
        X = check_array(X, dtype=np.float64)
        Y = check_array(Y, dtype=np.float64)
        rng = np.random.default_rng(self.random_state)
        dt = np.dtype(self.dtype)
        self.net_ = MLP((X.shape[1], *self.hidden, Y.shape[1]), rng=rng, dtype=dt)
        # wider first layer so the units see the cos/sin products, not just the ILD
        self.net_.weights[0] *= self.first_layer_scale
        # start outputs at the mean target; skips the long flat start of sigmoid-MSE training
        mean = np.clip(Y.mean(axis=0), 1e-4, 1 - 1e-4)
        self.net_.biases[-1][...] = np.log(mean / (1 - mean))
        opt = Adam(self.lr, self.beta1, self.beta2, self.eps)
        Xc, Yc = X.astype(dt), Y.astype(dt)
        self.loss_curve_ = []
        if X_val is not None:
            self.initial_val_loss_ = self.net_.loss(X_val, Y_val) / len(X_val)
        n = len(X)
        grad = np.empty_like(self.net_.flat)
        for epoch in range(self.epochs):
            if resample is not None and epoch:
                Xc = np.asarray(resample(rng), dtype=dt)
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, _ = self.net_.loss_and_grads(Xc[idx], Yc[idx], out=grad)
                if not np.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} at epoch {epoch}")
                opt.step(self.net_.flat, grad)
                total += loss
            self.loss_curve_.append(total / n)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return self.net_.forward(X)


# --- training data -----------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    sigma: float = np.radians(15.0)
    examples_per_bin: int = 1000
    epochs: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    snr_db: tuple = (5.0, 20.0)
    source_mag: tuple = (0.1, 10.0)
    first_layer_scale: float = 10.0
    phase_augment: bool = True
    seed: int = 0


def default_trained_bins(n_fft=N_FFT, sample_rate=SAMPLE_RATE, f_lo=100.0, f_hi=12000.0, step=4):
    lo = int(np.ceil(f_lo * n_fft / sample_rate))
    hi = int(np.floor(f_hi * n_fft / sample_rate))
    return np.arange(lo, hi + 1, step)


def synth_observations(hset, bin, n, rng, snr_db=(5.0, 20.0), source_mag=(0.1, 10.0),
                       grid=None, noise=True, directions=None, random_phase=True):
    """Noisy binaural spectra ``(xl, xr, h)`` of virtual sources at one bin.

    Draws whose features would be undefined (a silent channel) are redrawn.
    """
    grid = grid or build_direction_grid()
    an_l, an_r = hset.normalized([bin])
    an_l, an_r = an_l[:, 0], an_r[:, 0]
    if directions is None:
        # balanced: every direction appears floor(n/D) times, remainder random
        d = len(grid)
        h = np.concatenate([np.tile(np.arange(d), n // d), rng.choice(d, n % d, replace=False)])
        h = rng.permutation(h)
    else:
        h = np.asarray(directions)
    xl = np.empty(len(h), complex)
    xr = np.empty(len(h), complex)
    todo = np.arange(len(h))
    while todo.size:
        m = todo.size
        mag = np.exp(rng.uniform(np.log(source_mag[0]), np.log(source_mag[1]), m))
        s = mag * np.exp(1j * rng.uniform(0.0, 2 * np.pi, m)) if random_phase else mag.astype(complex)
        l, r = an_l[h[todo]] * s, an_r[h[todo]] * s
        if noise:
            snr = 10.0 ** (rng.uniform(*snr_db, m) / 10.0)
            # per-channel complex noise; total noise power = |s|^2 / snr
            scale = np.abs(s) / np.sqrt(2.0 * snr) / np.sqrt(2.0)
            l = l + scale * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
            r = r + scale * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
        _, valid = compute_features(l, r)
        xl[todo[valid]], xr[todo[valid]] = l[valid], r[valid]
        todo = todo[~valid]
    return xl, xr, h


def rotated_features(xl, xr, rng):
    """Features after a random common phase per example (a time shift of each source)."""
    rot = np.exp(1j * rng.uniform(0.0, 2 * np.pi, len(xl)))
    return compute_features(xl * rot, xr * rot)[0]


def synth_training_set(hset, bin, n, rng, sigma=np.radians(15.0), snr_db=(5.0, 20.0),
                       source_mag=(0.1, 10.0), grid=None, noise=True, directions=None,
                       random_phase=True):
    """Virtual sources at random grid directions, observed at one bin.

    Returns ``(X, Y, h)``: features (n, 5), Gaussian targets (n, D) and the
    source direction ids.
    """
    grid = grid or build_direction_grid()
    xl, xr, h = synth_observations(hset, bin, n, rng, snr_db, source_mag, grid, noise,
                                   directions, random_phase)
    return compute_features(xl, xr)[0], gaussian_target(h, sigma, grid), h


def synth_training_example(hset, h, bin, rng, **kw):
    X, Y, _ = synth_training_set(hset, bin, 1, rng, directions=[h], **kw)
    return X[0], Y[0]


# --- model over all bins -----------------------------------------------------

def _bin_seed(seed, b):
    return np.random.default_rng([int(seed), int(b)])


class SSDEModel:
    """Trained per-bin networks sharing one direction grid."""

    def __init__(self, bins, nets, grid_hash, sigma, seed, epochs, n_fft=N_FFT):
        self.bins = np.asarray(bins, dtype=np.int64)
        self.nets = list(nets)
        self.grid_hash = grid_hash
        self.sigma = float(sigma)
        self.seed = int(seed)
        self.epochs = int(epochs)
        self.n_fft = n_fft

    @property
    def n_directions(self):
        return self.nets[0].sizes[-1]

    def net_for(self, b):
        return self.nets[int(np.argmin(np.abs(self.bins - b)))]

    def bin_cells(self, n_fft=None):
        """Map every FFT bin to the index of its nearest trained bin (-1 outside range)."""
        n_fft = n_fft or self.n_fft
        k = np.arange(n_fft // 2)
        idx = np.argmin(np.abs(k[:, None] - self.bins[None, :]), axis=1)
        step = np.max(np.diff(self.bins)) if len(self.bins) > 1 else 1
        outside = (k < self.bins[0] - step // 2) | (k > self.bins[-1] + step // 2)
        idx[outside] = -1
        return idx

    def per_bin_maps(self, feats_by_bin):
        """``{trained-bin index: features (m, 5)} -> {index: maps (m, D)}``."""
        return {i: self.nets[i].forward(f).astype(np.float64) for i, f in feats_by_bin.items()}

    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQdQI", VERSION, self.grid_hash, self.sigma, self.seed, self.epochs))
        buf.write(struct.pack("<I", len(self.bins)))
        buf.write(self.bins.astype("<u4").tobytes())
        for net in self.nets:
            buf.write(struct.pack("<I", len(net.sizes)))
            buf.write(np.asarray(net.sizes, dtype="<u4").tobytes())
            for w, b in zip(net.weights, net.biases):
                buf.write(w.astype("<f4").tobytes())
                buf.write(b.astype("<f4").tobytes())
        return buf.getvalue()

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, grid: DirectionGrid | None = None, check_grid=True):
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:4]!r}")
        try:
            version, ghash, sigma, seed, epochs = struct.unpack_from("<IQdQI", raw, 4)
            pos = 4 + struct.calcsize("<IQdQI")
            if version != VERSION:
                raise CompatibilityError(f"{path}: version {version}")
            (nb,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            bins = np.frombuffer(raw, "<u4", nb, pos).astype(np.int64)
            pos += 4 * nb
            nets = []
            for _ in range(nb):
                (nl,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                sizes = tuple(int(s) for s in np.frombuffer(raw, "<u4", nl, pos))
                pos += 4 * nl
                net = MLP(sizes)
                for w, bias in zip(net.weights, net.biases):
                    a, b = w.shape
                    w[...] = np.frombuffer(raw, "<f4", a * b, pos).reshape(a, b)
                    pos += 4 * a * b
                    bias[...] = np.frombuffer(raw, "<f4", b, pos)
                    pos += 4 * b
                nets.append(net)
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated model file") from exc
        if pos != len(raw):
            raise FormatError(f"{path}: trailing bytes")
        if check_grid:
            grid = grid or build_direction_grid()
            if ghash != grid.hash:
                raise CompatibilityError(f"{path}: model grid hash does not match")
        return cls(bins, nets, ghash, sigma, seed, epochs)


def train_bin(hset, b, cfg: TrainingConfig, grid=None, validation=0):
    grid = grid or build_direction_grid()
    rng = _bin_seed(cfg.seed, b)
    xl, xr, h = synth_observations(hset, b, cfg.examples_per_bin, rng, cfg.snr_db,
                                   cfg.source_mag, grid)
    X = compute_features(xl, xr)[0]
    Y = gaussian_target(h, cfg.sigma, grid)
    resample = (lambda r: rotated_features(xl, xr, r)) if cfg.phase_augment else None
    reg = SSDENetRegressor(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                           batch_size=cfg.batch_size, epochs=cfg.epochs,
                           first_layer_scale=cfg.first_layer_scale, random_state=rng)
    if validation:
        Xv, Yv, _ = synth_training_set(hset, b, validation, rng, cfg.sigma, cfg.snr_db,
                                       cfg.source_mag, grid)
        reg.fit(X, Y, Xv, Yv, resample=resample)
        reg.final_val_loss_ = reg.net_.loss(Xv, Yv) / len(Xv)
    else:
        reg.fit(X, Y, resample=resample)
    return reg


def train(hset, bins=None, cfg: TrainingConfig = TrainingConfig(), grid=None, progress=None) -> SSDEModel:
    """Train one network per bin; deterministic given ``cfg.seed``."""
    grid = grid or build_direction_grid()
    if hset.grid_hash != grid.hash:
        raise CompatibilityError("HRTF set was built on a different grid")
    bins = default_trained_bins(hset.n_fft, hset.sample_rate) if bins is None else np.asarray(bins)
    nets = []
    for i, b in enumerate(bins):
        reg = train_bin(hset, int(b), cfg, grid)
        nets.append(reg.net_)
        log.info("bin %d (%d/%d): final loss %.5f", b, i + 1, len(bins), reg.loss_curve_[-1])
        if progress:
            progress(i, len(bins))
    return SSDEModel(bins, nets, grid.hash, cfg.sigma, cfg.seed, cfg.epochs, hset.n_fft)


def aggregate(maps, mask):
    """Sum per-bin existence maps over bins whose mask coefficient is 1.

    ``maps`` has shape (n_bins, D) and ``mask`` shape (n_bins,) of 0/1.
    """
    maps = np.asarray(maps, dtype=np.float64)
    mask = np.asarray(mask)
    if not np.any(mask):
        raise NoValidFrequencyError("no valid frequency bin")
    return (mask[:, None] * maps).sum(axis=0)


def estimate_direction(existence):
    """Index and value of the maximum; ties resolve to the lowest id."""
    existence = np.asarray(existence)
    if existence.size == 0:
        raise ValueError("empty existence map")
    k = int(np.argmax(existence))
    return k, float(existence[k])


class SSDELocalizer(BaseEstimator):
    """Direction estimator over windows of binaural spectra.

    ``fit(hset)`` trains the per-bin networks. ``predict`` takes complex
    spectra ``(X_left, X_right)`` of shape (n_frames, N) for one analysis
    window plus a boolean mask of usable FFT bins.
    """

    def __init__(self, bins=None, sigma=np.radians(15.0), examples_per_bin=1000, epochs=500,
                 batch_size=32, lr=1e-3, random_state=0):
        self.bins = bins
        self.sigma = sigma
        self.examples_per_bin = examples_per_bin
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, hset, y=None):
        cfg = TrainingConfig(sigma=self.sigma, examples_per_bin=self.examples_per_bin,
                             epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             seed=self.random_state)
        self.model_ = train(hset, self.bins, cfg)
        return self

    @classmethod
    def from_model(cls, model: SSDEModel):
        est = cls(bins=model.bins, sigma=model.sigma, epochs=model.epochs, random_state=model.seed)
        est.model_ = model
        return est

    def existence(self, xl, xr, bin_mask=None):
        check_is_fitted(self, "model_")
        return window_existence(self.model_, xl, xr, bin_mask)

    def predict(self, xl, xr, bin_mask=None):
        return estimate_direction(self.existence(xl, xr, bin_mask))[0]


def select_cell_bins(model: SSDEModel, power, bin_mask):
    """Pick, per trained bin, the strongest usable FFT bin in its cell.

    Returns ``(net indices, fft bins)``; each trained bin's coefficient is 1
    when any usable FFT bin falls in its cell.
    """
    cells = model.bin_cells(len(power) * 2)
    usable = np.asarray(bin_mask, bool) & (cells >= 0)
    idx, fft_bins = [], []
    for i in np.unique(cells[usable]):
        cand = np.flatnonzero(usable & (cells == i))
        idx.append(int(i))
        fft_bins.append(int(cand[np.argmax(power[cand])]))
    return np.asarray(idx, dtype=np.int64), np.asarray(fft_bins, dtype=np.int64)


def window_existence(model: SSDEModel, xl, xr, bin_mask=None):
    """Existence map summed over the selected bins and all frames of a window."""
    xl, xr = np.atleast_2d(xl), np.atleast_2d(xr)
    half = model.n_fft // 2
    power = (np.abs(xl[:, :half]) ** 2 + np.abs(xr[:, :half]) ** 2).mean(axis=0)
    if bin_mask is None:
        bin_mask = np.zeros(half, bool)
        bin_mask[model.bins] = True
    idx, fft_bins = select_cell_bins(model, power, bin_mask[:half])
    if idx.size == 0:
        raise NoValidFrequencyError("no valid frequency bin in window")
    feats, valid = compute_features(xl[:, fft_bins], xr[:, fft_bins])
    total = np.zeros(model.n_directions)
    used = 0
    for j, i in enumerate(idx):
        ok = valid[:, j]
        if ok.any():
            total += model.nets[i].forward(feats[ok, j]).astype(np.float64).sum(axis=0)
            used += 1
    if not used:
        raise NoValidFrequencyError("all selected bins are silent")
    return total

"""Virtual-source simulation: waveforms, HRTF rendering, trials and statistics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import oaconvolve

from .errors import NoValidFrequencyError
from .frontend import HOP, N_FFT, SAMPLE_RATE, PcmStream, stft_pair
from .grid import angle_between, build_direction_grid, front_back_mirror, to_angles
from .music import band_bins, music_estimate
from .ssde import SSDEModel, estimate_direction, window_existence

log = logging.getLogger(__name__)

WAVE_KINDS = ("sine", "triangle", "square", "sawtooth")
FUNDAMENTALS = (500.0, 1000.0, 2000.0)
WINDOW_FRAMES = 16
SIM_SNR_DB = 15.0
GATE_FACTOR = 10.0


@dataclass(frozen=True)
class WaveSpec:
    kind: str
    fundamental_hz: float = 0.0
    duration: float = 0.5
    amplitude: float = 0.1

    def __post_init__(self):
        if self.kind not in (*WAVE_KINDS, "white_noise"):
            raise ValueError(f"unknown wave kind {self.kind!r}")
        if self.kind != "white_noise" and not 0 < self.fundamental_hz < SAMPLE_RATE / 2:
            raise ValueError("fundamental must lie below Nyquist")
        if self.duration * SAMPLE_RATE <= N_FFT:
            raise ValueError("duration must exceed one frame")

    @property
    def tag(self):
        if self.kind == "white_noise":
            return "white_noise"
        return f"{self.kind}_{int(self.fundamental_hz)}"


def simulation_conditions(duration=None):
    """The 13 source conditions: 4 periodic shapes x 3 fundamentals + white noise."""
    duration = duration or window_duration()
    specs = [WaveSpec(k, f, duration) for k in WAVE_KINDS for f in FUNDAMENTALS]
    return specs + [WaveSpec("white_noise", 0.0, duration)]


def window_duration(frames=WINDOW_FRAMES, hop=HOP, n_fft=N_FFT):
    # one extra frame of pre-roll is consumed by rendering
    return ((frames - 1) * hop + 2 * n_fft) / SAMPLE_RATE


def gen_wave(spec: WaveSpec, rng, sample_rate=SAMPLE_RATE):
    """Band-limited synthesis from Fourier series, random start phase."""
    n = int(round(spec.duration * sample_rate))
    t = np.arange(n) / sample_rate
    if spec.kind == "white_noise":
        return spec.amplitude * rng.standard_normal(n)
    f0 = spec.fundamental_hz
    phase0 = rng.uniform(0, 2 * np.pi)
    n_harm = int((sample_rate / 2 - 1e-9) // f0)
    h = np.arange(1, n_harm + 1)
    if spec.kind == "sine":
        coef = np.where(h == 1, 1.0, 0.0)
    elif spec.kind == "square":
        coef = np.where(h % 2 == 1, 4 / (np.pi * h), 0.0)
    elif spec.kind == "sawtooth":
        coef = 2 / np.pi * (-1.0) ** (h + 1) / h
    else:  # triangle
        coef = np.where(h % 2 == 1, 8 / np.pi**2 * (-1.0) ** ((h - 1) // 2) / h**2, 0.0)
    keep = coef != 0
    h, coef = h[keep], coef[keep]
    x = np.sin(2 * np.pi * f0 * np.outer(t, h) + h * phase0) @ coef
    return spec.amplitude * x


def _noise(shape, rng):
    return rng.standard_normal(shape)


def render_virtual_source(mono, direction, hset, snr_db=None, rng=None, grid=None,
                          noise="white", noise_direction=None):
    """Convolve a mono source with the normalized HRIR pair of a grid direction.

    The convolution runs block-wise (overlap-add of per-block spectral
    products). The first ``n_fft`` output samples carry the filter's
    start-up transient and are dropped, so the result is
    ``len(mono) - n_fft`` samples long.

    ``direction`` is a grid index or a unit vector that must coincide with
    a grid point. With ``snr_db`` set, background noise is added at that
    ratio to the mean rendered source power; ``noise`` selects independent
    sensor noise (``"white"``) or an HRTF-rendered interferer plus sensor
    noise (``"ambient"``).
    """
    grid = grid or build_direction_grid()
    k = direction if np.ndim(direction) == 0 else grid.index_of(direction)
    mono = np.asarray(mono, dtype=np.float64)
    n = hset.n_fft
    if len(mono) <= n:
        raise ValueError("source shorter than one frame")
    hl, hr = hset.impulse_responses(int(k))
    left = oaconvolve(mono, hl)[n:len(mono)]
    right = oaconvolve(mono, hr)[n:len(mono)]
    if snr_db is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        p_sig = 0.5 * (np.mean(left**2) + np.mean(right**2))
        nl, nr = background_noise(len(mono), hset, rng, noise, noise_direction, grid)
        p_noise = 0.5 * (np.mean(nl**2) + np.mean(nr**2))
        g = np.sqrt(p_sig / (10 ** (snr_db / 10)) / p_noise) if p_noise > 0 else 0.0
        left, right = left + g * nl, right + g * nr
    return PcmStream(left, right, hset.sample_rate)


def background_noise(n_mono, hset, rng, kind="white", direction=None, grid=None,
                     coherent_fraction=0.8):
    """Noise of length ``n_mono - n_fft`` (same as the rendered source)."""
    n = hset.n_fft
    m = n_mono - n
    if kind == "white":
        return rng.standard_normal(m), rng.standard_normal(m)
    if kind != "ambient":
        raise ValueError(f"unknown noise kind {kind!r}")
    grid = grid or build_direction_grid()
    k = rng.integers(len(grid)) if direction is None else direction
    src = rng.standard_normal(n_mono)
    hl, hr = hset.impulse_responses(int(k))
    cl = oaconvolve(src, hl)[n:n_mono]
    cr = oaconvolve(src, hr)[n:n_mono]
    pc = 0.5 * (np.mean(cl**2) + np.mean(cr**2))
    gc = np.sqrt(coherent_fraction / pc)
    gs = np.sqrt(1.0 - coherent_fraction)
    return gc * cl + gs * rng.standard_normal(m), gc * cr + gs * rng.standard_normal(m)


@dataclass(frozen=True)
class TrialResult:
    trial_id: int
    condition: str
    method: str
    true_id: int
    estimated_id: int
    error_deg: float
    mirror_error_deg: float


def mean_angle_error(results, mirror=False):
    if len(results) == 0:
        raise ValueError("no trials")
    return float(np.mean([r.mirror_error_deg if mirror else r.error_deg for r in results]))


def trial_errors(true_id, est_id, grid=None):
    grid = grid or build_direction_grid()
    t, e = grid.directions[true_id], grid.directions[est_id]
    err = float(angle_between(t, e))
    mirror = float(min(err, angle_between(front_back_mirror(t), e)))
    return err, mirror


def plane_members(grid, plane, tol=6.0):
    az, el = to_angles(grid.directions)
    if plane == "horizontal":
        return np.abs(el) < tol
    if plane == "median":
        return (np.abs(az) < tol) | (np.abs(np.abs(az) - 180.0) < tol)
    raise ValueError(f"unknown plane {plane!r}")


def discrimination_stats(results, plane, grid=None, tol=6.0):
    """Fraction of trials on a plane whose left/right (or up/down) side is right.

    Horizontal plane: sign of the lateral (y) component; median plane: sign
    of the vertical (z) component. True directions within ``tol`` degrees of
    the dividing plane are excluded.
    """
    grid = grid or build_direction_grid()
    on_plane = plane_members(grid, plane, tol)
    axis = 1 if plane == "horizontal" else 2
    limit = np.sin(np.radians(tol))
    hits = []
    for r in results:
        t = grid.directions[r.true_id]
        if not on_plane[r.true_id] or abs(t[axis]) < limit:
            continue
        hits.append(np.sign(grid.directions[r.estimated_id][axis]) == np.sign(t[axis]))
    if not hits:
        raise ValueError(f"no qualifying trials on the {plane} plane")
    return float(np.mean(hits))


def noise_floor(hset, n_frames=64, seed=12345, noise="white", level=1.0):
    """Mean per-bin power of the background noise at unit level, for gating."""
    rng = np.random.default_rng(seed)
    n_mono = (n_frames - 1) * HOP + 2 * hset.n_fft
    nl, nr = background_noise(n_mono, hset, rng, noise)
    _, xl, xr = stft_pair(PcmStream(level * nl, level * nr, hset.sample_rate))
    half = hset.n_fft // 2
    return 0.5 * (np.abs(xl[:, :half]) ** 2 + np.abs(xr[:, :half]) ** 2).mean(axis=0)


def gate_mask(xl, xr, floor, factor=GATE_FACTOR):
    """Bins whose window-mean power exceeds ``factor`` times the noise floor."""
    half = len(floor)
    p = 0.5 * (np.abs(xl[:, :half]) ** 2 + np.abs(xr[:, :half]) ** 2).mean(axis=0)
    return p > factor * floor


# --- simulation experiment -----------------------------------------------------

METHODS = ("ssde", "music")


def trial_stream(spec, k, hset, rng, snr_db=SIM_SNR_DB, noise="ambient", grid=None):
    """Render one trial; returns the stream and the applied noise gain."""
    mono = gen_wave(spec, rng)
    clean = render_virtual_source(mono, k, hset, None, rng, grid)
    nl, nr = background_noise(len(mono), hset, rng, noise, None, grid)
    p_sig = 0.5 * (np.mean(clean.left**2) + np.mean(clean.right**2))
    p_noise = 0.5 * (np.mean(nl**2) + np.mean(nr**2))
    gain = float(np.sqrt(p_sig / 10 ** (snr_db / 10) / p_noise))
    return PcmStream(clean.left + gain * nl, clean.right + gain * nr, hset.sample_rate), gain


def ssde_window_estimate(model, xl, xr, mask):
    """SSDE direction for one window; an empty mask falls back to every trained bin."""
    try:
        return estimate_direction(window_existence(model, xl, xr, mask))[0]
    except NoValidFrequencyError:
        return estimate_direction(window_existence(model, xl, xr, None))[0]


def music_window_estimate(hset, xl, xr):
    """MUSIC direction for one window; with no selected bin every band bin is used."""
    try:
        return music_estimate(xl, xr, hset)[0]
    except NoValidFrequencyError:
        return music_estimate(xl, xr, hset, threshold=1.0 + 1e-12)[0]


def run_simulation(model: SSDEModel | None, hset, conditions=None, directions=None,
                   snr_db=SIM_SNR_DB, seed=0, noise="ambient", methods=METHODS, grid=None):
    """One trial per (condition, direction); both methods see the same stream.

    Trials are ordered by condition, direction, method. Every trial draws
    from its own generator seeded by (seed, condition index, direction).
    """
    grid = grid or build_direction_grid()
    conditions = simulation_conditions() if conditions is None else conditions
    directions = range(len(grid)) if directions is None else directions
    if "ssde" in methods and model is None:
        raise ValueError("the ssde method needs a trained model")
    floor = noise_floor(hset, noise=noise)
    results = []
    for ci, spec in enumerate(conditions):
        for k in directions:
            rng = np.random.default_rng([int(seed), ci, int(k)])
            stream, gain = trial_stream(spec, int(k), hset, rng, snr_db, noise, grid)
            _, xl, xr = stft_pair(stream, n_fft=hset.n_fft)
            for method in methods:
                if method == "ssde":
                    est = ssde_window_estimate(model, xl, xr, gate_mask(xl, xr, floor * gain**2))
                elif method == "music":
                    est = music_window_estimate(hset, xl, xr)
                else:
                    raise ValueError(f"unknown method {method!r}")
                err, mirr = trial_errors(int(k), est, grid)
                results.append(TrialResult(len(results), spec.tag, method, int(k), int(est), err, mirr))
        log.info("condition %s done", spec.tag)
    return results


TRIAL_FIELDS = ("trial_id", "condition", "method", "true_id", "estimated_id", "error_deg", "mirror_error_deg")


def write_trials_csv(results, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_FIELDS)
        for r in results:
            w.writerow([r.trial_id, r.condition, r.method, r.true_id, r.estimated_id,
                        f"{r.error_deg:.6f}", f"{r.mirror_error_deg:.6f}"])


def read_trials_csv(path):
    with open(path, newline="") as fh:
        return [TrialResult(int(row["trial_id"]), row["condition"], row["method"], int(row["true_id"]),
                            int(row["estimated_id"]), float(row["error_deg"]), float(row["mirror_error_deg"]))
                for row in csv.DictReader(fh)]


def _ordered(values):
    return list(dict.fromkeys(values))


def summarize(results):
    """Rows of (condition, method, mean error, mirror-forgiving mean error)."""
    rows = []
    for cond in _ordered(r.condition for r in results):
        for method in _ordered(r.method for r in results):
            sel = [r for r in results if r.condition == cond and r.method == method]
            if sel:
                rows.append((cond, method, mean_angle_error(sel), mean_angle_error(sel, mirror=True)))
    return rows


def discrimination_table(results, condition="white_noise", grid=None):
    """Rows of (method, plane, accuracy) for one condition."""
    grid = grid or build_direction_grid()
    rows = []
    for method in _ordered(r.method for r in results):
        sel = [r for r in results if r.method == method and r.condition == condition]
        for plane in ("horizontal", "median"):
            try:
                acc = discrimination_stats(sel, plane, grid)
            except ValueError:
                acc = float("nan")
            rows.append((method, plane, acc))
    return rows


def write_outputs(results, out_dir, grid=None):
    """trials.csv, summary.csv, discrimination.csv and gnuplot .dat files."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trials_csv(results, out / "trials.csv")
    summary = summarize(results)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "method", "mean_error_deg", "mirror_forgiving_error_deg"])
        for c, m, e, f in summary:
            w.writerow([c, m, f"{e:.4f}", f"{f:.4f}"])
    disc = discrimination_table(results, grid=grid)
    with open(out / "discrimination.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "plane", "accuracy"])
        for m, p, a in disc:
            w.writerow([m, p, f"{a:.4f}"])
    methods = _ordered(r.method for r in results)
    table = {(c, m): (e, f) for c, m, e, f in summary}
    conds = _ordered(r.condition for r in results)
    with open(out / "simulation.dat", "w") as fh:
        fh.write("# idx condition " + " ".join(f"{m}_err {m}_mirror" for m in methods) + "\n")
        for i, c in enumerate(conds):
            vals = " ".join(f"{table[c, m][0]:.4f} {table[c, m][1]:.4f}" for m in methods if (c, m) in table)
            fh.write(f"{i} {c} {vals}\n")
    with open(out / "discrimination.dat", "w") as fh:
        fh.write("# method plane accuracy\n")
        for m, p, a in disc:
            fh.write(f"{m} {p} {a:.4f}\n")
    return summary, disc


def report(results, grid=None):
    """Plain-text summary; a pure function of the trial table."""
    lines = [f"{'condition':<14} {'method':<6} {'mean_err':>9} {'mirror_err':>10}"]
    for c, m, e, f in summarize(results):
        lines.append(f"{c:<14} {m:<6} {e:9.2f} {f:10.2f}")
    lines.append("")
    lines.append(f"{'method':<6} {'plane':<10} {'accuracy':>8}")
    for m, p, a in discrimination_table(results, grid=grid):
        lines.append(f"{m:<6} {p:<10} {a:8.3f}")
    return "\n".join(lines) + "\n"

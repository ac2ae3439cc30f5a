import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binaudition.evaluation import (
    TrialResult, WaveSpec, background_noise, discrimination_stats, discrimination_table, gen_wave,
    mean_angle_error, plane_members, read_trials_csv, render_virtual_source, report, run_simulation,
    simulation_conditions, summarize, trial_errors, write_outputs, write_trials_csv,
)
from binaudition.features import compute_features
from binaudition.frontend import SAMPLE_RATE, stft_pair
from binaudition.grid import angle_between, build_direction_grid, from_angles
from binaudition.hrtf import synthesize_hrtf
from binaudition.ssde import MLP, SSDEModel, default_trained_bins


@pytest.fixture(scope="module")
def grid():
    return build_direction_grid()


@pytest.fixture(scope="module")
def hset(grid):
    return synthesize_hrtf(grid)


def fake(true_id, est_id, grid, cond="c", method="m", i=0):
    err, mirr = trial_errors(true_id, est_id, grid)
    return TrialResult(i, cond, method, true_id, est_id, err, mirr)


# --- waveforms ---------------------------------------------------------------

def test_wavespec_validation():
    with pytest.raises(ValueError):
        WaveSpec("sine", 30000.0)
    with pytest.raises(ValueError):
        WaveSpec("sine", 500.0, duration=0.01)
    with pytest.raises(ValueError):
        WaveSpec("chirp", 500.0)
    assert len(simulation_conditions()) == 13
    assert WaveSpec("square", 1000.0).tag == "square_1000"


def test_sine_single_bin():
    x = gen_wave(WaveSpec("sine", 500.0, 0.2), np.random.default_rng(0))
    p = np.abs(np.fft.rfft(x)) ** 2
    k = int(np.argmax(p))
    assert abs(k - 500.0 * len(x) / SAMPLE_RATE) <= 1
    assert p[k - 1:k + 2].sum() > 0.999 * p.sum()


@pytest.mark.parametrize("kind,ratios", [
    ("square", [1, 1 / 3, 1 / 5, 1 / 7]),
    ("sawtooth", [1, 1 / 2, 1 / 3, 1 / 4]),
    ("triangle", [1, 1 / 9, 1 / 25, 1 / 49]),
])
def test_harmonic_magnitudes(kind, ratios):
    # 0.1 s at 500 Hz: exactly 50 periods, so harmonic h sits on DFT bin 50h
    x = gen_wave(WaveSpec(kind, 500.0, 0.1), np.random.default_rng(1))
    mag = np.abs(np.fft.rfft(x))
    h = np.arange(1, 5)
    if kind != "sawtooth":
        h = 2 * h - 1
    got = mag[50 * h] / mag[50]
    np.testing.assert_allclose(got, ratios, rtol=1e-9)
    even = mag[100::100]
    if kind != "sawtooth":
        assert even.max() < 1e-9 * mag[50]


def test_band_limited():
    x = gen_wave(WaveSpec("square", 2000.0, 0.1), np.random.default_rng(2))
    mag = np.abs(np.fft.rfft(x))
    # 0.1 s: harmonic h at bin 200h; the last one below Nyquist is h = 11
    assert mag[2200] > 0 and mag[2200] > 1e3 * np.delete(mag, np.arange(200, 2201, 200)).max()


def test_white_noise_flat_spectrum():
    rng = np.random.default_rng(3)
    spec = WaveSpec("white_noise", 0.0, 0.1, amplitude=1.0)
    p = np.mean([np.abs(np.fft.rfft(gen_wave(spec, rng))[1:-1]) ** 2 for _ in range(100)], axis=0)
    n = int(round(0.1 * SAMPLE_RATE))
    # expected |X|^2 = n for unit variance; 100 realizations give ~10% per bin, band means ~1%
    bands = p[: p.size // 10 * 10].reshape(10, -1).mean(axis=1) / n
    np.testing.assert_allclose(bands, 1.0, atol=0.05)


def test_gen_wave_seeded():
    spec = WaveSpec("white_noise", 0.0, 0.1)
    a = gen_wave(spec, np.random.default_rng(7))
    b = gen_wave(spec, np.random.default_rng(7))
    assert np.array_equal(a, b)


# --- rendering -----------------------------------------------------------------

def test_front_channels_equal(hset, grid):
    k = grid.index_of(from_angles(0.0, 0.0))
    mono = gen_wave(WaveSpec("white_noise", 0.0, 0.2), np.random.default_rng(0))
    s = render_virtual_source(mono, k, hset, grid=grid)
    assert len(s.left) == len(mono) - hset.n_fft
    np.testing.assert_allclose(s.left, s.right, atol=1e-12)


def test_lateral_low_pass_shadowed(hset, grid):
    from scipy.signal import butter, lfilter
    k = grid.nearest(from_angles(90.0, 0.0))
    b, a = butter(4, 1000.0 / (SAMPLE_RATE / 2))
    mono = lfilter(b, a, np.random.default_rng(1).standard_normal(20000))
    s = render_virtual_source(mono, k, hset, grid=grid)
    assert np.sqrt(np.mean(s.right**2)) < np.sqrt(np.mean(s.left**2))


def test_off_grid_direction_rejected(hset, grid):
    d = grid.directions[0] + grid.directions[1]
    with pytest.raises(ValueError):
        render_virtual_source(np.ones(5000), d / np.linalg.norm(d), hset, grid=grid)
    # an on-grid vector is accepted
    render_virtual_source(np.ones(5000), grid.directions[3], hset, grid=grid)


@settings(max_examples=15, deadline=None)
@given(k=st.integers(40, 557), d=st.integers(0, 325), phase=st.floats(0, 2 * np.pi))
def test_rendering_round_trip(hset, grid, k, d, phase):
    # a source periodic in the frame length makes the convolution circular per frame;
    # what remains is the window's negative-frequency image, negligible above bin 40
    n = np.arange(8 * hset.n_fft)
    mono = np.cos(2 * np.pi * k * n / hset.n_fft + phase)
    _, xl, xr = stft_pair(render_virtual_source(mono, d, hset, grid=grid))
    got, _ = compute_features(xl[:, k], xr[:, k])
    an_l, an_r = hset.normalized([k])
    s = xl[:, k] / an_l[d, 0]
    want, _ = compute_features(an_l[d, 0] * s, an_r[d, 0] * s)
    assert np.abs(got - want).max() < 1e-6


def test_noise_at_snr(hset, grid):
    mono = gen_wave(WaveSpec("white_noise", 0.0, 0.5), np.random.default_rng(0))
    clean = render_virtual_source(mono, 10, hset, grid=grid)
    noisy = render_virtual_source(mono, 10, hset, snr_db=15.0, rng=np.random.default_rng(1), grid=grid)
    p_sig = 0.5 * (np.mean(clean.left**2) + np.mean(clean.right**2))
    resid = 0.5 * (np.mean((noisy.left - clean.left) ** 2) + np.mean((noisy.right - clean.right) ** 2))
    assert 10 * np.log10(p_sig / resid) == pytest.approx(15.0, abs=1e-9)


def test_ambient_noise_power(hset):
    nl, nr = background_noise(20000, hset, np.random.default_rng(0), "ambient")
    assert 0.5 * (np.mean(nl**2) + np.mean(nr**2)) == pytest.approx(1.0, rel=0.05)
    with pytest.raises(ValueError):
        background_noise(20000, hset, np.random.default_rng(0), "pink")


# --- statistics ------------------------------------------------------------------

def test_mean_angle_error_examples(grid):
    d = grid.directions
    anti = int(np.argmin(d @ d[0]))
    perp = int(np.argmin(np.abs(d @ d[0])))
    assert mean_angle_error([fake(k, k, grid) for k in range(326)]) == 0.0
    exact_anti = [TrialResult(0, "c", "m", 0, 0, 180.0, 180.0)]
    assert mean_angle_error(exact_anti) == 180.0
    assert fake(0, anti, grid).error_deg > 170.0
    mixed = [TrialResult(0, "c", "m", 0, 0, 0.0, 0.0), TrialResult(1, "c", "m", 0, perp, 90.0, 90.0)]
    assert mean_angle_error(mixed) == 45.0
    with pytest.raises(ValueError):
        mean_angle_error([])


@settings(max_examples=50, deadline=None)
@given(t=st.integers(0, 325), e=st.integers(0, 325))
def test_trial_error_range(grid, t, e):
    err, mirr = trial_errors(t, e, grid)
    assert 0.0 <= mirr <= err <= 180.0
    assert err == pytest.approx(float(angle_between(grid.directions[t], grid.directions[e])))


def test_discrimination_perfect_and_antipodal(grid):
    d = grid.directions
    anti = [int(np.argmin(d @ v)) for v in d]
    for plane in ("horizontal", "median"):
        assert discrimination_stats([fake(k, k, grid) for k in range(326)], plane, grid) == 1.0
        assert discrimination_stats([fake(k, anti[k], grid) for k in range(326)], plane, grid) == 0.0
    with pytest.raises(ValueError):
        discrimination_stats([], "horizontal", grid)
    with pytest.raises(ValueError):
        plane_members(grid, "coronal")


def test_plane_members_tolerance(grid):
    from binaudition.grid import to_angles
    az, el = to_angles(grid.directions)
    h = plane_members(grid, "horizontal")
    m = plane_members(grid, "median")
    assert h.sum() > 10 and m.sum() > 10
    assert np.all(np.abs(el[h]) < 6.0)
    assert np.all((np.abs(az[m]) < 6.0) | (np.abs(np.abs(az[m]) - 180.0) < 6.0))


def test_tables_and_report_are_pure(tmp_path, grid):
    rng = np.random.default_rng(0)
    res = [fake(int(t), int(e), grid, c, m, i)
           for i, (t, e, c, m) in enumerate(zip(rng.integers(326, size=200), rng.integers(326, size=200),
                                                 np.repeat(["white_noise", "sine_500"], 100),
                                                 np.tile(["ssde", "music"], 100)))]
    write_trials_csv(res, tmp_path / "t.csv")
    back = read_trials_csv(tmp_path / "t.csv")
    assert [r.estimated_id for r in back] == [r.estimated_id for r in res]
    assert report(back, grid) == report(read_trials_csv(tmp_path / "t.csv"), grid)
    rows = summarize(back)
    assert [(c, m) for c, m, *_ in rows] == [("white_noise", "ssde"), ("white_noise", "music"),
                                              ("sine_500", "ssde"), ("sine_500", "music")]
    for c, m, e, f in rows:
        sel = [r for r in res if r.condition == c and r.method == m]
        assert e == pytest.approx(np.mean([r.error_deg for r in sel]), abs=1e-5)
        assert f <= e
    assert len(discrimination_table(back, grid=grid)) == 4
    write_outputs(back, tmp_path / "out", grid)
    names = sorted(p.name for p in (tmp_path / "out").iterdir())
    assert names == ["discrimination.csv", "discrimination.dat", "simulation.dat", "summary.csv", "trials.csv"]
    header = (tmp_path / "out" / "summary.csv").read_text().splitlines()[0]
    assert header == "condition,method,mean_error_deg,mirror_forgiving_error_deg"


# --- simulation ---------------------------------------------------------------------

def untrained_model(grid, seed=0):
    rng = np.random.default_rng(seed)
    bins = default_trained_bins(step=16)
    nets = [MLP((5, 500, 500, len(grid)), rng=rng) for _ in bins]
    return SSDEModel(bins, nets, grid.hash, np.radians(15.0), seed, 0)


def test_simulation_deterministic_and_ordered(hset, grid):
    model = untrained_model(grid)
    conds = [WaveSpec("white_noise", 0.0, simulation_conditions()[0].duration)]
    a = run_simulation(model, hset, conds, directions=[0, 50], seed=3, grid=grid)
    b = run_simulation(model, hset, conds, directions=[0, 50], seed=3, grid=grid)
    assert a == b
    assert [(r.true_id, r.method) for r in a] == [(0, "ssde"), (0, "music"), (50, "ssde"), (50, "music")]
    assert [r.trial_id for r in a] == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        run_simulation(None, hset, conds, directions=[0], grid=grid)


@pytest.mark.slow
def test_random_weight_ssde_is_chance(hset, grid):
    model = untrained_model(grid, seed=11)
    conds = [WaveSpec("white_noise", 0.0, simulation_conditions()[0].duration)]
    res = run_simulation(model, hset, conds, seed=0, methods=("ssde",), grid=grid)
    assert len(res) == 326
    assert 80.0 <= mean_angle_error(res) <= 100.0

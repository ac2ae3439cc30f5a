import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from binaudition.errors import CompatibilityError, FormatError, NoValidFrequencyError
from binaudition.features import compute_features
from binaudition.grid import build_direction_grid
from binaudition.hrtf import synthesize_hrtf
from binaudition.ssde import (
    MLP, SSDEModel, SSDENetRegressor, TrainingConfig, aggregate, default_trained_bins,
    estimate_direction, gaussian_target, gradient_check, synth_training_example,
    synth_training_set, train, window_existence,
)

SIGMA = np.radians(15.0)


@pytest.fixture(scope="module")
def grid():
    return build_direction_grid()


@pytest.fixture(scope="module")
def hset(grid):
    return synthesize_hrtf(grid)


@pytest.fixture(scope="module")
def tiny_model(hset, grid):
    cfg = TrainingConfig(examples_per_bin=96, epochs=2, seed=3)
    return train(hset, [60, 64], cfg, grid)


def test_gaussian_target_values(grid):
    h = 17
    t = gaussian_target(h, SIGMA, grid)
    assert t[h] == 1.0
    assert int(np.argmax(t)) == h
    from binaudition.grid import DirectionGrid
    d = grid.directions[h]
    assert gaussian_target(0, SIGMA, DirectionGrid(np.vstack([d, -d])))[1] < 1e-30
    # direction exactly sigma away: rotate grid point h by sigma about a perpendicular axis
    perp = np.cross(d, [0.0, 0.0, 1.0])
    perp /= np.linalg.norm(perp)
    q = np.cos(SIGMA) * d + np.sin(SIGMA) * np.cross(perp, d)
    g2 = DirectionGrid(np.vstack([d, q]))
    assert gaussian_target(0, SIGMA, g2)[1] == pytest.approx(np.exp(-0.5), rel=1e-12)
    with pytest.raises(ValueError):
        gaussian_target(0, 0.0, grid)


def test_gaussian_target_rotation_equivariant(grid):
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    from binaudition.grid import DirectionGrid
    rotated = DirectionGrid(grid.directions @ q.T)
    np.testing.assert_allclose(gaussian_target(40, SIGMA, rotated), gaussian_target(40, SIGMA, grid), atol=1e-9)


def test_argmax_of_target_is_true_direction(grid):
    t = gaussian_target(np.arange(len(grid)), SIGMA, grid)
    assert np.array_equal(np.argmax(t, axis=1), np.arange(len(grid)))


def test_training_example_noise_free_matches_hrtf(hset, grid):
    rng = np.random.default_rng(0)
    b, h = 100, 42
    x, y = synth_training_example(hset, h, b, rng, noise=False, source_mag=(1.0, 1.0),
                                  random_phase=False, grid=grid)
    al, ar = hset.normalized([b])
    ref, _ = compute_features(al[h], ar[h])
    np.testing.assert_array_equal(x, ref[0])
    assert np.array_equal(y, gaussian_target(h, SIGMA, grid))


def test_training_example_noise_changes_features_not_target(hset, grid):
    rng = np.random.default_rng(1)
    x1, y1 = synth_training_example(hset, 5, 80, rng, grid=grid)
    x2, y2 = synth_training_example(hset, 5, 80, rng, grid=grid)
    assert np.array_equal(y1, y2)
    assert not np.allclose(x1, x2)


def test_low_snr_shifts_ild_distribution(hset, grid):
    rng = np.random.default_rng(2)
    b = 300
    clean, _, _ = synth_training_set(hset, b, 1000, rng, noise=False, grid=grid)
    noisy, _, _ = synth_training_set(hset, b, 1000, rng, snr_db=(-30.0, -30.0), grid=grid)
    assert abs(np.mean(np.abs(clean[:, 0])) - np.mean(np.abs(noisy[:, 0]))) > 0.1


def test_zero_weights_give_half():
    net = MLP((5, 8, 8, 6))
    out = net.forward(np.random.default_rng(0).standard_normal((4, 5)))
    assert np.all(out == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=5, max_size=5))
def test_outputs_in_open_unit_interval(x):
    net = MLP((5, 16, 16, 10), rng=np.random.default_rng(0), dtype=np.float64)
    out = net.forward(np.array([x]))
    assert np.all((out > 0) & (out < 1))


def test_gradient_check_small_net():
    rng = np.random.default_rng(0)
    net = MLP((5, 12, 12, 7), rng=rng, dtype=np.float64)
    x = rng.standard_normal((6, 5))
    y = rng.random((6, 7))
    assert gradient_check(net, x, y) < 1e-4


def test_gradient_zero_input_zero_target():
    rng = np.random.default_rng(1)
    net = MLP((5, 6, 6, 4), rng=rng, dtype=np.float64)
    _, g = net.loss_and_grads(np.zeros((3, 5)), np.zeros((3, 4)))
    assert np.all(g[: 5 * 6] == 0.0)


def test_duplicated_example_doubles_gradient():
    rng = np.random.default_rng(2)
    net = MLP((5, 6, 6, 4), rng=rng, dtype=np.float64)
    x, y = rng.standard_normal((1, 5)), rng.random((1, 4))
    _, g1 = net.loss_and_grads(x, y)
    _, g2 = net.loss_and_grads(np.vstack([x, x]), np.vstack([y, y]))
    # BLAS picks different kernels for 1- and 2-row products, so agreement is to rounding
    assert np.max(np.abs(g2 - 2 * g1)) <= 1e-13 * np.max(np.abs(g1))


def test_regressor_deterministic_and_learns(hset, grid):
    rng = np.random.default_rng(4)
    X, Y, _ = synth_training_set(hset, 120, 326, rng, grid=grid)
    Xv, Yv, _ = synth_training_set(hset, 120, 326, rng, grid=grid)
    a = SSDENetRegressor(hidden=(64, 64), epochs=4, random_state=0).fit(X, Y, Xv, Yv)
    b = SSDENetRegressor(hidden=(64, 64), epochs=4, random_state=0).fit(X, Y)
    assert a.net_.flat.tobytes() == b.net_.flat.tobytes()
    assert a.net_.loss(Xv, Yv) / len(Xv) < a.initial_val_loss_
    assert a.get_params()["epochs"] == 4


def test_aggregate_and_tie_rule():
    maps = np.array([[0.1, 0.7, 0.2], [0.3, 0.1, 0.6]])
    np.testing.assert_array_equal(aggregate(maps, [1, 0]), maps[0])
    np.testing.assert_array_equal(aggregate(maps, [1, 1]), maps[0] + maps[1])
    with pytest.raises(NoValidFrequencyError):
        aggregate(maps, [0, 0])
    assert estimate_direction(np.array([0, 0, 1.0, 0]))[0] == 2
    assert estimate_direction(np.full(5, 0.3))[0] == 0


def test_default_trained_bins():
    b = default_trained_bins()
    assert b[0] == 5 and np.all(np.diff(b) == 4)
    assert b[-1] * 44100 / 2048 <= 12000


def test_model_roundtrip_and_errors(tmp_path, tiny_model, grid):
    path = tmp_path / "m.ssde"
    tiny_model.save(path)
    back = SSDEModel.load(path, grid)
    assert back.to_bytes() == tiny_model.to_bytes()
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        SSDEModel.load(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        SSDEModel.load(tmp_path / "short")
    from binaudition.grid import DirectionGrid
    with pytest.raises(CompatibilityError):
        SSDEModel.load(path, DirectionGrid(np.roll(grid.directions, 1, axis=0)))


def test_training_deterministic(hset, grid, tiny_model):
    again = train(hset, [60, 64], TrainingConfig(examples_per_bin=96, epochs=2, seed=3), grid)
    assert again.to_bytes() == tiny_model.to_bytes()


def test_window_existence_range_and_gain_invariance(tiny_model):
    rng = np.random.default_rng(5)
    xl = rng.standard_normal((4, 2048)) + 1j * rng.standard_normal((4, 2048))
    xr = rng.standard_normal((4, 2048)) + 1j * rng.standard_normal((4, 2048))
    mask = np.zeros(1024, bool)
    mask[[60, 64]] = True
    p = window_existence(tiny_model, xl, xr, mask)
    assert np.all(p > 0) and np.all(p < 2 * 4)
    q = window_existence(tiny_model, 3.7 * xl, 3.7 * xr, mask)
    assert estimate_direction(p)[0] == estimate_direction(q)[0]
    with pytest.raises(NoValidFrequencyError):
        window_existence(tiny_model, xl, xr, np.zeros(1024, bool))


def test_cell_mapping(tiny_model):
    cells = tiny_model.bin_cells()
    assert cells[60] == 0 and cells[64] == 1 and cells[61] == 0 and cells[63] == 1
    assert cells[10] == -1

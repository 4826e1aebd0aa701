import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from ssltrack.array import ArrayConfig, MicrophoneModel, circular_array
from ssltrack.geometry import build_sphere_grid
from ssltrack.tdoa import (
    CacheError,
    CalibrationError,
    TdoaDistribution,
    build_grid_tables,
    build_matching_matrix,
    build_tables,
    cache_bytes,
    calibrate_msw,
    load_cache,
    matching_scores,
    quantized_tdoa,
    round_half_away,
    save_cache,
    tables_digest,
    tdoa,
    tdoa_distribution,
    tdoa_matrix,
    window_capture_probability,
)


def two_mics(var=1e-6, sigma_c=5.0):
    cov = var * np.eye(3)
    mics = [
        MicrophoneModel([0.145, 0.0, 0.0], cov, [0, 0, 1]),
        MicrophoneModel([0.0, 0.0, 0.0], cov, [0, 0, 1]),
    ]
    return ArrayConfig(mics, sound_speed_std=sigma_c)


unit_vectors = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
    lambda v: np.linalg.norm(v) > 0.1
).map(lambda v: np.asarray(v) / np.linalg.norm(v))


def test_tdoa_values():
    cfg = two_mics()
    assert tdoa([1.0, 0.0, 0.0], 0, 1, cfg) == pytest.approx(16000 * 0.145 / 343)
    assert tdoa([1.0, 0.0, 0.0], 0, 1, cfg) == pytest.approx(6.764, abs=1e-3)
    assert tdoa([0.0, 1.0, 0.0], 0, 1, cfg) == 0.0


@settings(max_examples=50, deadline=None)
@given(unit_vectors, st.integers(0, 15), st.integers(1, 15))
def test_tdoa_antisymmetric(u, p, shift):
    q = (p + shift) % 16
    cfg = circular_array(16)
    assert tdoa(u, p, q, cfg) == pytest.approx(-tdoa(u, q, p, cfg), abs=1e-12)


def test_tdoa_matrix_agrees_with_scalar(oma):
    pts = build_sphere_grid(1).points
    mat = tdoa_matrix(oma, pts)
    for i in (0, 7, 119):
        p, q = oma.pairs[i]
        for k in (0, 13, 41):
            assert mat[i, k] == pytest.approx(tdoa(pts[k], p, q, oma))


def test_tdoa_distribution_values():
    cfg = two_mics()
    d = tdoa_distribution([1.0, 0.0, 0.0], 0, 1, cfg)
    a = 16000 / 343
    expected = a * np.sqrt(2e-6 + 0.145**2 * 25 / 343**2)
    assert d.std == pytest.approx(expected, rel=1e-12)
    assert d.std == pytest.approx(0.1186, abs=1e-4)
    clean = tdoa_distribution([1.0, 0.0, 0.0], 0, 1, two_mics(0.0, 0.0))
    assert clean.std == 0.0
    same = ArrayConfig([MicrophoneModel([0.1, 0.0, 0.0], np.zeros((3, 3)), [0, 0, 1])] * 2)
    assert tdoa_distribution([0.3, 0.4, np.sqrt(0.75)], 0, 1, same).mean == 0.0


def test_tdoa_distribution_matches_monte_carlo(rng):
    cfg = two_mics(var=4e-6)
    u = np.array([0.6, 0.0, 0.8])
    d = tdoa_distribution(u, 0, 1, cfg)
    n = 200_000
    mp = cfg.microphones[0].position_mean + rng.normal(0, 2e-3, (n, 3))
    mq = cfg.microphones[1].position_mean + rng.normal(0, 2e-3, (n, 3))
    c = rng.normal(343, 5, n)
    samples = 16000 / c * ((mp - mq) @ u)
    assert samples.mean() == pytest.approx(d.mean, abs=5e-3)
    assert samples.std() == pytest.approx(d.std, rel=0.03)


def test_round_half_away():
    assert round_half_away(6.764) == 7
    assert round_half_away(0.0) == 0
    assert round_half_away(-6.764) == -7
    assert round_half_away(2.5) == 3
    assert round_half_away(-2.5) == -3
    assert np.array_equal(round_half_away([0.5, -0.5, 1.49]), [1, -1, 1])
    assert quantized_tdoa([1.0, 0.0, 0.0], 0, 1, two_mics()) == 7


@settings(max_examples=100, deadline=None)
@given(st.floats(-200, 200, allow_nan=False))
def test_rounding_error_at_most_half(x):
    assert abs(round_half_away(x) - x) <= 0.5


def test_capture_probability():
    assert window_capture_probability(TdoaDistribution(3.0, 0.5), 3, 0) == pytest.approx(
        norm.cdf(1) - norm.cdf(-1)
    )
    assert window_capture_probability(TdoaDistribution(3.0, 0.5), 3, 0) == pytest.approx(0.6827, abs=1e-4)
    assert window_capture_probability(TdoaDistribution(3.0, 0.5), 3, 3) >= 0.9999
    assert window_capture_probability(TdoaDistribution(3.0, 0.0), 3, 0) == 1.0
    assert window_capture_probability(TdoaDistribution(5.0, 0.0), 3, 1) == 0.0
    with pytest.raises(ValueError):
        window_capture_probability(TdoaDistribution(0.0, 1.0), 0, -1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 5), st.integers(-20, 20), st.integers(0, 10))
def test_capture_monotone_in_half_width(mean, std, center, w):
    d = TdoaDistribution(mean, std)
    assert window_capture_probability(d, center, w + 1) >= window_capture_probability(d, center, w)


def test_calibration_noise_free_needs_no_widening():
    cfg = circular_array(8, sigma_mic2=0.0, sound_speed_std=0.0)
    res = calibrate_msw(cfg, build_sphere_grid(2), threshold=0.0)
    assert not res.half_widths.any()
    assert res.iterations == 0


def test_calibration_zero_threshold_skips_loop(oma):
    res = calibrate_msw(oma, build_sphere_grid(1), threshold=0.0)
    assert not res.half_widths.any() and res.iterations == 0


def test_calibration_oma_fine(oma_tables):
    coarse, fine = oma_tables.calibration
    for res in (coarse, fine):
        assert res.min_probability >= 0.3
        assert np.all(np.diff(res.history) >= -1e-12)
        assert res.half_widths.max() <= 128
    # the coarser grid needs wider windows
    assert coarse.half_widths.sum() >= fine.half_widths.sum()


def test_calibration_rejects_bad_threshold(oma):
    with pytest.raises(ValueError):
        calibrate_msw(oma, build_sphere_grid(0), threshold=1.0)


def test_calibration_cap_raises():
    cfg = circular_array(4, diameter=0.1)
    with pytest.raises(CalibrationError, match="N/2"):
        calibrate_msw(cfg, build_sphere_grid(0), threshold=0.3, frame_size=2)


def small_tables(level_c, level_f, hw=1):
    cfg = circular_array(8)
    return (cfg, build_grid_tables(cfg, build_sphere_grid(level_c), hw),
            build_grid_tables(cfg, build_sphere_grid(level_f), hw))


def test_matching_all_links():
    _, coarse, fine = small_tables(0, 1)
    m = build_matching_matrix(coarse, fine, coarse.size)
    assert m.all()


def test_matching_identical_grids_diagonal():
    _, coarse, fine = small_tables(1, 1)
    m = build_matching_matrix(coarse, fine, 1)
    for f in range(fine.size):
        if fine.masks.per_direction[f]:
            score = matching_scores(coarse, fine, f)
            assert score[f] == score.max()
            assert m[f, f]


def test_matching_column_sums(oma_tables):
    assert np.all(oma_tables.matching.sum(axis=0) == 10)
    with pytest.raises(ValueError):
        build_matching_matrix(oma_tables.coarse, oma_tables.fine, 0)


def test_matching_scores_brute_force():
    _, coarse, fine = small_tables(0, 1, hw=2)
    f = 17
    score = matching_scores(coarse, fine, f)
    for c in range(coarse.size):
        total = 0.0
        for i in range(len(coarse.tau)):
            if coarse.masks.per_direction_pair[i, c] and fine.masks.per_direction_pair[i, f]:
                a = np.arange(coarse.tau[i, c] - 2, coarse.tau[i, c] + 3)
                b = np.arange(fine.tau[i, f] - 2, fine.tau[i, f] + 3)
                total += len(np.intersect1d(a, b))
        assert score[c] == pytest.approx(total)


def test_tables_quantization(oma_tables, oma):
    exact = tdoa_matrix(oma, oma_tables.fine.grid.points)
    assert np.abs(oma_tables.fine.tau - exact).max() <= 0.5


def test_cache_roundtrip(tmp_path, oma, oma_tables):
    path = tmp_path / "t.ssltc"
    save_cache(oma_tables, path)
    back = load_cache(path, oma)
    assert cache_bytes(back) == cache_bytes(oma_tables)
    assert tables_digest(back) == tables_digest(oma_tables)
    assert np.array_equal(back.matching, oma_tables.matching)
    assert np.array_equal(back.fine.tau, oma_tables.fine.tau)


def test_cache_rejects_other_config(tmp_path, oma_tables, cma):
    path = tmp_path / "t.ssltc"
    save_cache(oma_tables, path)
    with pytest.raises(CacheError):
        load_cache(path, cma)


def test_cache_rejects_corruption(tmp_path, oma_tables):
    path = tmp_path / "t.ssltc"
    data = cache_bytes(oma_tables)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CacheError):
        load_cache(path)
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CacheError):
        load_cache(path)


def test_fixed_half_widths_skip_calibration(oma):
    t = build_tables(oma, coarse_level=1, fine_level=2, half_widths=(3, 1))
    assert t.calibration is None
    assert np.all(t.coarse.half_width == 3) and np.all(t.fine.half_width == 1)

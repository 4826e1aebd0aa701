import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssltrack.array import (
    ArrayConfig,
    MicrophoneModel,
    build_masks,
    circular_array,
    cube_array,
    directivity_angle,
    directivity_gain,
    load_array_config,
    load_preset,
    logistic_gain,
    save_array_config,
)
from ssltrack.geometry import build_sphere_grid


def test_angles():
    d = np.array([0.0, 0.0, 1.0])
    assert directivity_angle(d, d) == pytest.approx(0.0)
    assert directivity_angle(-d, d) == pytest.approx(180.0)
    assert directivity_angle([1.0, 0.0, 0.0], d) == pytest.approx(90.0)
    with pytest.raises(ValueError):
        directivity_angle([0.0, 0.0, 0.0], d)


def test_logistic_values():
    assert logistic_gain(90.0, 80.0, 100.0) == pytest.approx(0.5)
    assert logistic_gain(80.0, 80.0, 100.0) == pytest.approx(1 / (1 + np.exp(-10)))
    assert logistic_gain(80.0, 80.0, 100.0) == pytest.approx(0.9999546, abs=1e-7)
    assert logistic_gain(100.0, 80.0, 100.0) == pytest.approx(4.5398e-5, rel=1e-4)
    with pytest.raises(ValueError):
        logistic_gain(10.0, 100.0, 80.0)
    # far outside the transition the gain saturates without warnings
    assert logistic_gain(180.0, 0.0, 1.0) == 0.0


def test_gain_uses_degrees():
    u = np.array([np.sin(np.radians(85)), 0.0, np.cos(np.radians(85))])
    g = directivity_gain(u, [0.0, 0.0, 1.0], 80.0, 100.0)
    assert g == pytest.approx(1 / (1 + np.exp(-5)))


def test_oma_preset_matches_builder(oma):
    assert oma.n_mics == 16
    assert oma.content_hash() == circular_array(16, name="oma").content_hash()
    radius = np.linalg.norm(oma.positions[:, :2], axis=1)
    assert np.allclose(radius, 0.127)
    assert np.allclose(oma.positions[:, 2], 0.0)


def test_cma_preset_geometry(cma):
    assert cma.n_mics == 16
    pos = cma.positions
    assert np.allclose(np.abs(pos).max(axis=1), 0.125)
    # each face holds a square of side 0.145
    for normal in np.unique(np.round(cma.orientations, 6), axis=0):
        face = pos[np.all(np.isclose(cma.orientations, normal), axis=1)]
        d = np.linalg.norm(face[:, None] - face[None], axis=2)
        assert np.isclose(np.sort(d[0])[1], 0.145)


def test_eight_mic_presets():
    assert load_preset("oma8").n_mics == 8
    assert load_preset("cma8").n_mics == 8
    with pytest.raises(ValueError):
        load_preset("nope")


def test_masks_oma_up_and_down(oma):
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    m = build_masks(oma, pts)
    assert m.per_direction_pair[:, 0].all()
    assert not m.per_direction[1]


def test_masks_gmin_zero_sets_everything():
    cfg = circular_array(8, min_gain=0.0)
    m = build_masks(cfg, build_sphere_grid(2))
    assert m.per_direction_pair.all()


def _consistent(m):
    assert np.array_equal(m.per_direction, m.per_direction_pair.any(axis=0))
    assert np.array_equal(m.per_pair, m.per_direction_pair.any(axis=1))


@pytest.mark.parametrize("preset", ["oma", "cma", "oma8", "cma8"])
def test_mask_consistency(preset):
    _consistent(build_masks(load_preset(preset), build_sphere_grid(3)))


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(0.0, 0.9))
def test_lower_gmin_never_clears_bits(a, b):
    lo, hi = sorted((a, b))
    grid = build_sphere_grid(2)
    m_lo = build_masks(cube_array(min_gain=lo), grid)
    m_hi = build_masks(cube_array(min_gain=hi), grid)
    assert np.all(m_lo.per_direction_pair >= m_hi.per_direction_pair)


def _opposite_pairs(cfg):
    o = cfg.orientations
    return [i for i, (p, q) in enumerate(cfg.pairs) if np.allclose(o[p], -o[q])]


def test_cma_opposite_faces_bounded(cma):
    # opposite-face gains peak at 90 degrees off both axes: G(90)^2 = 1/4
    grid = build_sphere_grid(4)
    opp = _opposite_pairs(cma)
    assert opp
    g90 = logistic_gain(90.0, 80.0, 100.0)
    from ssltrack.array import mic_gains

    gains = mic_gains(cma, grid.points)
    for i in opp:
        p, q = cma.pairs[i]
        assert (gains[p] * gains[q]).max() <= g90**2 + 1e-12


def test_cma_opposite_faces_masked_above_quarter():
    cfg = load_preset("cma")
    strict = ArrayConfig(cfg.microphones, min_gain=0.3, name="cma-strict")
    m = build_masks(strict, build_sphere_grid(4))
    opp = _opposite_pairs(strict)
    assert not m.per_pair[opp].any()
    assert m.per_pair.sum() == len(strict.pairs) - len(opp)


def test_config_roundtrip(tmp_path, cma):
    path = tmp_path / "cfg.json"
    save_array_config(cma, path)
    back = load_array_config(path)
    assert back.content_hash() == cma.content_hash()
    assert np.array_equal(back.positions, cma.positions)
    assert json.loads(path.read_text())["format"] == "ssltrack-array/1"


def test_config_validation():
    mic = MicrophoneModel([0, 0, 0], np.zeros((3, 3)), [0, 0, 1])
    with pytest.raises(ValueError):
        ArrayConfig([mic])
    with pytest.raises(ValueError):
        ArrayConfig([mic, mic], sound_speed_std=50.0)
    with pytest.raises(ValueError):
        MicrophoneModel([0, 0, 0], np.zeros((3, 3)), [0, 0, 1], alpha=100, beta=80)
    with pytest.raises(ValueError):
        MicrophoneModel([0, 0, 0], -np.eye(3), [0, 0, 1])
    with pytest.raises(ValueError):
        ArrayConfig.from_dict({"microphones": []})

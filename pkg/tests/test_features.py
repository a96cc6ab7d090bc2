import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdcast.features import (FEATURE_NAMES, N_FEATURES, extract_features, kinematics_series, polar_offset,
                               read_hxf, trial_features, wrap_angle, write_hxf)
from herdcast.formats import BadMagicError, TruncatedFileError, UnsupportedVersionError
from herdcast.ingest import Trial

ANGLES = [1, 3, 11, 13, 15, 17, 19, 21, 23, 25, 27, 29, 42, 43, 44, 45, 46, 47]
RADII = [0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24, 26, 28]


def _static(herders, targets, n=5):
    t = np.arange(n) / 50.0
    return Trial("s", "expert", 50.0, True, t, np.tile(herders, (n, 1, 1)), np.tile(targets, (n, 1, 1)))


def test_layout_size():
    assert N_FEATURES == 48 == 2 + 16 + 12 + 12 + 6
    assert len(FEATURE_NAMES) == 48 and len(set(FEATURE_NAMES)) == 48


def test_polar_offset_examples():
    d, a = polar_offset((0, 0), (3, 4))
    assert d == 5.0 and a == pytest.approx(0.927295218, abs=1e-9)
    assert polar_offset((2, 2), (2, 2)) == (0.0, 0.0)
    d, a = polar_offset((1, 1), (1, 2))
    assert d == 1.0 and a == pytest.approx(math.pi / 2)


def test_wrap_angle_half_open_interval():
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    x = wrap_angle(np.linspace(-20, 20, 1001))
    assert np.all(x > -math.pi) and np.all(x <= math.pi)


def test_kinematics_stationary():
    rd, rdd, head = kinematics_series(np.tile([0.3, -0.2], (6, 1)), 50.0)
    assert np.all(rd == 0) and np.all(rdd == 0) and np.all(head == 0)


def test_kinematics_quadratic_radial_motion():
    t = np.arange(60) / 50.0
    pos = np.stack([t ** 2, np.zeros_like(t)], axis=1)
    rd, rdd, _ = kinematics_series(pos, 50.0)
    np.testing.assert_allclose(rd[1:-1], 2 * t[1:-1], atol=1e-6)
    np.testing.assert_allclose(rdd[1:-1], 2.0, atol=1e-3)


def test_kinematics_heading_downward():
    t = np.arange(10) / 50.0
    pos = np.stack([np.zeros_like(t), -t], axis=1)
    _, _, head = kinematics_series(pos, 50.0)
    np.testing.assert_allclose(head[1:-1], -math.pi / 2)


def test_kinematics_needs_three_frames():
    with pytest.raises(ValueError):
        kinematics_series(np.zeros((2, 2)), 50.0)


def test_crafted_frame():
    tr = _static([[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.5], [1, 1], [-1, 1], [1, -1]])
    f = extract_features(tr, 2, 0)
    assert f.shape == (48,)
    assert f[0] == 1.0 and f[1] == 0.0
    assert f[2] == 0.5 and f[3] == pytest.approx(math.pi / 2)
    assert f[18] == 0.0


def test_focal_swap_permutes_blocks(expert_trials):
    tr = expert_trials[0]
    a, b = trial_features(tr, 0), trial_features(tr, 1)
    for (lo, hi), (lo2, hi2) in [((2, 10), (10, 18)), ((18, 20), (20, 22)), ((30, 32), (32, 34)),
                                 ((42, 43), (43, 44))]:
        np.testing.assert_array_equal(a[:, lo:hi], b[:, lo2:hi2])
        np.testing.assert_array_equal(a[:, lo2:hi2], b[:, lo:hi])
    np.testing.assert_array_equal(a[:, 22:30], b[:, 22:30])
    np.testing.assert_array_equal(a[:, 34:42], b[:, 34:42])
    np.testing.assert_array_equal(a[:, 44:48], b[:, 44:48])


def test_extract_matches_whole_trial(expert_trials):
    tr = expert_trials[1]
    full = trial_features(tr, 1)
    for i in (0, 1, 57, tr.n_frames - 1):
        np.testing.assert_allclose(extract_features(tr, i, 1), full[i], rtol=0, atol=1e-12)
    with pytest.raises(IndexError):
        extract_features(tr, tr.n_frames, 0)


def test_feature_ranges(expert_trials):
    for tr in expert_trials:
        f = trial_features(tr, 0)
        assert np.all(np.abs(f[:, ANGLES]) <= math.pi)
        assert np.all(f[:, RADII] >= 0)


def test_derived_velocity_close_to_recorded(expert_trials):
    tr = expert_trials[0]
    derived = Trial(tr.trial_id, tr.expertise, tr.hz, tr.success, tr.t, tr.herders, tr.targets)
    a, b = trial_features(tr, 0), trial_features(derived, 0)
    # headings agree where the herder moves steadily
    speed = np.linalg.norm(tr.herder_vel[:, 0], axis=1)
    steady = (speed > 0.5)[1:-1] & (np.abs(np.diff(speed)) < 1e-3)[1:]
    diff = np.abs(wrap_angle(a[1:-1, 42] - b[1:-1, 42]))[steady]
    assert diff.size > 0 and np.median(diff) < 0.1


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi), st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2 ** 31))
def test_rigid_motion(theta, dx, dy, seed):
    r = np.random.default_rng(seed)
    n = 6
    herders = r.uniform(-1, 1, (n, 2, 2))
    targets = r.uniform(-1, 1, (n, 4, 2))
    tr = Trial("x", "expert", 50.0, True, np.arange(n) / 50.0, herders, targets)
    base = trial_features(tr, 0)
    shifted = Trial("x", "expert", 50.0, True, tr.t, herders + [dx, dy], targets + [dx, dy])
    np.testing.assert_allclose(trial_features(shifted, 0, center=(dx, dy)), base, atol=1e-9)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    turned = Trial("x", "expert", 50.0, True, tr.t, herders @ rot.T, targets @ rot.T)
    f = trial_features(turned, 0)
    np.testing.assert_allclose(f[:, RADII], base[:, RADII], atol=1e-9)
    np.testing.assert_allclose(f[:, 30:42], base[:, 30:42], atol=1e-6)
    moved = base[:, ANGLES] != 0
    delta = wrap_angle(f[:, ANGLES] - base[:, ANGLES] - theta)
    assert np.all(np.abs(delta[moved]) < 1e-7)


def test_hxf_roundtrip_and_errors(tmp_path, expert_trials):
    m = trial_features(expert_trials[0], 0)
    p = tmp_path / "f.hxf"
    write_hxf(p, m)
    assert read_hxf(p).tobytes() == m.tobytes()
    raw = p.read_bytes()
    (tmp_path / "magic.hxf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_hxf(tmp_path / "magic.hxf")
    (tmp_path / "ver.hxf").write_bytes(raw[:4] + (9).to_bytes(4, "little") + raw[8:])
    with pytest.raises(UnsupportedVersionError):
        read_hxf(tmp_path / "ver.hxf")
    (tmp_path / "cut.hxf").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        read_hxf(tmp_path / "cut.hxf")
    with pytest.raises(ValueError):
        write_hxf(p, np.zeros((3, 5)))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armmpc.kinematics import forward_kinematics, quat_to_matrix, rotvec_to_matrix
from armmpc.trajgen import (
    SINGULARITY_END_CONFIG,
    SINGULARITY_START_CONFIG,
    cubic_spline_position,
    export_trajectory_csv,
    import_trajectory_csv,
    quaternion_interp,
    scenario_initial_config,
    scenario_trajectory,
)


def test_spline_constant_trajectory():
    ts, pos, vel = cubic_spline_position([(0.0, (1, 2, 3)), (1.0, (1, 2, 3))], 0.1)
    np.testing.assert_allclose(pos, np.tile([1, 2, 3], (11, 1)), atol=1e-12)
    np.testing.assert_allclose(vel, 0.0, atol=1e-12)


def test_spline_straight_line_stays_on_segment():
    a = np.array([0.0, 0.0, 0.0])
    b = np.array([1.0, 2.0, -1.0])
    ts, pos, vel = cubic_spline_position([(0.0, a), (0.5, 0.5 * (a + b)), (1.0, b)], 0.01)
    # collinearity: every sample is a + s*(b - a)
    s = pos @ (b - a) / (b @ b)
    np.testing.assert_allclose(pos, np.outer(s, b - a), atol=1e-12)
    np.testing.assert_allclose(vel[0], 0.0, atol=1e-12)
    np.testing.assert_allclose(vel[-1], 0.0, atol=1e-12)


def test_spline_interpolates_and_is_c2(rng):
    wps = [(float(t), rng.standard_normal(3)) for t in range(5)]
    dt = 1e-3
    ts, pos, vel = cubic_spline_position(wps, dt)
    for t, p in wps:
        idx = int(round((t - wps[0][0]) / dt))
        np.testing.assert_allclose(pos[idx], p, atol=1e-12)
    # C2: second differences have no jumps above the dt-scale at the knots
    acc = np.diff(pos, 2, axis=0) / dt**2
    jerk = np.abs(np.diff(acc, axis=0)).max(axis=1)
    assert jerk.max() <= np.abs(acc).max() * 1e-1


def test_spline_duplicate_times_rejected():
    with pytest.raises(ValueError, match="increasing"):
        cubic_spline_position([(0.0, (0, 0, 0)), (0.0, (1, 1, 1))], 0.1)


def test_slerp_endpoints():
    qa = np.array([1.0, 0.0, 0.0, 0.0])
    qb = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])
    np.testing.assert_allclose(quaternion_interp(qa, qb, 0.0), qa, atol=1e-15)
    np.testing.assert_allclose(quaternion_interp(qa, qb, 1.0), qb, atol=1e-12)


def test_slerp_antipodal_sign():
    qa = np.array([1.0, 0.0, 0.0, 0.0])
    qb = np.array([math.cos(0.4), 0.0, math.sin(0.4), 0.0])
    direct = quaternion_interp(qa, qb, 0.3)
    flipped = quaternion_interp(qa, -qb, 0.3)
    np.testing.assert_allclose(direct, flipped, atol=1e-12)


def test_slerp_bisects_z_rotation():
    qa = np.array([1.0, 0.0, 0.0, 0.0])
    qb = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])  # 90 deg about z
    mid = quaternion_interp(qa, qb, 0.5)
    expected = rotvec_to_matrix([0, 0, math.pi / 4])
    np.testing.assert_allclose(quat_to_matrix(mid), expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_slerp_unit_canonical(seed, s):
    rng = np.random.default_rng(seed)
    qa = rng.standard_normal(4)
    qb = rng.standard_normal(4)
    qa /= np.linalg.norm(qa)
    qb /= np.linalg.norm(qb)
    out = quaternion_interp(qa, qb, s)
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-12
    assert out[0] >= 0 or (out[0] == 0 and np.any(out[1:] > 0))


def test_singularity_scenario_endpoints(desk_model_large):
    traj = scenario_trajectory("singularity_pass", desk_model_large, 1e-3)
    assert traj.duration == pytest.approx(4.0)
    start = forward_kinematics(desk_model_large, SINGULARITY_START_CONFIG)
    end = forward_kinematics(desk_model_large, SINGULARITY_END_CONFIG)
    np.testing.assert_allclose(traj.poses[0].translation, start.translation, atol=1e-12)
    np.testing.assert_allclose(traj.poses[0].quaternion, start.quaternion, atol=1e-12)
    np.testing.assert_allclose(traj.poses[-1].translation, end.translation, atol=1e-9)
    np.testing.assert_allclose(traj.poses[-1].quaternion, end.quaternion, atol=1e-9)


def test_scenario_first_sample_matches_initial_config(desk_model):
    traj = scenario_trajectory("payload_pick_place", desk_model, 1e-3)
    q0 = scenario_initial_config("payload_pick_place", desk_model)
    pose0 = forward_kinematics(desk_model, q0)
    np.testing.assert_allclose(traj.poses[0].translation, pose0.translation, atol=1e-12)
    np.testing.assert_allclose(traj.poses[0].quaternion, pose0.quaternion, atol=1e-12)


def test_unknown_scenario(desk_model):
    with pytest.raises(KeyError):
        scenario_trajectory("nope", desk_model, 1e-3)


def test_all_samples_unit_canonical(desk_model):
    traj = scenario_trajectory("payload_pick_place", desk_model, 1e-2)
    for pose in traj.poses:
        assert abs(np.linalg.norm(pose.quaternion) - 1.0) <= 1e-9
        assert pose.quaternion[0] >= 0


def test_time_grid_alignment(desk_model):
    traj = scenario_trajectory("singularity_pass", desk_model, 1e-3)
    assert traj.n_samples == 4001
    assert traj.duration == pytest.approx(4.0)


def test_window_padding(desk_model):
    traj = scenario_trajectory("payload_pick_place", desk_model, 1e-2)
    items, includes_end = traj.window(traj.n_samples - 3, 10)
    assert includes_end
    assert len(items) == 11
    np.testing.assert_allclose(items[-1][0].translation, traj.poses[-1].translation)
    items2, includes_end2 = traj.window(0, 10)
    assert not includes_end2


def test_csv_roundtrip(tmp_path, desk_model):
    traj = scenario_trajectory("payload_pick_place", desk_model, 1e-2)
    path = tmp_path / "traj.csv"
    export_trajectory_csv(traj, path)
    back = import_trajectory_csv(path)
    assert back.n_samples == traj.n_samples
    assert back.dt == pytest.approx(traj.dt)
    for a, b in zip(traj.poses, back.poses):
        np.testing.assert_allclose(a.translation, b.translation, atol=1e-15)
        np.testing.assert_allclose(a.quaternion, b.quaternion, atol=1e-15)


def test_circle_scenario(planar_2dof):
    traj = scenario_trajectory("circle_2dof", planar_2dof, 1e-2)
    q0 = scenario_initial_config("circle_2dof", planar_2dof)
    center = forward_kinematics(planar_2dof, q0).translation
    np.testing.assert_allclose(traj.poses[0].translation, center, atol=1e-12)
    radii = [np.linalg.norm(p.translation - (center - [0.08, 0, 0])) for p in traj.poses]
    np.testing.assert_allclose(radii, 0.08, atol=1e-12)

from __future__ import annotations

import math

import numpy as np
import pytest

from egoworld.core.errors import DataError
from egoworld.core.kinematics import (
    ACTION_DIM, ATOMIC_LABELS, UPPER_BODY, AtomicThresholds, KinematicsEvents, NormalizationBounds, action_stats,
    arm_slots, balance_segments, compute_action, ensure_unit, euler_to_quat, extract_atomic_segments,
    fit_normalization_bounds, forward_kinematics, quat_multiply, quat_to_euler, raw_action, relative_rotation,
    to_pelvis_frame, to_rotation,
)
from egoworld.core.models import AtomicSegment, PoseFrame

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _pose(t: float, xyz, rots=None) -> PoseFrame:
    if rots is None:
        rots = np.tile(IDENTITY, (len(UPPER_BODY), 1))
    return PoseFrame(t, np.asarray(xyz, dtype=np.float64), np.asarray(rots, dtype=np.float64))


def _random_pose(rng, t: float, spread: float = 0.4) -> PoseFrame:
    return _pose(t, rng.normal(size=3), euler_to_quat(rng.uniform(-spread, spread, size=(len(UPPER_BODY), 3))))


def test_euler_round_trip(rng):
    euler = rng.uniform(-1.4, 1.4, size=(100, 3))
    back = quat_to_euler(euler_to_quat(euler))
    assert np.allclose(back, euler, atol=1e-9)


def test_gimbal_lock_zeroes_third_angle_and_keeps_rotation():
    q = euler_to_quat(np.array([0.3, math.pi / 2, 0.2]))
    events = KinematicsEvents()
    euler = quat_to_euler(q, events)
    assert events.gimbal_lock == 1
    assert euler[2] == 0.0
    assert np.allclose(to_rotation(euler_to_quat(euler)).as_matrix(), to_rotation(q).as_matrix(), atol=1e-6)


def test_non_unit_quaternion_is_renormalized_and_counted():
    events = KinematicsEvents()
    q = ensure_unit(np.array([[2.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]), events)
    assert events.renormalized == 1
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0)
    with pytest.raises(DataError):
        ensure_unit(np.zeros(4))


def test_relative_rotation_composes_back(rng):
    a = euler_to_quat(rng.uniform(-1, 1, size=3))
    b = euler_to_quat(rng.uniform(-1, 1, size=3))
    assert np.allclose(to_rotation(quat_multiply(a, relative_rotation(a, b))).as_matrix(),
                       to_rotation(b).as_matrix(), atol=1e-12)
    assert np.allclose(quat_to_euler(relative_rotation(a, a)), 0.0, atol=1e-12)


def test_pelvis_frame_makes_pelvis_identity(rng):
    local = to_pelvis_frame(_random_pose(rng, 0.0))
    assert np.allclose(to_rotation(local.joint_rotations[UPPER_BODY.root]).as_matrix(), np.eye(3), atol=1e-12)
    assert np.allclose(local.root_translation, 0.0)


def test_forward_kinematics_rest_pose_uses_offsets():
    pose = _pose(0.0, [1.0, 2.0, 1.0])
    positions = forward_kinematics(pose)
    assert positions.shape == (len(UPPER_BODY), 3)
    head = UPPER_BODY.index("Head")
    chain = 0
    j = head
    expected = np.zeros(3)
    while UPPER_BODY.parents[j] >= 0:
        expected += UPPER_BODY.offsets[j]
        j = UPPER_BODY.parents[j]
        chain += 1
    assert chain > 0
    assert np.allclose(positions[head], np.array([1.0, 2.0, 1.0]) + expected)


def test_action_layout_and_zero_motion(rng):
    p = _random_pose(rng, 0.0)
    still = _pose(0.25, p.root_translation, p.joint_rotations)
    raw = raw_action(p, still)
    assert raw.shape == (ACTION_DIM,)
    assert np.allclose(raw, 0.0, atol=1e-9)


def test_action_is_invariant_to_world_yaw_and_shift(rng):
    p0, p1 = _random_pose(rng, 0.0), _random_pose(rng, 0.25)
    yaw = euler_to_quat(np.array([1.1, 0.0, 0.0]))
    shift = np.array([3.0, -2.0, 0.0])

    def moved(p: PoseFrame) -> PoseFrame:
        return _pose(p.timestamp, to_rotation(yaw).apply(p.root_translation) + shift,
                     quat_multiply(yaw[None, :], p.joint_rotations))

    assert np.allclose(raw_action(p0, p1), raw_action(moved(p0), moved(p1)), atol=1e-9)


def test_compute_action_carries_timeskip_and_rejects_reversed_time(rng):
    p0, p1 = _random_pose(rng, 1.0), _random_pose(rng, 1.5)
    action = compute_action(p0, p1, NormalizationBounds.fixed())
    assert action.timeskip == pytest.approx(0.5)
    assert np.all(np.abs(action.values) <= 1.0)
    with pytest.raises(DataError):
        compute_action(p1, p0, NormalizationBounds.fixed())


def test_normalization_round_trip_and_clamping(rng):
    bounds = NormalizationBounds.fixed(translation_extent=0.5)
    raw = rng.uniform(-0.4, 0.4, size=ACTION_DIM)
    assert np.allclose(bounds.denormalize(bounds.normalize(raw)), raw, atol=1e-12)

    events = KinematicsEvents()
    wild = raw.copy()
    wild[0] = 5.0
    wild[1] = -5.0
    out = bounds.normalize(wild, events)
    assert out[0] == 1.0 and out[1] == -1.0
    assert events.clamped == 2


def test_rotations_pass_through_when_unscaled(rng):
    bounds = NormalizationBounds.fixed(scale_rotations=False)
    raw = rng.uniform(-1.0, 1.0, size=ACTION_DIM)
    out = bounds.normalize(raw)
    assert np.allclose(out[3:], raw[3:])


def test_fit_bounds_uses_translation_percentiles(rng):
    raw = np.zeros((1000, ACTION_DIM))
    raw[:, 0] = np.linspace(-1.0, 1.0, 1000)
    bounds = fit_normalization_bounds(raw)
    assert bounds.low[0] == pytest.approx(np.percentile(raw[:, 0], 1.0))
    assert bounds.high[0] == pytest.approx(np.percentile(raw[:, 0], 99.0))
    assert np.allclose(bounds.low[3:], -math.pi) and np.allclose(bounds.high[3:], math.pi)
    with pytest.raises(DataError):
        fit_normalization_bounds(np.zeros((0, ACTION_DIM)))


def test_bounds_reject_inverted_ranges():
    with pytest.raises(DataError):
        NormalizationBounds(low=np.ones(ACTION_DIM), high=np.zeros(ACTION_DIM))


def test_arm_slots_are_twelve_disjoint_rotation_indices():
    right, left = arm_slots("right"), arm_slots("left")
    assert len(right) == len(left) == 12
    assert not set(right) & set(left)
    assert min(right.min(), left.min()) >= 3
    with pytest.raises(DataError):
        arm_slots("tail")


def test_action_stats_mean_and_variance(rng):
    rows = rng.normal(size=(50, ACTION_DIM))
    stats = action_stats(rows)
    assert stats.count == 50
    assert np.allclose(stats.mean, rows.mean(axis=0))
    assert np.allclose(stats.variance, rows.var(axis=0))
    mean, var = stats.arm("left")
    assert mean.shape == var.shape == (12,)
    with pytest.raises(DataError):
        action_stats([])


def _walk(frames: int, step: float = 0.3):
    return [_pose(i * 0.25, [i * step, 0.0, 1.0]) for i in range(frames)]


def test_forward_walk_is_segmented_greedily():
    segs = extract_atomic_segments(_walk(12), AtomicThresholds(), window=4)
    assert [s.label for s in segs] == ["forward"] * 3
    assert [(s.start_index, s.end_index) for s in segs] == [(0, 3), (4, 7), (8, 11)]
    assert all(s.magnitude == pytest.approx(0.9) for s in segs)


def test_turning_in_place_is_rotate_left():
    yaw = [euler_to_quat(np.array([0.2 * i, 0.0, 0.0])) for i in range(6)]
    traj = [_pose(i * 0.25, [0.0, 0.0, 1.0], np.tile(yaw[i], (len(UPPER_BODY), 1))) for i in range(6)]
    segs = extract_atomic_segments(traj, AtomicThresholds(), window=3)
    assert segs and all(s.label == "rotate_left" for s in segs)


def test_standing_still_has_no_segments_and_short_input_fails():
    assert extract_atomic_segments(_walk(8, step=0.0), AtomicThresholds(), window=4) == []
    assert extract_atomic_segments([], AtomicThresholds(), window=4) == []
    with pytest.raises(DataError):
        extract_atomic_segments(_walk(3), AtomicThresholds(), window=4)


def test_balance_segments_caps_each_label_reproducibly():
    segs = [(i, AtomicSegment("forward", i, i + 3, 0.9)) for i in range(10)]
    segs += [(i, AtomicSegment("rhand_up", i, i + 3, 0.2)) for i in range(2)]
    a = balance_segments(segs, cap=4, seed=1)
    b = balance_segments(segs, cap=4, seed=1)
    assert a == b
    labels = [s.label for _, s in a]
    assert labels.count("forward") == 4 and labels.count("rhand_up") == 2
    assert set(labels) <= set(ATOMIC_LABELS)

from __future__ import annotations

import numpy as np
import pytest

from egoworld.core.config import DataConfig
from egoworld.core.errors import DataError
from egoworld.core.formats import DatasetReader
from egoworld.core.kinematics import UPPER_BODY, raw_action
from egoworld.core.synthworld import (
    ARENA_BOUNDS, BODY_MARGIN, ScriptedPolicy, generate_dataset, generate_scene, render_frame, rest_body_state,
    sample_trajectory, step_body,
)


def test_scene_is_deterministic_and_inside_arena():
    a, b = generate_scene(3), generate_scene(3)
    assert a.layout_key() == b.layout_key()
    assert a.layout_key() != generate_scene(4).layout_key()
    assert 8 <= len(a.obstacles) <= 32
    for ob in a.obstacles:
        assert abs(ob.center[0]) + 0.5 * ob.size[0] <= ARENA_BOUNDS + 1e-9
        assert abs(ob.center[1]) + 0.5 * ob.size[1] <= ARENA_BOUNDS + 1e-9
    with pytest.raises(DataError):
        generate_scene(0, obstacles_min=5, obstacles_max=2)


def test_step_body_inverts_raw_action(rng):
    state = rest_body_state((1.0, -1.0), heading=0.4)
    action = np.zeros(3 + 3 * len(UPPER_BODY))
    action[:3] = [0.2, 0.05, 0.0]
    action[3:] = rng.uniform(-0.2, 0.2, size=3 * len(UPPER_BODY))
    nxt = step_body(state, action, 0.25)
    assert nxt.pose.timestamp == pytest.approx(0.25)
    assert np.allclose(raw_action(state.pose, nxt.pose), action, atol=1e-8)


def test_step_body_clamps_at_arena_edge():
    state = rest_body_state((ARENA_BOUNDS - BODY_MARGIN - 0.05, 0.0), heading=0.0)
    action = np.zeros(3 + 3 * len(UPPER_BODY))
    action[0] = 1.0
    nxt = step_body(state, action, 0.25)
    assert nxt.collided
    assert nxt.pose.root_translation[0] == pytest.approx(ARENA_BOUNDS - BODY_MARGIN)
    with pytest.raises(DataError):
        step_body(state, action, 0.0)


def test_render_frame_shape_and_view_dependence():
    scene = generate_scene(1)
    a = render_frame(scene, rest_body_state((0.0, 0.0), heading=0.0), resolution=32)
    b = render_frame(scene, rest_body_state((0.0, 0.0), heading=2.0), resolution=32)
    assert a.shape == (32, 32, 3) and a.dtype == np.uint8
    assert not np.array_equal(a, b)
    assert np.array_equal(a, render_frame(scene, rest_body_state((0.0, 0.0), heading=0.0), resolution=32))


def test_sample_trajectory_timestamps_and_policy_modes():
    scene = generate_scene(2)
    frames, poses = sample_trajectory(scene, ScriptedPolicy(seed=2), n_frames=12, fps=4.0, resolution=16)
    assert len(frames) == len(poses) == 12
    assert [p.timestamp for p in poses] == pytest.approx([i / 4.0 for i in range(12)])
    for p in poses:
        assert np.all(np.abs(p.root_translation[:2]) <= ARENA_BOUNDS - BODY_MARGIN + 1e-5)
    with pytest.raises(DataError):
        sample_trajectory(scene, ScriptedPolicy(seed=2), n_frames=1, fps=4.0)


def test_scripted_policy_is_reproducible():
    state = rest_body_state()
    p1, p2 = ScriptedPolicy(seed=9), ScriptedPolicy(seed=9)
    for _ in range(20):
        a1, a2 = p1.act(state, 0.25), p2.act(state, 0.25)
        assert np.array_equal(a1, a2)
        state = step_body(state, a1, 0.25)


def test_generated_dataset_is_deterministic(tiny_dataset, tiny_cfg):
    reader = DatasetReader(tiny_dataset)
    assert len(reader) == tiny_cfg.data.trajectories
    assert reader.info.resolution == 8
    assert all(reader.num_frames(i) == tiny_cfg.data.frames for i in range(len(reader)))
    again, _ = generate_dataset(tiny_cfg.data)
    assert np.array_equal(again[1].frames, reader[1].frames)
    assert np.allclose(again[1].poses[-1].joint_rotations, reader[1].poses[-1].joint_rotations)


def test_generate_dataset_rejects_empty():
    with pytest.raises(DataError):
        generate_dataset(DataConfig(trajectories=0))

from __future__ import annotations

import hashlib

import numpy as np
import pytest

from egoworld.core.errors import FormatError
from egoworld.core.formats import (
    DatasetReader, read_dataset, read_pose_file, split_indices, write_dataset, write_pose_file,
)
from egoworld.core.kinematics import euler_to_quat
from egoworld.core.models import PoseFrame, Trajectory


def _poses(rng, n: int, joints: int = 15):
    return [PoseFrame(i * 0.25, rng.normal(size=3), euler_to_quat(rng.uniform(-1, 1, size=(joints, 3)))).as_float32()
            for i in range(n)]


def _trajectory(rng, traj_id: int, n: int = 5, res: int = 8) -> Trajectory:
    frames = rng.integers(0, 256, size=(n, res, res, 3), dtype=np.uint8)
    return Trajectory(traj_id=traj_id, fps=4.0, frames=frames, poses=_poses(rng, n))


def test_pose_file_round_trip(tmp_path, rng):
    poses = _poses(rng, 7)
    path = tmp_path / "walk.pose"
    write_pose_file(poses, path)
    back = read_pose_file(path)
    assert len(back) == 7
    for a, b in zip(poses, back):
        assert a.timestamp == b.timestamp
        assert np.array_equal(a.root_translation, b.root_translation)
        assert np.array_equal(a.joint_rotations, b.joint_rotations)


def test_pose_file_rejects_bad_magic_truncation_and_trailing_bytes(tmp_path, rng):
    path = tmp_path / "walk.pose"
    write_pose_file(_poses(rng, 3), path)
    data = path.read_bytes()

    (tmp_path / "magic.pose").write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError, match="magic"):
        read_pose_file(tmp_path / "magic.pose")

    (tmp_path / "short.pose").write_bytes(data[:-5])
    with pytest.raises(FormatError, match="truncated"):
        read_pose_file(tmp_path / "short.pose")

    (tmp_path / "long.pose").write_bytes(data + b"\0")
    with pytest.raises(FormatError, match="Trailing"):
        read_pose_file(tmp_path / "long.pose")


def test_pose_timestamps_must_increase(tmp_path, rng):
    poses = _poses(rng, 3)
    poses[2] = PoseFrame(0.0, poses[2].root_translation, poses[2].joint_rotations)
    with pytest.raises(FormatError):
        write_pose_file(poses, tmp_path / "bad.pose")


def test_dataset_round_trip_and_checksum(tmp_path, rng):
    trajectories = [_trajectory(rng, 10), _trajectory(rng, 11, n=3)]
    path = tmp_path / "data.bin"
    checksum = write_dataset(trajectories, path, seed=7)
    assert checksum == hashlib.sha256(path.read_bytes()).hexdigest()

    reader = DatasetReader(path)
    assert len(reader) == 2
    assert reader.info.resolution == 8 and reader.info.seed == 7 and reader.info.fps == 4.0
    assert reader.traj_ids() == [10, 11]
    assert reader.num_frames(1) == 3
    assert reader.checksum() == checksum
    back = read_dataset(path)
    for a, b in zip(trajectories, back):
        assert a.traj_id == b.traj_id
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.poses[-1].joint_rotations, b.poses[-1].joint_rotations)
    with pytest.raises(IndexError):
        reader[2]


def test_dataset_reader_detects_truncation(tmp_path, rng):
    path = tmp_path / "data.bin"
    write_dataset([_trajectory(rng, 0)], path)
    cut = tmp_path / "cut.bin"
    cut.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="truncated"):
        DatasetReader(cut)


def test_dataset_writer_validates_frames(tmp_path, rng):
    bad = _trajectory(rng, 0)
    bad.frames = bad.frames[:-1]
    with pytest.raises(FormatError):
        write_dataset([bad], tmp_path / "x.bin")
    with pytest.raises(FormatError):
        write_dataset([], tmp_path / "y.bin")


def test_split_is_stable_and_disjoint():
    ids = list(range(100))
    train, held = split_indices(ids, 0.8)
    assert (train, held) == split_indices(ids, 0.8)
    assert sorted(train + held) == ids
    assert 60 <= len(train) <= 95
    assert split_indices(range(6), 0.8) == ([0, 1, 3, 4], [2, 5])

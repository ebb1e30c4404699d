"""EgoWorld core: binary pose and dataset files, atomic writes.

All layouts are little-endian and described with numpy structured dtypes.

Pose file ("PEVAPOSE"): header (magic, version u32, joints u32, frames u64), then per frame
f64 timestamp, 3 x f32 translation, joints x 4 x f32 quaternions (w, x, y, z).

Dataset file ("PEVADATA"): header (magic, version, resolution, fps, joints, count, seed),
u64 offset table with count + 1 entries (the last one is the file end), then per trajectory
a record header (id u64, frames u64), the raw RGB frame block and an embedded pose file.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError
from .models import PoseFrame, Trajectory

POSE_MAGIC = b"PEVAPOSE"
DATASET_MAGIC = b"PEVADATA"
POSE_VERSION = 1
DATASET_VERSION = 1

POSE_HEADER = np.dtype([("magic", "S8"), ("version", "<u4"), ("joints", "<u4"), ("frames", "<u8")])
DATASET_HEADER = np.dtype([
    ("magic", "S8"), ("version", "<u4"), ("resolution", "<u4"), ("fps", "<f8"),
    ("joints", "<u4"), ("count", "<u8"), ("seed", "<u8"),
])
RECORD_HEADER = np.dtype([("traj_id", "<u8"), ("frames", "<u8")])

PathLike = Union[str, Path]


def pose_record_dtype(joints: int) -> np.dtype:
    return np.dtype([("timestamp", "<f8"), ("translation", "<f4", (3,)), ("rotations", "<f4", (joints, 4))])


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write to a sibling temp file then replace, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".egoworld_tmp_{os.getpid()}_{int(time.time() * 1000)}")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(str(tmp), str(path))
    finally:
        if tmp.exists():
            tmp.unlink()


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


# ---------------- Pose files ----------------

def encode_poses(poses: Sequence[PoseFrame]) -> bytes:
    joints = poses[0].num_joints if poses else 0
    header = np.zeros(1, dtype=POSE_HEADER)
    header[0] = (POSE_MAGIC, POSE_VERSION, joints, len(poses))
    records = np.zeros(len(poses), dtype=pose_record_dtype(joints))
    prev = -np.inf
    for i, p in enumerate(poses):
        if p.num_joints != joints:
            raise FormatError(f"Pose {i} has {p.num_joints} joints, expected {joints}.")
        if not p.timestamp > prev:
            raise FormatError(f"Pose timestamps must be strictly increasing (frame {i}).")
        prev = p.timestamp
        records[i] = (p.timestamp, p.root_translation, p.joint_rotations)
    return header.tobytes() + records.tobytes()


def decode_poses(buf: Union[bytes, memoryview, np.ndarray], offset: int = 0) -> Tuple[List[PoseFrame], int]:
    """Parse a pose block starting at `offset`; returns the poses and the end offset."""
    raw = np.frombuffer(buf, dtype=np.uint8)
    if raw.size < offset + POSE_HEADER.itemsize:
        raise FormatError("Pose block truncated in header.")
    header = raw[offset:offset + POSE_HEADER.itemsize].view(POSE_HEADER)[0]
    if bytes(header["magic"]) != POSE_MAGIC:
        raise FormatError(f"Bad pose magic {bytes(header['magic'])!r}.")
    if int(header["version"]) != POSE_VERSION:
        raise FormatError(f"Unsupported pose file version {int(header['version'])}.")
    dtype = pose_record_dtype(int(header["joints"]))
    start = offset + POSE_HEADER.itemsize
    end = start + dtype.itemsize * int(header["frames"])
    if raw.size < end:
        raise FormatError("Pose block truncated in frame records.")
    records = raw[start:end].view(dtype)
    poses = [
        PoseFrame(
            timestamp=float(r["timestamp"]),
            root_translation=r["translation"].astype(np.float64),
            joint_rotations=r["rotations"].astype(np.float64),
        )
        for r in records
    ]
    return poses, end


def write_pose_file(poses: Sequence[PoseFrame], path: PathLike) -> None:
    atomic_write_bytes(Path(path), encode_poses(poses))


def read_pose_file(path: PathLike) -> List[PoseFrame]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read pose file: {e}") from e
    poses, end = decode_poses(data)
    if end != len(data):
        raise FormatError(f"Trailing bytes after pose records ({len(data) - end}).")
    return poses


# ---------------- Dataset files ----------------

@dataclass(frozen=True)
class DatasetInfo:
    resolution: int
    fps: float
    joints: int
    count: int
    seed: int


def write_dataset(trajectories: Sequence[Trajectory], path: PathLike, seed: int = 0) -> str:
    """Write trajectories atomically; returns the SHA-256 of the written bytes."""
    if not trajectories:
        raise FormatError("Refusing to write an empty dataset.")
    res = int(trajectories[0].frames.shape[1])
    fps = float(trajectories[0].fps)
    joints = trajectories[0].poses[0].num_joints
    blocks: List[bytes] = []
    for t in trajectories:
        if t.frames.shape[1:] != (res, res, 3) or t.frames.dtype != np.uint8:
            raise FormatError(f"Trajectory {t.traj_id} frames must be uint8 ({res}, {res}, 3).")
        if len(t.frames) != len(t.poses):
            raise FormatError(f"Trajectory {t.traj_id} has {len(t.frames)} frames but {len(t.poses)} poses.")
        rec = np.zeros(1, dtype=RECORD_HEADER)
        rec[0] = (t.traj_id, len(t.poses))
        blocks.append(rec.tobytes() + np.ascontiguousarray(t.frames).tobytes() + encode_poses(t.poses))

    header = np.zeros(1, dtype=DATASET_HEADER)
    header[0] = (DATASET_MAGIC, DATASET_VERSION, res, fps, joints, len(trajectories), seed)
    table_size = 8 * (len(blocks) + 1)
    offsets = np.zeros(len(blocks) + 1, dtype="<u8")
    cursor = DATASET_HEADER.itemsize + table_size
    for i, b in enumerate(blocks):
        offsets[i] = cursor
        cursor += len(b)
    offsets[-1] = cursor
    data = header.tobytes() + offsets.tobytes() + b"".join(blocks)
    atomic_write_bytes(Path(path), data)
    return hashlib.sha256(data).hexdigest()


class DatasetReader:
    """Memory-mapped dataset with O(1) trajectory access through the offset table."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            self._raw = np.memmap(self.path, dtype=np.uint8, mode="r")
        except (OSError, ValueError) as e:
            raise FormatError(f"Cannot open dataset {self.path}: {e}") from e
        if self._raw.size < DATASET_HEADER.itemsize:
            raise FormatError("Dataset truncated in header.")
        header = np.frombuffer(self._raw[:DATASET_HEADER.itemsize].tobytes(), dtype=DATASET_HEADER)[0]
        if bytes(header["magic"]) != DATASET_MAGIC:
            raise FormatError(f"Bad dataset magic {bytes(header['magic'])!r}.")
        if int(header["version"]) != DATASET_VERSION:
            raise FormatError(f"Unsupported dataset version {int(header['version'])}.")
        self.info = DatasetInfo(
            resolution=int(header["resolution"]), fps=float(header["fps"]), joints=int(header["joints"]),
            count=int(header["count"]), seed=int(header["seed"]),
        )
        table_end = DATASET_HEADER.itemsize + 8 * (self.info.count + 1)
        if self._raw.size < table_end:
            raise FormatError("Dataset truncated in offset table.")
        self._offsets = np.frombuffer(self._raw[DATASET_HEADER.itemsize:table_end].tobytes(), dtype="<u8")
        if int(self._offsets[-1]) != self._raw.size:
            raise FormatError(
                f"Dataset size {self._raw.size} does not match offset table end {int(self._offsets[-1])} (truncated?)."
            )

    def __getstate__(self) -> Dict[str, str]:
        return {"path": str(self.path)}

    def __setstate__(self, state: Dict[str, str]) -> None:
        self.__init__(state["path"])

    def __len__(self) -> int:
        return self.info.count

    def traj_id(self, index: int) -> int:
        start = int(self._offsets[index])
        return int(np.asarray(self._raw[start:start + RECORD_HEADER.itemsize]).view(RECORD_HEADER)[0]["traj_id"])

    def traj_ids(self) -> List[int]:
        return [self.traj_id(i) for i in range(len(self))]

    def num_frames(self, index: int) -> int:
        start = int(self._offsets[index])
        return int(np.asarray(self._raw[start:start + RECORD_HEADER.itemsize]).view(RECORD_HEADER)[0]["frames"])

    def __getitem__(self, index: int) -> Trajectory:
        if not 0 <= index < self.info.count:
            raise IndexError(index)
        start, end = int(self._offsets[index]), int(self._offsets[index + 1])
        block = np.asarray(self._raw[start:end])
        rec = block[:RECORD_HEADER.itemsize].view(RECORD_HEADER)[0]
        n = int(rec["frames"])
        res = self.info.resolution
        frame_bytes = n * res * res * 3
        body = RECORD_HEADER.itemsize
        if block.size < body + frame_bytes:
            raise FormatError(f"Trajectory {index} frame block truncated.")
        frames = block[body:body + frame_bytes].reshape(n, res, res, 3).copy()
        poses, _ = decode_poses(block, body + frame_bytes)
        if len(poses) != n:
            raise FormatError(f"Trajectory {index} pose count {len(poses)} != frame count {n}.")
        return Trajectory(traj_id=int(rec["traj_id"]), fps=self.info.fps, frames=frames, poses=poses)

    def __iter__(self) -> Iterator[Trajectory]:
        for i in range(len(self)):
            yield self[i]

    def checksum(self) -> str:
        return hashlib.sha256(self._raw.tobytes()).hexdigest()


def read_dataset(path: PathLike) -> List[Trajectory]:
    return list(DatasetReader(path))


def split_indices(traj_ids: Iterable[int], train_fraction: float = 0.8) -> Tuple[List[int], List[int]]:
    """Trajectory-level train/eval split by a stable hash of the trajectory id."""
    train: List[int] = []
    held: List[int] = []
    for i, tid in enumerate(traj_ids):
        h = int.from_bytes(hashlib.sha1(str(int(tid)).encode("ascii")).digest()[:8], "little")
        (train if (h / 2.0 ** 64) < train_fraction else held).append(i)
    return train, held

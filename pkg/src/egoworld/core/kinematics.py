"""EgoWorld core: structured whole-body actions from pose trajectories.

World frame is right-handed with Z up; the body faces +X with +Y to its left.
Euler angles use the intrinsic Z-X-Y convention everywhere (yaw first).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from .errors import DataError
from .models import ActionVector, AtomicSegment, PoseFrame, emit_log

EULER_ORDER = "ZXY"
ACTION_DIM = 48
TRANSLATION_DIMS = slice(0, 3)
ROTATION_DIMS = slice(3, ACTION_DIM)
UNIT_TOLERANCE = 1e-6
GIMBAL_TOLERANCE = 1e-7

ATOMIC_LABELS = (
    "forward", "rotate_left", "rotate_right",
    "lhand_left", "lhand_right", "lhand_up", "lhand_down",
    "rhand_left", "rhand_right", "rhand_up", "rhand_down",
)

_log = "egoworld.kinematics"


@dataclass(frozen=True)
class KinematicTree:
    joints: Tuple[Tuple[str, int], ...]  # (name, parent index), topological order
    offsets: np.ndarray  # (J, 3) rest offset from the parent, parent-frame meters
    root: int = 0

    def __post_init__(self) -> None:
        if len(self.joints) != len(JOINT_NAMES):
            raise ValueError(f"Kinematic tree needs {len(JOINT_NAMES)} joints, got {len(self.joints)}.")
        for idx, (name, parent) in enumerate(self.joints):
            if idx == self.root:
                if parent != -1:
                    raise ValueError("Root joint must not have a parent.")
            elif not 0 <= parent < idx:
                raise ValueError(f"Joint {name} breaks topological order (parent {parent}).")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(n for n, _ in self.joints)

    @property
    def parents(self) -> Tuple[int, ...]:
        return tuple(p for _, p in self.joints)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def __len__(self) -> int:
        return len(self.joints)


JOINT_NAMES = (
    "Pelvis", "L5", "L3", "T12", "T8", "Neck", "Head",
    "RightShoulder", "RightUpperArm", "RightForearm", "RightHand",
    "LeftShoulder", "LeftUpperArm", "LeftForearm", "LeftHand",
)
_PARENTS = (-1, 0, 1, 2, 3, 4, 5, 4, 7, 8, 9, 4, 11, 12, 13)
_REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],
    [0.00, 0.00, 0.10], [0.00, 0.00, 0.10], [0.00, 0.00, 0.10], [0.00, 0.00, 0.10],
    [0.00, 0.00, 0.15], [0.00, 0.00, 0.12],
    [0.00, -0.08, 0.10], [0.00, -0.12, 0.00], [0.00, 0.00, -0.28], [0.00, 0.00, -0.25],
    [0.00, 0.08, 0.10], [0.00, 0.12, 0.00], [0.00, 0.00, -0.28], [0.00, 0.00, -0.25],
])

UPPER_BODY = KinematicTree(joints=tuple(zip(JOINT_NAMES, _PARENTS)), offsets=_REST_OFFSETS)

ARM_JOINTS = {
    "right": ("RightShoulder", "RightUpperArm", "RightForearm", "RightHand"),
    "left": ("LeftShoulder", "LeftUpperArm", "LeftForearm", "LeftHand"),
}


def joint_slots(joint: int) -> slice:
    start = 3 + 3 * joint
    return slice(start, start + 3)


def arm_slots(arm: str, tree: KinematicTree = UPPER_BODY) -> np.ndarray:
    """Action indices of the 12-D arm block: shoulder, upper arm, forearm, hand x (phi, theta, psi)."""
    if arm not in ARM_JOINTS:
        raise DataError(f"Unknown arm '{arm}'.")
    idx: List[int] = []
    for name in ARM_JOINTS[arm]:
        s = joint_slots(tree.index(name))
        idx.extend(range(s.start, s.stop))
    return np.asarray(idx, dtype=np.int64)


@dataclass
class KinematicsEvents:
    """Counters for repairs applied while converting poses."""

    renormalized: int = 0
    gimbal_lock: int = 0
    clamped: int = 0

    def merge(self, other: "KinematicsEvents") -> None:
        self.renormalized += other.renormalized
        self.gimbal_lock += other.gimbal_lock
        self.clamped += other.clamped


# ---------------- Quaternion algebra ----------------

def ensure_unit(q: np.ndarray, events: Optional[KinematicsEvents] = None) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(q)):
        raise DataError("Quaternion with zero norm or non-finite components.")
    bad = np.abs(norms[..., 0] - 1.0) > UNIT_TOLERANCE
    if np.any(bad):
        n_bad = int(np.count_nonzero(bad))
        if events is not None:
            events.renormalized += n_bad
        emit_log(_log, "WARN", "Renormalized non-unit quaternion(s).", count=n_bad)
        q = q / norms
    return q


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.asarray(q) * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a (x) b for (..., 4) arrays in (w, x, y, z) order."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def to_rotation(q: np.ndarray) -> Rotation:
    q = np.asarray(q, dtype=np.float64)
    return Rotation.from_quat(q[..., [1, 2, 3, 0]])


def from_rotation(r: Rotation) -> np.ndarray:
    xyzw = r.as_quat()
    return xyzw[..., [3, 0, 1, 2]]


def quat_to_euler(q: np.ndarray, events: Optional[KinematicsEvents] = None) -> np.ndarray:
    """Intrinsic Z-X-Y Euler angles (radians) of unit quaternion(s) q.

    In the gimbal-lock region (|cos theta| < 1e-7) the third angle is set to 0 and the
    whole rotation is carried by the first angle.
    """
    q = ensure_unit(q, events)
    rot = to_rotation(q)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        euler = np.asarray(rot.as_euler(EULER_ORDER), dtype=np.float64)
    m = rot.as_matrix()
    locked = np.abs(np.sqrt(np.clip(1.0 - m[..., 2, 1] ** 2, 0.0, None))) < GIMBAL_TOLERANCE
    if np.any(locked):
        n_locked = int(np.count_nonzero(locked))
        if events is not None:
            events.gimbal_lock += n_locked
        emit_log(_log, "WARN", "Gimbal lock in Euler decomposition; third angle zeroed.", count=n_locked)
        euler = np.array(euler, copy=True)
        euler[locked, 0] = np.arctan2(m[locked, 1, 0], m[locked, 0, 0])
        euler[locked, 1] = np.arcsin(np.clip(m[locked, 2, 1], -1.0, 1.0))
        euler[locked, 2] = 0.0
    return euler


def euler_to_quat(euler: np.ndarray) -> np.ndarray:
    return from_rotation(Rotation.from_euler(EULER_ORDER, np.asarray(euler, dtype=np.float64)))


def relative_rotation(q_prev: np.ndarray, q_next: np.ndarray,
                      events: Optional[KinematicsEvents] = None) -> np.ndarray:
    """conj(q_prev) (x) q_next, so that q_prev (x) result == q_next."""
    q_prev = ensure_unit(q_prev, events)
    q_next = ensure_unit(q_next, events)
    return quat_multiply(quat_conjugate(q_prev), q_next)


# ---------------- Frames ----------------

def forward_kinematics(pose: PoseFrame, tree: KinematicTree = UPPER_BODY) -> np.ndarray:
    """World joint positions (J, 3) from world joint orientations and rest offsets."""
    rots = ensure_unit(pose.joint_rotations)
    positions = np.zeros((len(tree), 3))
    positions[tree.root] = pose.root_translation
    for j, parent in enumerate(tree.parents):
        if parent < 0:
            continue
        positions[j] = positions[parent] + to_rotation(rots[parent]).apply(tree.offsets[j])
    return positions


def to_pelvis_frame(pose: PoseFrame, tree: KinematicTree = UPPER_BODY,
                    events: Optional[KinematicsEvents] = None) -> PoseFrame:
    """Re-express every joint orientation relative to the pelvis; root translation becomes 0."""
    rots = ensure_unit(pose.joint_rotations, events)
    pelvis = rots[tree.root]
    local = quat_multiply(quat_conjugate(pelvis)[None, :], rots)
    return PoseFrame(timestamp=pose.timestamp, root_translation=np.zeros(3), joint_rotations=local)


def pelvis_local_positions(pose: PoseFrame, tree: KinematicTree = UPPER_BODY) -> np.ndarray:
    world = forward_kinematics(pose, tree)
    pelvis = to_rotation(ensure_unit(pose.joint_rotations[tree.root]))
    return pelvis.inv().apply(world - pose.root_translation)


# ---------------- Actions ----------------

def relative_rotations(pose_t: PoseFrame, pose_next: PoseFrame, tree: KinematicTree = UPPER_BODY,
                       events: Optional[KinematicsEvents] = None) -> np.ndarray:
    """Per-joint delta quaternions (J, 4) before the Euler conversion.

    The pelvis delta is taken on world orientations (heading change); every other joint
    is compared in its pelvis-local orientation.
    """
    local_t = to_pelvis_frame(pose_t, tree, events).joint_rotations
    local_n = to_pelvis_frame(pose_next, tree, events).joint_rotations
    deltas = relative_rotation(local_t, local_n)
    root = tree.root
    deltas[root] = relative_rotation(pose_t.joint_rotations[root], pose_next.joint_rotations[root], events)
    return deltas


def raw_action(pose_t: PoseFrame, pose_next: PoseFrame, tree: KinematicTree = UPPER_BODY,
               events: Optional[KinematicsEvents] = None) -> np.ndarray:
    """Unnormalized 48-vector: pelvis-frame translation delta + per-joint Euler deltas."""
    pelvis = to_rotation(ensure_unit(pose_t.joint_rotations[tree.root], events))
    delta = np.asarray(pose_next.root_translation, dtype=np.float64) - np.asarray(pose_t.root_translation)
    out = np.empty(ACTION_DIM)
    out[TRANSLATION_DIMS] = pelvis.inv().apply(delta)
    out[ROTATION_DIMS] = quat_to_euler(relative_rotations(pose_t, pose_next, tree, events), events).reshape(-1)
    return out


@dataclass(frozen=True)
class NormalizationBounds:
    low: np.ndarray  # (48,)
    high: np.ndarray  # (48,)
    scale_rotations: bool = True  # rotations mapped from [-pi, pi] onto [-1, 1]

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.low)) and np.all(np.isfinite(self.high))):
            raise DataError("Normalization bounds must be finite.")
        if np.any(self.high < self.low):
            raise DataError("Normalization bounds need max >= min per dimension.")

    @classmethod
    def fixed(cls, translation_extent: float = 1.0, scale_rotations: bool = True) -> "NormalizationBounds":
        low = np.full(ACTION_DIM, -math.pi)
        high = np.full(ACTION_DIM, math.pi)
        low[TRANSLATION_DIMS] = -translation_extent
        high[TRANSLATION_DIMS] = translation_extent
        return cls(low=low, high=high, scale_rotations=scale_rotations)

    def _affine_mask(self) -> np.ndarray:
        mask = np.zeros(ACTION_DIM, dtype=bool)
        mask[TRANSLATION_DIMS] = True
        if self.scale_rotations:
            mask[ROTATION_DIMS] = True
        return mask

    def normalize(self, raw: np.ndarray, events: Optional[KinematicsEvents] = None) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != ACTION_DIM:
            raise DataError(f"Action must have {ACTION_DIM} components, got {raw.shape[-1]}.")
        clipped = np.clip(raw, self.low, self.high)
        n_clamped = int(np.count_nonzero(clipped != raw))
        if n_clamped:
            if events is not None:
                events.clamped += n_clamped
            emit_log(_log, "DEBUG", "Clamped out-of-range action components.", count=n_clamped)
        span = self.high - self.low
        degenerate = span <= 0
        scaled = 2.0 * (clipped - self.low) / np.where(degenerate, 1.0, span) - 1.0
        scaled = np.where(degenerate, 0.0, scaled)
        return np.where(self._affine_mask(), scaled, clipped)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        span = self.high - self.low
        raw = (values + 1.0) * 0.5 * span + self.low
        return np.where(self._affine_mask(), raw, values)

    def to_dict(self) -> Dict[str, object]:
        return {"low": self.low.tolist(), "high": self.high.tolist(), "scale_rotations": self.scale_rotations}

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "NormalizationBounds":
        return cls(low=np.asarray(d["low"], dtype=np.float64), high=np.asarray(d["high"], dtype=np.float64),
                   scale_rotations=bool(d.get("scale_rotations", True)))


def normalize_action(raw: np.ndarray, bounds: NormalizationBounds, timeskip: float = 0.0,
                     events: Optional[KinematicsEvents] = None) -> ActionVector:
    return ActionVector(values=bounds.normalize(raw, events), timeskip=float(timeskip))


def denormalize_action(action: ActionVector, bounds: NormalizationBounds) -> np.ndarray:
    return bounds.denormalize(action.values)


def fit_normalization_bounds(raw_actions: np.ndarray, scale_rotations: bool = True,
                             percentiles: Tuple[float, float] = (1.0, 99.0)) -> NormalizationBounds:
    """Translation bounds from robust percentiles of training actions; rotations fixed to [-pi, pi]."""
    raw_actions = np.asarray(raw_actions, dtype=np.float64)
    if raw_actions.ndim != 2 or raw_actions.shape[0] == 0:
        raise DataError("Need a nonempty (M, 48) array of raw actions to fit bounds.")
    bounds = NormalizationBounds.fixed(scale_rotations=scale_rotations)
    low = bounds.low.copy()
    high = bounds.high.copy()
    low[TRANSLATION_DIMS] = np.percentile(raw_actions[:, TRANSLATION_DIMS], percentiles[0], axis=0)
    high[TRANSLATION_DIMS] = np.percentile(raw_actions[:, TRANSLATION_DIMS], percentiles[1], axis=0)
    return NormalizationBounds(low=low, high=high, scale_rotations=scale_rotations)


def compute_action(pose_t: PoseFrame, pose_next: PoseFrame, bounds: NormalizationBounds,
                   tree: KinematicTree = UPPER_BODY, events: Optional[KinematicsEvents] = None) -> ActionVector:
    timeskip = float(pose_next.timestamp - pose_t.timestamp)
    if not timeskip > 0:
        raise DataError(f"Action needs increasing timestamps (timeskip {timeskip:.6f} s).")
    return normalize_action(raw_action(pose_t, pose_next, tree, events), bounds, timeskip, events)


# ---------------- Statistics ----------------

@dataclass
class ActionStats:
    mean: np.ndarray  # (48,)
    variance: np.ndarray  # (48,)
    count: int
    events: KinematicsEvents = field(default_factory=KinematicsEvents)

    def arm(self, arm: str) -> Tuple[np.ndarray, np.ndarray]:
        idx = arm_slots(arm)
        return self.mean[idx].copy(), self.variance[idx].copy()


def action_stats(actions: Iterable, events: Optional[KinematicsEvents] = None) -> ActionStats:
    rows = [a.values if isinstance(a, ActionVector) else np.asarray(a, dtype=np.float64) for a in actions]
    if not rows:
        raise DataError("action_stats needs a nonempty dataset.")
    data = np.stack(rows).astype(np.float64)
    return ActionStats(mean=data.mean(axis=0), variance=data.var(axis=0), count=int(data.shape[0]),
                       events=events or KinematicsEvents())


def _parse_triple(cell: str) -> np.ndarray:
    parts = [p for p in str(cell).strip().strip("()").split(",") if p.strip()]
    if len(parts) != 3:
        raise DataError(f"Expected an Euler triple, got '{cell}'.")
    return np.array([float(p) for p in parts])


def load_action_stats_table(path: str) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Parse a per-segment arm statistics table.

    CSV columns: segment, statistic (Mean | Variance), right_arm, left_arm; arm cells hold
    "(phi, theta, psi)" triples. Returns {arm: (mean12, variance12)} in shoulder,
    upper arm, forearm, hand order.
    """
    try:
        table = pd.read_csv(path, skipinitialspace=True, quotechar='"')
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"Cannot read action statistics table: {e}") from e
    segments = ("shoulder", "upper arm", "forearm", "hand")
    out: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for arm in ("right", "left"):
        column = f"{arm}_arm"
        if column not in table.columns:
            raise DataError(f"Statistics table lacks column '{column}'.")
        means, variances = [], []
        for seg in segments:
            rows = table[table["segment"].str.strip().str.lower() == seg]
            stat = rows.set_index(rows["statistic"].str.strip().str.lower())
            if "mean" not in stat.index or "variance" not in stat.index:
                raise DataError(f"Statistics table misses mean/variance rows for '{seg}'.")
            means.append(_parse_triple(stat.loc["mean", column]))
            variances.append(_parse_triple(stat.loc["variance", column]))
        out[arm] = (np.concatenate(means), np.concatenate(variances))
    return out


# ---------------- Atomic actions ----------------

@dataclass(frozen=True)
class AtomicThresholds:
    hand: float = 0.15
    forward: float = 0.5
    rotate: float = 0.35

    def for_label(self, label: str) -> float:
        if label == "forward":
            return self.forward
        if label.startswith("rotate"):
            return self.rotate
        return self.hand


def _window_deltas(p0: PoseFrame, p1: PoseFrame, local0: np.ndarray, local1: np.ndarray,
                   tree: KinematicTree) -> Dict[str, float]:
    pelvis0 = to_rotation(ensure_unit(p0.joint_rotations[tree.root]))
    disp = pelvis0.inv().apply(np.asarray(p1.root_translation) - np.asarray(p0.root_translation))
    yaw = float(quat_to_euler(relative_rotation(p0.joint_rotations[tree.root], p1.joint_rotations[tree.root]))[0])
    deltas = {"forward": float(disp[0]), "rotate_left": yaw, "rotate_right": -yaw}
    for prefix, name in (("lhand", "LeftHand"), ("rhand", "RightHand")):
        d = local1[tree.index(name)] - local0[tree.index(name)]
        deltas[f"{prefix}_left"] = float(d[1])
        deltas[f"{prefix}_right"] = float(-d[1])
        deltas[f"{prefix}_up"] = float(d[2])
        deltas[f"{prefix}_down"] = float(-d[2])
    return deltas


def extract_atomic_segments(traj: Sequence[PoseFrame], thresholds: AtomicThresholds, window: int,
                            tree: KinematicTree = UPPER_BODY) -> List[AtomicSegment]:
    """Label sliding windows by their dominant thresholded delta.

    A window [i, i + window - 1] is labeled with the motion whose delta is largest
    relative to its threshold, provided the delta reaches that threshold. Overlaps are
    resolved greedily by that relative magnitude, ties going to the earlier start.
    """
    if not traj:
        return []
    if window < 2:
        raise DataError("Atomic window must span at least 2 frames.")
    if len(traj) < window:
        raise DataError(f"Trajectory of {len(traj)} frames is shorter than the {window}-frame window.")

    local = [pelvis_local_positions(p, tree) for p in traj]
    detections: List[Tuple[float, int, AtomicSegment]] = []
    for start in range(0, len(traj) - window + 1):
        end = start + window - 1
        deltas = _window_deltas(traj[start], traj[end], local[start], local[end], tree)
        label = max(ATOMIC_LABELS, key=lambda lb: (deltas[lb] / thresholds.for_label(lb), -ATOMIC_LABELS.index(lb)))
        ratio = deltas[label] / thresholds.for_label(label)
        if ratio >= 1.0:
            detections.append((ratio, start, AtomicSegment(label=label, start_index=start, end_index=end,
                                                           magnitude=float(deltas[label]))))

    detections.sort(key=lambda d: (-d[0], d[1]))
    taken: List[AtomicSegment] = []
    for _, _, seg in detections:
        if all(seg.end_index < t.start_index or seg.start_index > t.end_index for t in taken):
            taken.append(seg)
    taken.sort(key=lambda s: (s.start_index, s.label))
    return taken


def balance_segments(segments: Sequence[Tuple[int, AtomicSegment]], cap: int, seed: int = 0
                     ) -> List[Tuple[int, AtomicSegment]]:
    """Keep at most `cap` (trajectory id, segment) pairs per label, chosen reproducibly."""
    rng = np.random.default_rng(seed)
    by_label: Dict[str, List[Tuple[int, AtomicSegment]]] = {}
    for item in segments:
        by_label.setdefault(item[1].label, []).append(item)
    out: List[Tuple[int, AtomicSegment]] = []
    for label in ATOMIC_LABELS:
        items = by_label.get(label, [])
        if len(items) > cap:
            keep = np.sort(rng.choice(len(items), size=cap, replace=False))
            items = [items[i] for i in keep]
        out.extend(items)
    return out


def write_segments_csv(segments: Sequence[AtomicSegment], path: str, traj_ids: Optional[Sequence[int]] = None) -> None:
    from .formats import atomic_write_bytes

    frame = pd.DataFrame(
        [{"label": s.label, "start": s.start_index, "end": s.end_index, "magnitude": s.magnitude} for s in segments],
        columns=["label", "start", "end", "magnitude"],
    )
    if traj_ids is not None:
        frame.insert(0, "trajectory", list(traj_ids))
    atomic_write_bytes(Path(path), frame.to_csv(index=False).encode("utf-8"))

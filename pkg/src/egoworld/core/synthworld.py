"""EgoWorld core: procedural micro-world with a kinematic body and a head-mounted camera.

Scenes are colored boxes and vertical panels on a checkerboard floor. Frames come from a
painter's-algorithm rasterizer (Pillow polygons, no lighting beyond fixed face shading).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from .config import DataConfig
from .errors import DataError
from .kinematics import (
    ARM_JOINTS,
    UPPER_BODY,
    KinematicTree,
    ensure_unit,
    euler_to_quat,
    forward_kinematics,
    quat_conjugate,
    quat_multiply,
    quat_to_euler,
    relative_rotation,
    to_rotation,
    joint_slots,
)
from .models import BodyState, Obstacle, PoseFrame, RunResult, Scene, Trajectory

ARENA_BOUNDS = 8.0
BODY_MARGIN = 0.3
SPAWN_KEEPOUT = 1.0
PELVIS_HEIGHT = 1.0
FOV_DEG = 90.0
NEAR_PLANE = 0.05
CAMERA_OFFSET = np.array([0.10, 0.0, 0.08])  # head frame
CAMERA_PITCH = math.radians(20.0)  # downward
TILE = 1.0
HAND_COLOR = (236, 188, 150)
SLEEVE_COLOR = (40, 70, 160)
FOREARM_RADIUS = 0.04
HAND_RADIUS = 0.05
HAND_LENGTH = 0.10

# Corner order: x-, y-, z- bits. Faces listed with a fixed shade factor.
_BOX_FACES: Tuple[Tuple[Tuple[int, int, int, int], float], ...] = (
    ((4, 5, 7, 6), 1.00),  # top
    ((0, 2, 3, 1), 0.45),  # bottom
    ((1, 3, 7, 5), 0.80),  # +x
    ((0, 4, 6, 2), 0.70),  # -x
    ((2, 6, 7, 3), 0.60),  # +y
    ((0, 1, 5, 4), 0.90),  # -y
)


# ---------------- Scenes ----------------

def _place(rng: np.random.Generator, layout: List[Tuple[np.ndarray, float]], keepout: float,
           extent: float) -> Optional[np.ndarray]:
    for _ in range(100):
        xy = rng.uniform(-extent + keepout, extent - keepout, size=2)
        if np.linalg.norm(xy) < SPAWN_KEEPOUT + keepout:
            continue
        if all(np.linalg.norm(xy - other) >= k + keepout for other, k in layout):
            return xy
    return None


def generate_scene(seed: int, obstacles_min: int = 8, obstacles_max: int = 32,
                   bounds: float = ARENA_BOUNDS) -> Scene:
    """Deterministic scene for `seed`; every obstacle lies inside the arena bounds."""
    if obstacles_min < 0 or obstacles_max < obstacles_min:
        raise DataError(f"Bad obstacle range [{obstacles_min}, {obstacles_max}].")
    rng = np.random.default_rng(int(seed))
    count = int(rng.integers(obstacles_min, obstacles_max + 1))
    palette = rng.integers(30, 255, size=(count, 3))
    obstacles: List[Obstacle] = []
    layout: List[Tuple[np.ndarray, float]] = []
    for i in range(count):
        if rng.random() < 0.7:
            kind = "box"
            size = (float(rng.uniform(0.3, 1.2)), float(rng.uniform(0.3, 1.2)), float(rng.uniform(0.3, 2.0)))
        else:
            kind = "panel"
            width = float(rng.uniform(0.8, 2.5))
            size = (width, 0.06, float(rng.uniform(1.0, 2.5))) if rng.random() < 0.5 else (0.06, width, float(rng.uniform(1.0, 2.5)))
        keepout = 0.5 * math.hypot(size[0], size[1])
        xy = _place(rng, layout, keepout, bounds)
        if xy is None:
            # Crowded arena: shrink into the remaining room rather than dropping the obstacle.
            keepout = 0.2
            size = (min(size[0], 0.3), min(size[1], 0.3), size[2])
            xy = rng.uniform(-bounds + keepout, bounds - keepout, size=2)
        layout.append((xy, keepout))
        obstacles.append(Obstacle(
            kind=kind,
            center=(float(xy[0]), float(xy[1]), 0.5 * size[2]),
            size=size,
            color=tuple(int(c) for c in palette[i]),
        ))
    floor_a = tuple(int(c) for c in rng.integers(90, 160, size=3))
    floor_b = tuple(int(c * 0.7) for c in floor_a)
    sky = tuple(int(c) for c in rng.integers(150, 230, size=3))
    return Scene(seed=int(seed), obstacles=tuple(obstacles), floor_colors=(floor_a, floor_b), sky_color=sky,
                 bounds=float(bounds))


@lru_cache(maxsize=32)
def _scene_geometry(scene: Scene) -> Tuple[np.ndarray, List[Tuple[int, int, int]], np.ndarray, List[Tuple[int, int, int]]]:
    """World-space quads for floor tiles and obstacle faces, with their fill colors."""
    extent = scene.bounds + 4.0
    edges = np.arange(-extent, extent, TILE)
    floor, floor_colors = [], []
    for ix, x in enumerate(edges):
        for iy, y in enumerate(edges):
            floor.append([[x, y, 0.0], [x + TILE, y, 0.0], [x + TILE, y + TILE, 0.0], [x, y + TILE, 0.0]])
            floor_colors.append(scene.floor_colors[(ix + iy) % 2])
    faces, face_colors = [], []
    for ob in scene.obstacles:
        c = np.asarray(ob.center)
        half = 0.5 * np.asarray(ob.size)
        corners = np.array([[c[0] + sx * half[0], c[1] + sy * half[1], c[2] + sz * half[2]]
                            for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
        # Re-order so that bit 0 = x, bit 1 = y, bit 2 = z.
        corners = corners[[0, 4, 2, 6, 1, 5, 3, 7]]
        for idx, shade in _BOX_FACES:
            faces.append(corners[list(idx)])
            face_colors.append(tuple(int(round(ch * shade)) for ch in ob.color))
    return (np.asarray(floor, dtype=np.float64), floor_colors,
            np.asarray(faces, dtype=np.float64).reshape(-1, 4, 3), face_colors)


# ---------------- Body ----------------

def body_state_from_pose(pose: PoseFrame, tree: KinematicTree = UPPER_BODY, collided: bool = False) -> BodyState:
    positions = forward_kinematics(pose, tree)
    head = tree.index("Head")
    r_head = to_rotation(ensure_unit(pose.joint_rotations[head]))
    cam_rot = (r_head * Rotation.from_euler("y", CAMERA_PITCH)).as_matrix()
    return BodyState(
        pose=pose,
        joint_positions=positions,
        camera_position=positions[head] + r_head.apply(CAMERA_OFFSET),
        camera_rotation=cam_rot,
        collided=collided,
    )


def rest_body_state(position: Sequence[float] = (0.0, 0.0), heading: float = 0.0, timestamp: float = 0.0,
                    tree: KinematicTree = UPPER_BODY) -> BodyState:
    """Upright body at `position` facing `heading` (radians about +Z), arms hanging."""
    q = euler_to_quat(np.array([heading, 0.0, 0.0]))
    pose = PoseFrame(
        timestamp=float(timestamp),
        root_translation=np.array([position[0], position[1], PELVIS_HEIGHT], dtype=np.float64),
        joint_rotations=np.tile(q, (len(tree), 1)),
    )
    return body_state_from_pose(pose, tree)


def step_body(state: BodyState, action_raw: np.ndarray, dt: float, bounds: float = ARENA_BOUNDS,
              tree: KinematicTree = UPPER_BODY) -> BodyState:
    """Apply an unnormalized 48-D action; the exact inverse of kinematics.raw_action."""
    if not dt > 0:
        raise DataError(f"step_body needs dt > 0, got {dt}.")
    a = np.asarray(action_raw, dtype=np.float64)
    if a.shape != (3 + 3 * len(tree),):
        raise DataError(f"Raw action must have shape ({3 + 3 * len(tree)},), got {a.shape}.")
    pose = state.pose
    rots = ensure_unit(pose.joint_rotations)
    root = tree.root
    q_pelvis = rots[root]
    deltas = euler_to_quat(a[3:].reshape(len(tree), 3))
    new_pelvis = quat_multiply(q_pelvis, deltas[root])
    local = quat_multiply(quat_conjugate(q_pelvis)[None, :], rots)
    new_rots = quat_multiply(new_pelvis[None, :], quat_multiply(local, deltas))
    new_rots[root] = new_pelvis

    translation = np.asarray(pose.root_translation, dtype=np.float64) + to_rotation(q_pelvis).apply(a[:3])
    limit = bounds - BODY_MARGIN
    clamped_xy = np.clip(translation[:2], -limit, limit)
    collided = bool(np.any(clamped_xy != translation[:2]))
    translation[:2] = clamped_xy
    new_pose = PoseFrame(timestamp=pose.timestamp + dt, root_translation=translation, joint_rotations=new_rots)
    return body_state_from_pose(new_pose, tree, collided=collided)


# ---------------- Rendering ----------------

def _clip_near(poly: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman against the plane forward >= NEAR_PLANE, camera coordinates."""
    out = []
    n = len(poly)
    for i in range(n):
        cur, nxt = poly[i], poly[(i + 1) % n]
        cur_in, nxt_in = cur[0] >= NEAR_PLANE, nxt[0] >= NEAR_PLANE
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            t = (NEAR_PLANE - cur[0]) / (nxt[0] - cur[0])
            out.append(cur + t * (nxt - cur))
    return np.asarray(out)


def _to_pixels(cam: np.ndarray, focal: float, res: int) -> List[Tuple[float, float]]:
    half = 0.5 * res
    return [(half - focal * p[1] / p[0], half - focal * p[2] / p[0]) for p in cam]


def _visible_polygons(quads: np.ndarray, colors: Sequence, state: BodyState, focal: float,
                      res: int) -> List[Tuple[float, List[Tuple[float, float]], Tuple[int, int, int]]]:
    cam = (quads - state.camera_position) @ state.camera_rotation  # (Q, 4, 3): forward, left, up
    fwd = cam[..., 0]
    keep = np.any(fwd >= NEAR_PLANE, axis=1)
    # Lateral cull for fully visible-depth quads: every vertex beyond the same frustum side.
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.maximum(fwd, NEAR_PLANE)
        sx = -cam[..., 1] / safe
        sy = -cam[..., 2] / safe
    limit = 0.5 * res / focal + 1e-3
    all_front = np.all(fwd >= NEAR_PLANE, axis=1)
    outside = (np.all(sx > limit, axis=1) | np.all(sx < -limit, axis=1)
               | np.all(sy > limit, axis=1) | np.all(sy < -limit, axis=1))
    keep &= ~(all_front & outside)
    out = []
    for i in np.nonzero(keep)[0]:
        poly = cam[i] if all_front[i] else _clip_near(cam[i])
        if len(poly) < 3:
            continue
        depth = float(np.mean(np.linalg.norm(poly, axis=1)))
        out.append((depth, _to_pixels(poly, focal, res), colors[i]))
    return out


def _body_segments(state: BodyState, tree: KinematicTree) -> List[Tuple[np.ndarray, np.ndarray, float, Tuple[int, int, int]]]:
    segs = []
    rots = state.pose.joint_rotations
    for arm in ("right", "left"):
        _, _, forearm, hand = (tree.index(n) for n in ARM_JOINTS[arm])
        elbow, wrist = state.joint_positions[forearm], state.joint_positions[hand]
        tip = wrist + to_rotation(ensure_unit(rots[hand])).apply([0.0, 0.0, -HAND_LENGTH])
        segs.append((elbow, wrist, FOREARM_RADIUS, SLEEVE_COLOR))
        segs.append((wrist, tip, HAND_RADIUS, HAND_COLOR))
    return segs


def render_frame(scene: Scene, state: BodyState, resolution: int = 64,
                 tree: KinematicTree = UPPER_BODY) -> np.ndarray:
    """Rasterize the head-camera view as an (H, W, 3) uint8 frame."""
    res = int(resolution)
    focal = 0.5 * res / math.tan(math.radians(FOV_DEG) / 2.0)
    img = Image.new("RGB", (res, res), scene.sky_color)
    draw = ImageDraw.Draw(img)

    floor, floor_colors, faces, face_colors = _scene_geometry(scene)
    for _, pts, color in sorted(_visible_polygons(floor, floor_colors, state, focal, res), key=lambda p: -p[0]):
        draw.polygon(pts, fill=color)
    for _, pts, color in sorted(_visible_polygons(faces, face_colors, state, focal, res), key=lambda p: -p[0]):
        draw.polygon(pts, fill=color)

    strokes = []
    for a, b, radius, color in _body_segments(state, tree):
        cam = (np.stack([a, b]) - state.camera_position) @ state.camera_rotation
        if np.all(cam[:, 0] < NEAR_PLANE):
            continue
        if cam[0, 0] < NEAR_PLANE or cam[1, 0] < NEAR_PLANE:
            inside, outside = (cam[0], cam[1]) if cam[0, 0] >= NEAR_PLANE else (cam[1], cam[0])
            t = (NEAR_PLANE - inside[0]) / (outside[0] - inside[0])
            cam = np.stack([inside, inside + t * (outside - inside)])
        depth = float(np.mean(cam[:, 0]))
        width = max(1, int(round(2.0 * focal * radius / depth)))
        strokes.append((depth, _to_pixels(cam, focal, res), width, color))
    for _, pts, width, color in sorted(strokes, key=lambda s: -s[0]):
        draw.line(pts, fill=color, width=width)
        if color == HAND_COLOR:
            x, y = pts[-1]
            r = width / 2.0
            draw.ellipse((x - r, y - r, x + r, y + r), fill=color)
    return np.asarray(img, dtype=np.uint8)


# ---------------- Scripted policy ----------------

@dataclass
class ScriptedPolicy:
    """Stochastic behavior script: walking, turning, arm gestures and dwell periods."""

    seed: int
    walk_speed: float = 0.8  # m/s
    turn_rate: float = 0.6  # rad/s
    arm_rate: float = 1.5  # rad/s
    min_mode_seconds: float = 2.0
    max_mode_seconds: float = 4.0
    mode_weights: Dict[str, float] = field(default_factory=lambda: {"walk": 0.35, "turn": 0.2, "gesture": 0.3, "dwell": 0.15})

    def __post_init__(self) -> None:
        self.reset()

    def reset(self) -> None:
        self._rng = np.random.default_rng(int(self.seed))
        self.mode = ""
        self._remaining = 0.0
        self._turn_sign = 1.0
        self._speed = self.walk_speed
        self._arms = {"right": np.zeros(2), "left": np.zeros(2)}  # (pitch, abduction), radians
        self._targets = {"right": np.zeros(2), "left": np.zeros(2)}

    def _arm_local(self, angles: np.ndarray) -> np.ndarray:
        return euler_to_quat(np.array([0.0, angles[1], angles[0]]))

    def _choose_mode(self, collided: bool) -> None:
        names = list(self.mode_weights)
        weights = np.array([self.mode_weights[n] for n in names], dtype=np.float64)
        if not self.mode or collided:
            weights[names.index("dwell")] = 0.0
        if collided:
            weights[names.index("walk")] = 0.0
        self.mode = str(self._rng.choice(names, p=weights / weights.sum()))
        self._remaining = float(self._rng.uniform(self.min_mode_seconds, self.max_mode_seconds))
        self._turn_sign = float(self._rng.choice([-1.0, 1.0]))
        self._speed = self.walk_speed * float(self._rng.uniform(0.8, 1.2))
        if self.mode == "gesture":
            for arm in self._arms:
                moving = arm == self._rng.choice(["right", "left"]) or self._rng.random() < 0.3
                if not moving:
                    self._targets[arm] = self._arms[arm].copy()
                    continue
                pitch = self._arms[arm][0]
                new_pitch = self._rng.uniform(-1.7, -1.3) if pitch > -0.8 else self._rng.uniform(-0.2, 0.0)
                side = 1.0 if arm == "left" else -1.0
                self._targets[arm] = np.array([new_pitch, side * self._rng.uniform(0.0, 0.6)])

    def act(self, state: BodyState, dt: float, tree: KinematicTree = UPPER_BODY) -> np.ndarray:
        """Next unnormalized 48-D action for a step of `dt` seconds."""
        if self._remaining <= 0.0 or (state.collided and self.mode == "walk"):
            self._choose_mode(state.collided)
        self._remaining -= dt
        raw = np.zeros(3 + 3 * len(tree))
        if self.mode == "walk":
            raw[0] = self._speed * dt
        elif self.mode == "turn":
            raw[joint_slots(tree.root).start] = self._turn_sign * self.turn_rate * dt
        elif self.mode == "gesture":
            for arm, current in self._arms.items():
                step = np.clip(self._targets[arm] - current, -self.arm_rate * dt, self.arm_rate * dt)
                if not np.any(step):
                    continue
                q_old = self._arm_local(current)
                q_new = self._arm_local(current + step)
                delta = quat_to_euler(relative_rotation(q_old, q_new))
                for name in ARM_JOINTS[arm][1:]:
                    raw[joint_slots(tree.index(name))] = delta
                self._arms[arm] = current + step
        return raw


# ---------------- Trajectories and datasets ----------------

def sample_trajectory(scene: Scene, policy: ScriptedPolicy, n_frames: int, fps: float, resolution: int = 64,
                      start: Optional[BodyState] = None, tree: KinematicTree = UPPER_BODY
                      ) -> Tuple[List[np.ndarray], List[PoseFrame]]:
    """Roll the policy through the scene; poses are kept at on-disk (f32) precision."""
    if n_frames < 2:
        raise DataError(f"Trajectory needs at least 2 frames, got {n_frames}.")
    if fps <= 0:
        raise DataError(f"fps must be positive, got {fps}.")
    policy.reset()
    if start is None:
        rng = np.random.default_rng([int(policy.seed), 1])
        limit = scene.bounds - BODY_MARGIN - 1.0
        start = rest_body_state(position=rng.uniform(-limit, limit, size=2), heading=float(rng.uniform(-math.pi, math.pi)))
    dt = 1.0 / fps
    state = body_state_from_pose(replace(start.pose, timestamp=0.0).as_float32(), tree)
    frames: List[np.ndarray] = []
    poses: List[PoseFrame] = []
    for i in range(n_frames):
        frames.append(render_frame(scene, state, resolution, tree))
        poses.append(state.pose)
        if i == n_frames - 1:
            break
        nxt = step_body(state, policy.act(state, dt, tree), dt, scene.bounds, tree)
        pose = replace(nxt.pose, timestamp=(i + 1) / fps).as_float32()
        state = body_state_from_pose(pose, tree, collided=nxt.collided)
    return frames, poses


def make_trajectory(cfg: DataConfig, index: int) -> Trajectory:
    seed = int(cfg.seed) ^ int(index)
    scene = generate_scene(seed, cfg.obstacles_min, cfg.obstacles_max)
    frames, poses = sample_trajectory(scene, ScriptedPolicy(seed=seed), cfg.frames, cfg.fps, cfg.resolution)
    return Trajectory(traj_id=int(index), fps=float(cfg.fps), frames=np.stack(frames), poses=poses)


def _make_trajectory_job(args: Tuple[DataConfig, int]) -> Trajectory:
    return make_trajectory(*args)


def generate_dataset(cfg: DataConfig, progress: bool = False) -> Tuple[List[Trajectory], RunResult]:
    """Generate cfg.trajectories trajectories; seeds are dataset_seed XOR trajectory index."""
    result = RunResult(success=True, overall_message="", logger_name="egoworld.synthworld")
    if cfg.trajectories < 1:
        raise DataError("Need at least one trajectory.")
    jobs = [(cfg, i) for i in range(cfg.trajectories)]
    bar = tqdm(total=len(jobs), desc="gen-data", unit="traj", disable=not progress)
    trajectories: List[Trajectory] = []
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for traj in pool.map(_make_trajectory_job, jobs, chunksize=4):
                trajectories.append(traj)
                bar.update(1)
    else:
        for job in jobs:
            trajectories.append(_make_trajectory_job(job))
            bar.update(1)
    bar.close()
    result.summary = {"trajectories": len(trajectories), "frames": cfg.frames, "fps": cfg.fps,
                      "resolution": cfg.resolution, "seed": cfg.seed}
    result.add_log("INFO", "Generated synthetic dataset.", **result.summary)
    result.overall_message = f"Generated {len(trajectories)} trajectories."
    return trajectories, result

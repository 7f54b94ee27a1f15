"""Deterministic synthetic driving scenes.

A scene is a seeded arrangement of vehicle boxes on a flat ground plane,
an ego vehicle driving a gentle arc, and a forward-facing camera rig fixed
to the ego body. Everything downstream (point clouds, camera frames,
ground-truth boxes) regenerates exactly from the scene description, so a
scene is serialized as a small JSON file rather than raw sensor dumps.

Sensor models are deliberately coarse but geometrically faithful:
- the range scanner samples visible actor faces and the ground with an
  expected density proportional to 1/range^2, truncated Gaussian range
  noise, and a per-azimuth nearest-hit occlusion test;
- cameras rasterize actor boxes painter-style into three channels
  (inverse-depth surrogate, occupancy, class color) over an analytic
  ground/sky background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import DetectionBox, bev_corners
from .geometry import CameraModel, RigidTransform

GROUND_INTENSITY = 0.25
ACTOR_INTENSITY = 0.7
DEPTH_FALLOFF = 15.0  # meters; depth surrogate = 1 / (1 + depth / falloff)


class SceneGenerationError(RuntimeError):
    pass


def rng_for(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a namespaced sub-stream of one seed."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass
class ActorBox:
    center: np.ndarray  # (3,) world frame at frame 0
    dims: tuple[float, float, float]  # length, width, height
    yaw: float
    velocity: tuple[float, float]  # (vx, vz) m/s, constant
    class_id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        if min(self.dims) <= 0:
            raise ValueError("actor dims must be positive")
        if abs(self.yaw) > math.pi:
            raise ValueError("yaw must lie in [-pi, pi]")

    def center_at(self, frame: int, dt: float) -> np.ndarray:
        t = frame * dt
        return self.center + np.array([self.velocity[0] * t, 0.0, self.velocity[1] * t])

    @property
    def half_diag_xz(self) -> float:
        return math.hypot(self.dims[0], self.dims[1]) / 2.0


@dataclass
class SceneParameters:
    actor_count: tuple[int, int] = (1, 10)
    speed_range: tuple[float, float] = (0.0, 10.0)
    spawn_range: tuple[float, float] = (6.0, 72.0)
    spawn_sector: tuple[float, float] = (-1.83, 1.83)  # azimuth from +z, radians
    frame_count: int = 16
    frame_dt: float = 0.1
    ego_speed_range: tuple[float, float] = (2.0, 9.0)
    ego_yaw_rate_range: tuple[float, float] = (-0.04, 0.04)
    ground_points_per_frame: int = 4500
    actor_point_budget: float = 15000.0  # expected face points per frame = budget / r^2
    ground_range: tuple[float, float] = (2.0, 80.0)
    lidar_height: float = 1.8
    range_noise_sigma: float = 0.02
    static_actor_fraction: float = 0.3
    camera_count: int = 3
    camera_fov_deg: float = 64.0
    camera_spacing_deg: float = 57.0
    camera_image_size: int = 96
    camera_height: float = 1.6

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d: dict) -> "SceneParameters":
        kwargs = {}
        for k, v in d.items():
            kwargs[k] = tuple(v) if isinstance(v, list) else v
        return SceneParameters(**kwargs)


@dataclass
class Scene:
    actors: list[ActorBox]
    ego_trajectory: list[RigidTransform]  # ego-to-world pose per frame
    rig: list[CameraModel]  # ego-frame cameras (E maps ego -> camera)
    frame_count: int
    seed: int
    params: SceneParameters

    def ego_heading(self, frame: int) -> float:
        return self.ego_trajectory[frame].yaw


@dataclass
class PointCloudFrame:
    points: np.ndarray  # (N, 3) in the ego frame at this timestamp
    features: np.ndarray  # (N, F0) per-point features (intensity surrogate)
    timestamp_index: int
    ego_pose: RigidTransform  # ego-to-world at this timestamp


def build_rig(params: SceneParameters) -> list[CameraModel]:
    """Forward-facing cameras attached to the ego body, yawed symmetrically.

    The camera frame keeps y up, so fy is negative to map onto v-down
    pixels; E maps ego coordinates to camera coordinates.
    """
    size = params.camera_image_size
    fx = (size / 2.0) / math.tan(math.radians(params.camera_fov_deg) / 2.0)
    n = params.camera_count
    yaws = [(i - (n - 1) / 2.0) * math.radians(params.camera_spacing_deg) for i in range(n)]
    rig = []
    for yaw in yaws:
        pose = RigidTransform.from_yaw(yaw, (0.0, params.camera_height, 0.0))
        rig.append(
            CameraModel.pinhole(
                fx, -fx, size / 2.0, size / 2.0, size, size,
                E=pose.invert().matrix,
            )
        )
    return rig


def generate_scene(params: SceneParameters, seed: int) -> Scene:
    """Seeded scene synthesis; placement rejects overlapping spawns."""
    rng = rng_for(seed, 0)
    lo, hi = params.actor_count
    n_actors = int(rng.integers(lo, hi + 1))
    actors: list[ActorBox] = []
    attempts_left = 200 * max(n_actors, 1)
    while len(actors) < n_actors:
        if attempts_left <= 0:
            raise SceneGenerationError(
                f"could not place {n_actors} actors without overlap "
                f"(spawn range {params.spawn_range})"
            )
        attempts_left -= 1
        r = rng.uniform(*params.spawn_range)
        az = rng.uniform(*params.spawn_sector)
        pos = np.array([r * math.sin(az), 0.0, r * math.cos(az)])
        dims = (
            float(rng.uniform(3.8, 5.6)),
            float(rng.uniform(1.8, 2.3)),
            float(rng.uniform(1.4, 1.9)),
        )
        pos[1] = dims[2] / 2.0  # box center sits half a height above ground
        half_diag = math.hypot(dims[0], dims[1]) / 2.0
        clear = all(
            np.linalg.norm(pos[[0, 2]] - a.center[[0, 2]])
            > half_diag + a.half_diag_xz + 1.0
            for a in actors
        )
        if not clear:
            continue
        if rng.random() < params.static_actor_fraction:
            speed = 0.0
            yaw = float(rng.uniform(-math.pi, math.pi))
        else:
            speed = float(rng.uniform(*params.speed_range))
            yaw = float(rng.uniform(-math.pi, math.pi))
        velocity = (speed * math.sin(yaw), speed * math.cos(yaw))
        actors.append(ActorBox(pos, dims, yaw, velocity))

    ego_speed = float(rng.uniform(*params.ego_speed_range))
    yaw_rate = float(rng.uniform(*params.ego_yaw_rate_range))
    trajectory = []
    x = z = heading = 0.0
    for f in range(params.frame_count):
        trajectory.append(RigidTransform.from_yaw(heading, (x, 0.0, z)))
        heading += yaw_rate * params.frame_dt
        x += ego_speed * params.frame_dt * math.sin(heading)
        z += ego_speed * params.frame_dt * math.cos(heading)

    return Scene(
        actors=actors,
        ego_trajectory=trajectory,
        rig=build_rig(params),
        frame_count=params.frame_count,
        seed=seed,
        params=params,
    )


def _actor_states_ego(scene: Scene, frame: int):
    """Per-actor (center_ego (3,), yaw_ego) at the given frame."""
    inv_pose = scene.ego_trajectory[frame].invert()
    heading = scene.ego_heading(frame)
    out = []
    for a in scene.actors:
        c = inv_pose.apply(a.center_at(frame, scene.params.frame_dt))
        out.append((c, a.yaw - heading))
    return out


def _sample_face_points(rng, center, yaw, dims, sensor, count):
    """Uniform samples on the visible faces of one box, weighted by
    projected area toward the sensor."""
    length, width, height = dims
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])  # local -> ego
    # faces: (outward normal, center offset, in-plane axes, half extents)
    hx, hy, hz = width / 2.0, height / 2.0, length / 2.0
    faces = [
        (np.array([1.0, 0, 0]), np.array([hx, 0, 0]), (np.array([0, 1.0, 0]), np.array([0, 0, 1.0])), (hy, hz)),
        (np.array([-1.0, 0, 0]), np.array([-hx, 0, 0]), (np.array([0, 1.0, 0]), np.array([0, 0, 1.0])), (hy, hz)),
        (np.array([0, 0, 1.0]), np.array([0, 0, hz]), (np.array([1.0, 0, 0]), np.array([0, 1.0, 0])), (hx, hy)),
        (np.array([0, 0, -1.0]), np.array([0, 0, -hz]), (np.array([1.0, 0, 0]), np.array([0, 1.0, 0])), (hx, hy)),
        (np.array([0, 1.0, 0]), np.array([0, hy, 0]), (np.array([1.0, 0, 0]), np.array([0, 0, 1.0])), (hx, hz)),
    ]
    weights = []
    for normal, offset, _, extents in faces:
        n_ego = rot @ normal
        c_ego = center + rot @ offset
        to_sensor = sensor - c_ego
        dist = np.linalg.norm(to_sensor)
        cos_inc = float(n_ego @ to_sensor / max(dist, 1e-9))
        area = 4.0 * extents[0] * extents[1]
        weights.append(area * max(cos_inc, 0.0))
    weights = np.asarray(weights)
    if weights.sum() <= 0:
        return np.zeros((0, 3))
    split = rng.multinomial(count, weights / weights.sum())
    pts = []
    for (normal, offset, axes, extents), m in zip(faces, split):
        if m == 0:
            continue
        u = rng.uniform(-extents[0], extents[0], m)
        v = rng.uniform(-extents[1], extents[1], m)
        local = offset + u[:, None] * axes[0] + v[:, None] * axes[1]
        pts.append(center + local @ rot.T)
    return np.vstack(pts) if pts else np.zeros((0, 3))


def simulate_lidar_frame(scene: Scene, frame: int) -> PointCloudFrame:
    """Range-scanner sweep for one frame, expressed in that frame's ego frame."""
    if not 0 <= frame < scene.frame_count:
        raise IndexError(f"frame {frame} out of range [0, {scene.frame_count})")
    params = scene.params
    rng = rng_for(scene.seed, 1, frame)
    sensor = np.array([0.0, params.lidar_height, 0.0])
    states = _actor_states_ego(scene, frame)

    # ground: azimuth uniform, range with density ~ 1/r so area density ~ 1/r^2
    n_g = params.ground_points_per_frame
    az = rng.uniform(0.0, 2.0 * math.pi, n_g)
    r0, r1 = params.ground_range
    r = r0 * (r1 / r0) ** rng.random(n_g)
    ground = np.column_stack([r * np.sin(az), np.zeros(n_g), r * np.cos(az)])

    actor_points = []
    actor_ids = []
    for idx, ((center, yaw), actor) in enumerate(zip(states, scene.actors)):
        rng_range = float(np.linalg.norm(center - sensor))
        lam = params.actor_point_budget / max(rng_range, 1.0) ** 2
        count = min(int(rng.poisson(lam)), 600)
        if count == 0:
            continue
        pts = _sample_face_points(rng, center, yaw, actor.dims, sensor, count)
        if len(pts):
            actor_points.append(pts)
            actor_ids.append(np.full(len(pts), idx))

    if actor_points:
        apts = np.vstack(actor_points)
        aids = np.concatenate(actor_ids)
        # coarse per-azimuth nearest-hit occlusion: a point is blocked when
        # some other actor covers its azimuth at strictly nearer range
        az_p = np.arctan2(apts[:, 0], apts[:, 2])
        r_p = np.hypot(apts[:, 0], apts[:, 2])
        blocked = np.zeros(len(apts), dtype=bool)
        for k, ((center, _), actor) in enumerate(zip(states, scene.actors)):
            r_k = math.hypot(center[0], center[2])
            theta_k = math.atan2(center[0], center[2])
            half = math.asin(min(1.0, actor.half_diag_xz / max(r_k, actor.half_diag_xz)))
            dth = np.abs((az_p - theta_k + math.pi) % (2.0 * math.pi) - math.pi)
            behind = (dth < half) & (r_p > r_k + actor.half_diag_xz) & (aids != k)
            blocked |= behind
        apts = apts[~blocked]
        points = np.vstack([ground, apts])
        intensity = np.concatenate(
            [np.full(len(ground), GROUND_INTENSITY), np.full(len(apts), ACTOR_INTENSITY)]
        )
    else:
        points = ground
        intensity = np.full(len(ground), GROUND_INTENSITY)

    # truncated range noise along the ray keeps points within 3 sigma of a face
    dirs = points - sensor
    dist = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs /= np.maximum(dist, 1e-9)
    sigma = params.range_noise_sigma
    noise = np.clip(rng.normal(0.0, sigma, (len(points), 1)), -3.0 * sigma, 3.0 * sigma)
    points = points + noise * dirs
    intensity = intensity + rng.uniform(-0.05, 0.05, len(points))

    return PointCloudFrame(
        points=points,
        features=intensity[:, None],
        timestamp_index=frame,
        ego_pose=scene.ego_trajectory[frame],
    )


def _ground_depth_map(cam: CameraModel, size: int, cam_height: float) -> np.ndarray:
    """Per-pixel distance to the ground plane; inf where the ray never lands."""
    fx, fy = cam.K[0, 0], cam.K[1, 1]
    cx, cy = cam.K[0, 2], cam.K[1, 2]
    us, vs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    d = np.stack([(us - cx) / fx, (vs - cy) / fy, np.ones_like(us)], axis=-1)
    rot = cam.E[:3, :3].T  # camera -> ego rotation
    d_ego = d @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -cam_height / d_ego[..., 1]
    depth = np.where((d_ego[..., 1] < 0) & (t > 0), t * np.linalg.norm(d, axis=-1), np.inf)
    return depth


def render_camera_frame(scene: Scene, frame: int, camera_index: int) -> np.ndarray:
    """Painter's-algorithm rasterization into (H, W, 3) channels:
    inverse-depth surrogate, actor occupancy, class color."""
    if not 0 <= camera_index < len(scene.rig):
        raise IndexError(f"camera {camera_index} out of range (rig has {len(scene.rig)})")
    cam = scene.rig[camera_index]
    size = scene.params.camera_image_size
    img = np.zeros((size, size, 3))

    gdepth = _ground_depth_map(cam, size, scene.params.camera_height)
    ground_mask = np.isfinite(gdepth)
    img[..., 0][ground_mask] = 1.0 / (1.0 + gdepth[ground_mask] / DEPTH_FALLOFF)

    states = _actor_states_ego(scene, frame)
    order = np.argsort([-float(np.hypot(c[0], c[2])) for c, _ in states])  # far first
    for idx in order:
        center, yaw = states[idx]
        actor = scene.actors[idx]
        box = DetectionBox(center[0], center[1], center[2], *actor.dims, yaw)
        corners = box.corners_3d()
        uv, _ = cam.project(corners)
        cam_pts = np.concatenate([corners, np.ones((8, 1))], axis=1) @ cam.E.T
        valid = cam_pts[:, 2] > 0.2
        if valid.sum() < 3:
            continue
        hull = _convex_hull(uv[valid])
        if hull is None:
            continue
        depth = float(np.hypot(center[0] - 0.0, center[2] - 0.0))
        lo = np.clip(np.floor(hull.min(axis=0)).astype(int), 0, size - 1)
        hi = np.clip(np.ceil(hull.max(axis=0)).astype(int) + 1, 0, size)
        if np.any(hi <= lo):
            continue
        us, vs = np.meshgrid(
            np.arange(lo[0], hi[0]) + 0.5, np.arange(lo[1], hi[1]) + 0.5
        )
        inside = _points_in_hull(np.stack([us, vs], axis=-1), hull)
        sub = img[lo[1]:hi[1], lo[0]:hi[0]]
        sub[inside, 0] = 1.0 / (1.0 + depth / DEPTH_FALLOFF)
        sub[inside, 1] = 1.0
        sub[inside, 2] = 0.3 * (actor.class_id + 1)
    return np.clip(img, 0.0, 1.0)


def _convex_hull(pts: np.ndarray) -> np.ndarray | None:
    """Monotone-chain convex hull of (N, 2) points; None when degenerate."""
    pts = np.unique(pts, axis=0)
    if len(pts) < 3:
        return None
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(points):
        chain = []
        for p in points:
            while len(chain) >= 2:
                u = chain[-1] - chain[-2]
                v = p - chain[-2]
                if u[0] * v[1] - u[1] * v[0] <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(pts)
    upper = half(pts[::-1])
    hull = np.array(lower[:-1] + upper[:-1])
    return hull if len(hull) >= 3 else None


def _points_in_hull(query: np.ndarray, hull: np.ndarray) -> np.ndarray:
    """Vectorized point-in-convex-polygon (hull counter-clockwise)."""
    inside = np.ones(query.shape[:-1], dtype=bool)
    n = len(hull)
    for i in range(n):
        a, b = hull[i], hull[(i + 1) % n]
        edge = b - a
        rel = query - a
        inside &= edge[0] * rel[..., 1] - edge[1] * rel[..., 0] >= 0
    return inside


def build_image_tensor(scene: Scene, camera_index: int, frames: list[int]) -> np.ndarray:
    """(H, W, T, 3) stack of rendered frames for one camera."""
    stack = [render_camera_frame(scene, f, camera_index) for f in frames]
    return np.stack(stack, axis=2)


def ground_truth_boxes(scene: Scene, frame: int) -> list[DetectionBox]:
    """Exact actor boxes at the queried frame, in that frame's ego frame."""
    out = []
    for (center, yaw), actor in zip(_actor_states_ego(scene, frame), scene.actors):
        yaw_wrapped = (yaw + math.pi) % (2.0 * math.pi) - math.pi
        out.append(
            DetectionBox(
                float(center[0]), float(center[1]), float(center[2]),
                actor.dims[0], actor.dims[1], actor.dims[2],
                float(yaw_wrapped), score=1.0, class_id=actor.class_id,
            )
        )
    return out


# ---------------------------------------------------------------------------
# serialization: one UTF-8 JSON file per scene plus a dataset manifest


def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "frame_count": scene.frame_count,
        "params": scene.params.to_dict(),
        "actors": [
            {
                "center": a.center.tolist(),
                "dims": list(a.dims),
                "yaw": a.yaw,
                "velocity": list(a.velocity),
                "class_id": a.class_id,
            }
            for a in scene.actors
        ],
        "ego_trajectory": [t.matrix.tolist() for t in scene.ego_trajectory],
        "rig": [c.to_dict() for c in scene.rig],
    }


def scene_from_dict(d: dict) -> Scene:
    return Scene(
        actors=[
            ActorBox(
                np.array(a["center"]), tuple(a["dims"]), a["yaw"],
                tuple(a["velocity"]), a["class_id"],
            )
            for a in d["actors"]
        ],
        ego_trajectory=[RigidTransform(np.array(m)) for m in d["ego_trajectory"]],
        rig=[CameraModel.from_dict(c) for c in d["rig"]],
        frame_count=d["frame_count"],
        seed=d["seed"],
        params=SceneParameters.from_dict(d["params"]),
    )


def save_scene(scene: Scene, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene)), encoding="utf-8")


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_dataset(out_dir: str | Path, params: SceneParameters, seed: int,
                  splits: dict[str, int]) -> dict[str, list[str]]:
    """Generate scenes for each split and write them plus a manifest.

    `splits` maps split name to scene count. Per-scene seeds derive from the
    master seed through a splittable counter so any scene regenerates
    independently. Returns the manifest's split -> relative-path mapping.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, list[str]] = {}
    counter = 0
    for split, count in splits.items():
        files = []
        for _ in range(count):
            scene_seed = int(rng_for(seed, 2, counter).integers(0, 2**63 - 1))
            counter += 1
            scene = generate_scene(params, scene_seed)
            name = f"{split}_{len(files):05d}.json"
            save_scene(scene, out_dir / name)
            files.append(name)
        manifest[split] = files
    (out_dir / "manifest.json").write_text(
        json.dumps({"seed": seed, "params": params.to_dict(), "splits": manifest}),
        encoding="utf-8",
    )
    return manifest


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    return json.loads(path.read_text(encoding="utf-8"))

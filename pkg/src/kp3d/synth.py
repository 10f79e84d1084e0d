"""Synthetic scenes with exact ground truth.

Point scenes: landmarks with random unit descriptors observed along a
camera trajectory, with optional pixel noise, depth noise and i.i.d.
outliers.  Planar scenes: a textured plane rendered analytically per pixel,
with dense depth.  Generation consumes one seeded RNG stream in a fixed
order, so a seed fully determines the output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError
from .evaluation import Trajectory
from .geometry import CameraIntrinsics, Pose, apply_homography, inverse, project, se3_exp, so3_exp, transform
from .matching import KeypointFrame

MOTION_MODELS = ("random-walk", "forward-drive", "orbit")

__all__ = [
    "SceneConfig", "SyntheticFrame", "SyntheticSequence", "generate_point_scene",
    "generate_planar_scene", "apply_homography", "inject_dynamic_outliers", "make_trajectory",
]


@dataclass(frozen=True)
class SceneConfig:
    n_points: int = 150
    depth_range: tuple[float, float] = (4.0, 40.0)
    image_size: tuple[int, int] = (640, 480)
    intrinsics: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(500.0, 500.0, 320.0, 240.0))
    pixel_noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    descriptor_dim: int = 256
    descriptor_noise_sigma: float = 0.0
    depth_noise_sigma: float = 0.0  # multiplicative, applied to keypoint depths
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError(f"bad depth range {self.depth_range}")
        if not 0 <= self.outlier_rate < 1:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if self.n_points < 1 or self.descriptor_dim < 1:
            raise ValueError("n_points and descriptor_dim must be positive")


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    keypoints: KeypointFrame
    landmark_ids: np.ndarray  # -1 for outliers
    depth: Optional[np.ndarray] = None  # dense HxW depth (planar scenes)
    image: Optional[np.ndarray] = None  # HxW intensities (planar scenes)

    @property
    def outliers(self) -> np.ndarray:
        return self.landmark_ids < 0


@dataclass(frozen=True, eq=False)
class SyntheticSequence:
    config: SceneConfig
    landmarks: np.ndarray  # 3 x L world points
    true_descriptors: np.ndarray  # D x L
    trajectory_gt: Trajectory  # camera-to-world
    frames: list[SyntheticFrame]

    @property
    def outlier_labels(self) -> list[np.ndarray]:
        return [f.outliers for f in self.frames]

    def relative_pose(self, target: int, context: int) -> Pose:
        """Ground-truth X_{target -> context} mapping target-camera points to context-camera points."""
        poses = self.trajectory_gt.poses
        return inverse(poses[context]) @ poses[target]

    def correspondences(self, target: int, context: int) -> np.ndarray:
        """(i, j) index pairs of keypoints observing the same landmark in both frames."""
        a = self.frames[target].landmark_ids
        b = self.frames[context].landmark_ids
        where_b = {lid: j for j, lid in enumerate(b) if lid >= 0}
        return np.array([(i, where_b[lid]) for i, lid in enumerate(a) if lid >= 0 and lid in where_b],
                        dtype=np.intp).reshape(-1, 2)


def _unit_columns(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=0, keepdims=True)


def make_trajectory(n_frames: int, motion_model: str, rng: np.random.Generator,
                    step: float = 1.5) -> list[Pose]:
    """Camera-to-world poses. Cameras look along their local +z axis."""
    if motion_model not in MOTION_MODELS:
        raise ValueError(f"unknown motion model {motion_model!r}; choose from {MOTION_MODELS}")
    poses = [Pose()]
    if motion_model == "forward-drive":
        # Drive forward along +z with a slowly varying yaw.
        phase = rng.uniform(0, 2 * math.pi)
        for k in range(1, n_frames):
            yaw = math.radians(0.8) * math.sin(phase + 0.15 * k)
            rel = Pose(so3_exp([0.0, yaw, 0.0]), [0.0, 0.0, step])
            poses.append(poses[-1] @ rel)
    elif motion_model == "orbit":
        # Circle a point ahead of the first camera, always facing it.
        radius = 12.0
        center = np.array([0.0, 0.0, radius])
        dtheta = step / radius
        for k in range(1, n_frames):
            R = so3_exp([0.0, -dtheta * k, 0.0])
            poses.append(Pose(R, center - R @ center))
    else:
        for _ in range(1, n_frames):
            w = rng.normal(scale=math.radians(2.0), size=3)
            v = rng.normal(scale=0.15 * step, size=3)
            v[2] += 0.3 * step
            poses.append(poses[-1] @ se3_exp(np.concatenate([w, v])))
    return poses


def _spawn_landmarks(cfg: SceneConfig, pose: Pose, rng, n: int) -> np.ndarray:
    """World points uniform in pixel coordinates and depth within a camera's frustum."""
    W, H = cfg.image_size
    K = cfg.intrinsics
    u = rng.uniform(0, W, n)
    v = rng.uniform(0, H, n)
    z = rng.uniform(*cfg.depth_range, n)
    P = np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z])
    return transform(pose, P)


def _observe(cfg, pose, landmarks, descriptors, candidates, rng):
    """Keypoints for the visible landmarks among ``candidates`` seen from ``pose``."""
    W, H = cfg.image_size
    K = cfg.intrinsics
    Q = transform(inverse(pose), landmarks[:, candidates])
    uv, front = project(Q, K, return_mask=True)
    visible = front & (Q[2] >= 0.5 * cfg.depth_range[0])
    visible &= (uv[0] >= 0) & (uv[0] < W) & (uv[1] >= 0) & (uv[1] < H)
    ids = candidates[visible]
    uv, z = uv[:, visible], Q[2, visible]
    n = ids.size
    order = rng.permutation(n)
    ids, uv, z = ids[order], uv[:, order], z[order]
    uv = uv + rng.normal(scale=1.0, size=uv.shape) * cfg.pixel_noise_sigma
    # Upper bounds are float32-representable so stored feature files stay in bounds.
    uv[0] = np.clip(uv[0], 0, float(np.nextafter(np.float32(W), np.float32(0))))
    uv[1] = np.clip(uv[1], 0, float(np.nextafter(np.float32(H), np.float32(0))))
    desc = descriptors[:, ids] + rng.normal(size=(descriptors.shape[0], n)) * cfg.descriptor_noise_sigma
    desc = _unit_columns(desc) if n else desc
    depth = z * np.exp(rng.normal(size=n) * cfg.depth_noise_sigma)
    outlier = rng.uniform(size=n) < cfg.outlier_rate
    k = int(outlier.sum())
    uv[:, outlier] = np.stack([rng.uniform(0, W, k), rng.uniform(0, H, k)])
    desc[:, outlier] = _unit_columns(rng.normal(size=(descriptors.shape[0], k)))
    depth[outlier] = rng.uniform(*cfg.depth_range, k)
    ids = np.where(outlier, -1, ids)
    scores = rng.uniform(0.5, 1.0, n)
    kp = KeypointFrame(uv, desc, scores, depth, (W, H))
    return kp, ids


def generate_point_scene(cfg: SceneConfig, n_frames: int = 2, motion_model: str = "forward-drive",
                         step: float = 1.5) -> SyntheticSequence:
    """Landmark scene observed along a trajectory.

    ``cfg.n_points`` landmarks are spawned in each camera's frustum; frame k
    observes the visible landmarks spawned at frames k-1, k and k+1, so
    consecutive frames share most of their keypoints.
    """
    if n_frames < 2:
        raise ValueError("need at least two frames")
    rng = np.random.default_rng(cfg.seed)
    poses = make_trajectory(n_frames, motion_model, rng, step)
    landmarks = np.concatenate([_spawn_landmarks(cfg, T, rng, cfg.n_points) for T in poses], axis=1)
    descriptors = _unit_columns(rng.normal(size=(cfg.descriptor_dim, landmarks.shape[1])))
    frames = []
    for k, T in enumerate(poses):
        lo, hi = max(k - 1, 0) * cfg.n_points, min(k + 2, n_frames) * cfg.n_points
        kp, ids = _observe(cfg, T, landmarks, descriptors, np.arange(lo, hi), rng)
        if len(kp) == 0:
            raise DegenerateError(f"no landmark visible in frame {k}")
        frames.append(SyntheticFrame(kp, ids))
    return SyntheticSequence(cfg, landmarks, descriptors, Trajectory(poses), frames)


# -- planar scenes ---------------------------------------------------------------

@dataclass(frozen=True)
class PlaneTexture:
    """Sum of 8 sinusoids on plane coordinates, values within [0.1, 0.9]."""

    freqs: np.ndarray  # (8, 2) cycles per scene unit
    phases: np.ndarray  # (8,)
    amps: np.ndarray  # (8,)

    @classmethod
    def random(cls, rng: np.random.Generator, max_freq: float) -> "PlaneTexture":
        mag = rng.uniform(0.25 * max_freq, max_freq, 8)
        ang = rng.uniform(0, 2 * math.pi, 8)
        freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=1)
        amps = rng.uniform(0.5, 1.0, 8)
        amps *= 0.4 / amps.sum()
        return cls(freqs, rng.uniform(0, 2 * math.pi, 8), amps)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        arg = 2 * math.pi * (np.multiply.outer(x, self.freqs[:, 0]) + np.multiply.outer(y, self.freqs[:, 1]))
        return 0.5 + np.sum(self.amps * np.sin(arg + self.phases), axis=-1)


def render_plane(pose: Pose, K: CameraIntrinsics, size: tuple[int, int], plane_depth: float,
                 texture: PlaneTexture, tilt: float = 0.0):
    """Image and depth of the plane n.X = plane_depth (world frame) seen from camera-to-world ``pose``.

    The plane normal is the world z axis rotated by ``tilt`` radians about x.
    Returns (image HxW, depth HxW); pixels whose ray misses the plane get depth inf.
    """
    W, H = size
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])  # camera frame, z = 1
    normal = np.array([0.0, math.sin(tilt), math.cos(tilt)])
    R, c = pose.rotation, pose.translation
    rays_w = np.tensordot(R, rays, axes=1)
    denom = np.tensordot(normal, rays_w, axes=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = (plane_depth - normal @ c) / denom
    hit = np.isfinite(depth) & (depth > 0)
    depth = np.where(hit, depth, np.inf)
    X = c[:, None, None] + rays_w * np.where(hit, depth, 0.0)
    # In-plane coordinates: e1 = x axis, e2 = normal x e1.
    e1 = np.array([1.0, 0.0, 0.0])
    e2 = np.cross(normal, e1)
    image = texture(np.tensordot(e1, X, axes=1), np.tensordot(e2, X, axes=1))
    return np.where(hit, image, 0.0), depth


def generate_planar_scene(cfg: SceneConfig, n_frames: int = 2, texture_seed: int = 0,
                          motion: str = "lateral", step: float = 0.1, tilt: float = 0.0) -> SyntheticSequence:
    """Textured plane at mid depth with analytic images and dense depth per frame.

    ``motion`` is "lateral" (pure x translation of ``step`` per frame) or
    "random" (small random rotation and translation).  Texture frequencies stay
    below 1/64 cycle per pixel at the plane depth so bilinear resampling error
    is below 1e-3.
    """
    rng = np.random.default_rng(cfg.seed)
    K = cfg.intrinsics
    z0 = 0.5 * (cfg.depth_range[0] + cfg.depth_range[1])
    texture = PlaneTexture.random(np.random.default_rng(texture_seed), max_freq=K.fx / (64.0 * z0))
    poses = [Pose()]
    for _ in range(1, n_frames):
        if motion == "lateral":
            rel = Pose(np.eye(3), [step, 0.0, 0.0])
        elif motion == "random":
            w = rng.normal(scale=math.radians(0.5), size=3)
            rel = se3_exp(np.concatenate([w, rng.normal(scale=step, size=3)]))
        else:
            raise ValueError(f"unknown planar motion {motion!r}")
        poses.append(poses[-1] @ rel)
    # Landmarks: points on the plane seen by the first camera.
    W, H = cfg.image_size
    u = rng.uniform(0, W, cfg.n_points)
    v = rng.uniform(0, H, cfg.n_points)
    _, depth0 = render_plane(poses[0], K, cfg.image_size, z0, texture, tilt)
    iu, iv = np.floor(u).astype(int), np.floor(v).astype(int)
    ray = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)])
    normal = np.array([0.0, math.sin(tilt), math.cos(tilt)])
    landmarks = ray * (z0 / (normal @ ray))
    if not np.all(np.isfinite(depth0[iv, iu])):
        raise DegenerateError("plane not visible from the first camera")
    descriptors = _unit_columns(rng.normal(size=(cfg.descriptor_dim, cfg.n_points)))
    frames = []
    for T in poses:
        image, depth = render_plane(T, K, cfg.image_size, z0, texture, tilt)
        kp, ids = _observe(cfg, T, landmarks, descriptors, np.arange(cfg.n_points), rng)
        frames.append(SyntheticFrame(kp, ids, depth, image))
    return SyntheticSequence(cfg, landmarks, descriptors, Trajectory(poses), frames)


def inject_dynamic_outliers(frame: KeypointFrame, rate: float, rng: np.random.Generator):
    """Move a random ``rate`` fraction of keypoints to uniform pixels, keeping descriptors.

    Unlike the generator's outliers these still match across frames, like
    points on an independently moving object.  Returns (frame, moved mask).
    """
    W, H = frame.image_size
    moved = rng.uniform(size=len(frame)) < rate
    p = np.array(frame.positions)
    k = int(moved.sum())
    p[:, moved] = np.stack([rng.uniform(0, W, k), rng.uniform(0, H, k)])
    return KeypointFrame(p, frame.descriptors, frame.scores, frame.depths, frame.image_size), moved

"""Trajectory and keypoint evaluation metrics.

Trajectory side: closed-form Sim(3) alignment of positions and KITTI-style
relative drift over 100..800 m sub-sequences.  Keypoint side: repeatability,
localization error, matching score and corner-based homography accuracy
under a known homography.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateError, Kp3dError
from .geometry import Pose, Sim3, apply_homography, inverse, rotation_angle

REFIT_ROUNDS = 5
DRIFT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered camera-to-world poses."""

    poses: tuple

    def __post_init__(self):
        poses = tuple(self.poses)
        if len(poses) < 2:
            raise Kp3dError("a trajectory needs at least two poses")
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> Pose:
        return self.poses[i]

    @property
    def positions(self) -> np.ndarray:
        return np.stack([T.translation for T in self.poses], axis=1)

    def path_lengths(self) -> np.ndarray:
        """Accumulated distance travelled up to each pose."""
        steps = np.linalg.norm(np.diff(self.positions, axis=1), axis=0)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def aligned(self, sim: Sim3) -> "Trajectory":
        return Trajectory([sim.apply_to_pose(T) for T in self.poses])


def umeyama_sim3(est: Trajectory, gt: Trajectory) -> Sim3:
    """Similarity (s, R, t) minimising sum ||gt_i - (s R est_i + t)||^2 over positions."""
    if len(est) != len(gt):
        raise Kp3dError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if len(est) < 3:
        raise DegenerateError("Sim(3) alignment needs at least 3 poses")
    x, y = est.positions, gt.positions
    mx, my = x.mean(axis=1), y.mean(axis=1)
    xc, yc = x - mx[:, None], y - my[:, None]
    n = x.shape[1]
    var_x = np.sum(xc * xc) / n
    cov = yc @ xc.T / n
    U, S, Vt = np.linalg.svd(cov)
    if var_x <= 1e-24 or S[0] == 0:
        raise DegenerateError("trajectory positions have no spread")
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[2] = -1
    R = U @ np.diag(d) @ Vt
    s = float(np.sum(S * d) / var_x)
    t = my - s * R @ mx
    return Sim3(s, Pose(R, t))


@dataclass(frozen=True)
class DriftResult:
    t_rel: float  # percent
    r_rel: float  # degrees per 100 m
    n_segments: int


def _first_frame_at_distance(dist: np.ndarray, first: int, length: float) -> int:
    j = int(np.searchsorted(dist, dist[first] + length, side="left"))
    return j if j < dist.size else -1


def kitti_drift(est: Trajectory, gt: Trajectory, lengths: Sequence[float] = DRIFT_LENGTHS,
                step: int = 1) -> DriftResult:
    """Average relative translation (%) and rotation (deg / 100 m) drift.

    For every start frame (stride ``step``) and every length L, the segment
    ends at the first frame whose accumulated ground-truth distance reaches
    L; segments running past the end are skipped.
    """
    if len(est) != len(gt):
        raise Kp3dError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    dist = gt.path_lengths()
    t_errs, r_errs = [], []
    for i in range(0, len(gt), step):
        gi_inv = inverse(gt[i])
        ei_inv = inverse(est[i])
        for L in lengths:
            j = _first_frame_at_distance(dist, i, L)
            if j < 0:
                continue
            d_gt = gi_inv @ gt[j]
            d_est = ei_inv @ est[j]
            E = inverse(d_gt) @ d_est
            t_errs.append(np.linalg.norm(E.translation) / L)
            r_errs.append(rotation_angle(E.rotation) / L)
    if not t_errs:
        raise Kp3dError(f"trajectory ({dist[-1]:.1f} m) shorter than the shortest evaluation length {min(lengths)} m")
    return DriftResult(
        float(np.mean(t_errs) * 100.0),
        float(np.degrees(np.mean(r_errs)) * 100.0),
        len(t_errs),
    )


# -- keypoint metrics --------------------------------------------------------------

@dataclass(frozen=True)
class KeypointMetricConfig:
    distance_threshold_px: float = 3.0
    n_keypoints_homography: int = 300
    homography_ransac_iters: int = 5000
    homography_threshold_px: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if min(self.distance_threshold_px, self.n_keypoints_homography,
               self.homography_ransac_iters, self.homography_threshold_px) <= 0:
            raise ValueError("keypoint metric parameters must be positive")


def _in_view(p: np.ndarray, valid: np.ndarray, image_size) -> np.ndarray:
    if image_size is None:
        return valid
    W, H = image_size
    with np.errstate(invalid="ignore"):
        return valid & (p[0] >= 0) & (p[0] < W) & (p[1] >= 0) & (p[1] < H)


def _nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each column of a, the index of and distance to its nearest column of b."""
    if b.shape[1] == 0:
        return np.full(a.shape[1], -1), np.full(a.shape[1], np.inf)
    d = np.sqrt(((a[:, :, None] - b[:, None, :]) ** 2).sum(axis=0))
    idx = np.argmin(d, axis=1)
    return idx, d[np.arange(a.shape[1]), idx]


def _warped_associations(kp_a, kp_b, H_gt, image_size_b):
    warped, valid = apply_homography(kp_a, H_gt, return_mask=True)
    shared = _in_view(warped, valid, image_size_b)
    _, dist = _nearest(warped[:, shared], np.asarray(kp_b, dtype=np.float64).reshape(2, -1))
    return shared, dist


def repeatability(kp_a, kp_b, H_gt, threshold: float = 3.0, image_size_b=None) -> float:
    """Fraction of a's keypoints (warped into b's view) with a b keypoint within threshold."""
    shared, dist = _warped_associations(kp_a, kp_b, H_gt, image_size_b)
    n = int(shared.sum())
    return float(np.sum(dist <= threshold) / n) if n else 0.0


def localization_error(kp_a, kp_b, H_gt, threshold: float = 3.0, image_size_b=None) -> float:
    """Mean distance of associated (within threshold) pairs; NaN when none associate."""
    _, dist = _warped_associations(kp_a, kp_b, H_gt, image_size_b)
    ok = dist <= threshold
    return float(dist[ok].mean()) if np.any(ok) else math.nan


def matching_score(frame_a, frame_b, H_gt, threshold: float = 3.0) -> float:
    """Correct reciprocal descriptor matches over a's keypoints inside b's view."""
    from .matching import reciprocal_match
    warped, valid = apply_homography(frame_a.positions, H_gt, return_mask=True)
    shared = _in_view(warped, valid, frame_b.image_size)
    n = int(shared.sum())
    if n == 0:
        return 0.0
    m = reciprocal_match(frame_a, frame_b)
    i, j = m.target_idx, m.context_idx
    err = np.linalg.norm(warped[:, i] - frame_b.positions[:, j], axis=0)
    correct = shared[i] & (err <= threshold)
    return float(correct.sum() / n)


def image_corners(image_size) -> np.ndarray:
    W, H = image_size
    return np.array([[0.0, W - 1.0, 0.0, W - 1.0], [0.0, 0.0, H - 1.0, H - 1.0]])


# -- homography estimation ---------------------------------------------------------

def _normalizing_transform(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=1)
    d = np.mean(np.linalg.norm(p - c[:, None], axis=0))
    s = math.sqrt(2) / d if d > 0 else 1.0
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def homography_dlt(src, dst) -> np.ndarray:
    """Normalized DLT homography from >= 4 correspondences, scaled so H[2, 2] = 1 when possible."""
    src = np.asarray(src, dtype=np.float64).reshape(2, -1)
    dst = np.asarray(dst, dtype=np.float64).reshape(2, -1)
    n = src.shape[1]
    if n < 4:
        raise DegenerateError("homography needs at least 4 correspondences")
    Ts, Td = _normalizing_transform(src), _normalizing_transform(dst)
    a = Ts @ np.vstack([src, np.ones(n)])
    b = Td @ np.vstack([dst, np.ones(n)])
    A = np.zeros((2 * n, 9))
    for k in range(n):
        x, y, w = a[:, k]
        u, v, z = b[:, k]
        A[2 * k] = [0, 0, 0, -z * x, -z * y, -z * w, v * x, v * y, v * w]
        A[2 * k + 1] = [z * x, z * y, z * w, 0, 0, 0, -u * x, -u * y, -u * w]
    _, S, Vt = np.linalg.svd(A)
    if n >= 4 and S[7] < 1e-10 * S[0]:
        raise DegenerateError("degenerate point configuration for homography")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return normalize_homography(H)


def normalize_homography(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if abs(H[2, 2]) > 1e-12 * np.abs(H).max():
        return H / H[2, 2]
    return H / np.linalg.norm(H)


def _collinear(p: np.ndarray, tol: float = 1e-6) -> bool:
    """True if any three of the four columns are (nearly) collinear."""
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = p[:, i], p[:, j], p[:, k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        scale = max(np.linalg.norm(b - a), np.linalg.norm(c - a), 1e-300) ** 2
        if area <= tol * scale:
            return True
    return False


def symmetric_transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """max(forward, backward) transfer distance per correspondence (inf where undefined)."""
    try:
        H_inv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(src.shape[1], np.inf)
    fwd, vf = apply_homography(src, H, return_mask=True)
    bwd, vb = apply_homography(dst, H_inv, return_mask=True)
    e = np.maximum(np.linalg.norm(fwd - dst, axis=0), np.linalg.norm(bwd - src, axis=0))
    e[~(vf & vb)] = np.inf
    return e


def estimate_homography_ransac(src, dst, max_iterations: int = 5000, threshold: float = 3.0,
                               seed: int = 0, confidence: float = 0.995) -> tuple[np.ndarray, np.ndarray]:
    """Robust homography src -> dst from 2xN correspondences.

    Returns (H, inlier mask).  Hypotheses are 4-point normalized DLT fits on
    non-degenerate samples; the best consensus is refit with DLT.
    """
    src = np.asarray(src, dtype=np.float64).reshape(2, -1)
    dst = np.asarray(dst, dtype=np.float64).reshape(2, -1)
    n = src.shape[1]
    if n < 4:
        raise DegenerateError(f"homography needs at least 4 matches, got {n}")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, 0
    needed = math.inf
    it = 0
    while it < max_iterations and it < needed:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        if _collinear(src[:, sample]) or _collinear(dst[:, sample]):
            continue
        try:
            H = homography_dlt(src[:, sample], dst[:, sample])
        except (DegenerateError, np.linalg.LinAlgError):
            continue
        mask = symmetric_transfer_error(H, src, dst) < threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            w = count / n
            needed = 0 if w >= 1 else math.log(1 - confidence) / math.log(1 - w ** 4)
    if best_mask is None or best_count < 4:
        raise DegenerateError("no non-degenerate homography hypothesis with 4 inliers")
    H = homography_dlt(src[:, best_mask], dst[:, best_mask])
    # Re-score with the refit model and refit while the consensus grows.
    for _ in range(REFIT_ROUNDS):
        mask = symmetric_transfer_error(H, src, dst) < threshold
        if mask.sum() < best_mask.sum() or np.array_equal(mask, best_mask):
            break
        best_mask = mask
        H = homography_dlt(src[:, best_mask], dst[:, best_mask])
    return H, best_mask


@dataclass(frozen=True)
class HomographyResult:
    corner_error: float  # inf when estimation failed
    accurate: dict = field(default_factory=dict)  # eps -> bool


def homography_accuracy(frame_a, frame_b, H_gt, image_size=None, eps_list: Iterable[float] = (1, 3, 5),
                        cfg: KeypointMetricConfig = KeypointMetricConfig()) -> HomographyResult:
    """Corner-transfer accuracy of a homography estimated from reciprocal matches.

    Uses the ``cfg.n_keypoints_homography`` highest-scoring keypoints of each
    frame.  Estimation failure counts as inaccurate at every threshold.
    """
    from .matching import reciprocal_match
    eps_list = tuple(eps_list)
    size = image_size if image_size is not None else frame_a.image_size
    if size is None:
        raise Kp3dError("image size needed for corner warping")
    a = frame_a.top_k(cfg.n_keypoints_homography)
    b = frame_b.top_k(cfg.n_keypoints_homography)
    m = reciprocal_match(a, b)
    try:
        H_est, _ = estimate_homography_ransac(
            a.positions[:, m.target_idx], b.positions[:, m.context_idx],
            cfg.homography_ransac_iters, cfg.homography_threshold_px, cfg.seed,
        )
        corners = image_corners(size)
        c_est, ok_est = apply_homography(corners, normalize_homography(H_est), return_mask=True)
        c_gt = apply_homography(corners, normalize_homography(H_gt))
        err = float(np.mean(np.linalg.norm(c_est - c_gt, axis=0))) if np.all(ok_est) else math.inf
    except DegenerateError:
        err = math.inf
    return HomographyResult(err, {e: bool(err < e) for e in eps_list})


def homography_accuracy_rate(results: Sequence[HomographyResult], eps_list=(1, 3, 5)) -> dict:
    """Fraction of image pairs accurate at each threshold."""
    if not results:
        return {e: 0.0 for e in eps_list}
    return {e: float(np.mean([r.corner_error < e for r in results])) for e in eps_list}


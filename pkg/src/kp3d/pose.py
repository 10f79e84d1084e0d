"""Two-stage relative pose estimation.

Stage one is a robust 3D-2D fit: Gauss-Newton PnP on SE(3) inside RANSAC.
Stage two lifts the context inliers with depths re-projected through the
stage-one pose and solves the 3D-3D alignment in closed form (orthogonal
Procrustes).  Only stage two is differentiable; ``procrustes_backward``
carries gradients from (R, t) back onto both point clouds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError, EstimationFailedError, Kp3dError, NonConvergenceError
from .geometry import CameraIntrinsics, Pose, as_points, project, se3_exp, transform, unproject
from .matching import CorrespondenceSet, KeypointFrame, reciprocal_match

log = logging.getLogger(__name__)

MIN_SAMPLE = 4


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 256
    inlier_threshold_px: float = 3.0
    min_sample: int = MIN_SAMPLE
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier_threshold_px must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.min_sample != MIN_SAMPLE:
            raise ValueError("minimal PnP sample size is fixed at 4")


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    initial: Pose
    refined: Pose
    inliers: CorrespondenceSet
    residual_rms_px: float
    # Inlier clouds fed to the closed-form stage (target frame, lifted context).
    target_points: Optional[np.ndarray] = field(default=None, repr=False)
    context_points: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def num_inliers(self) -> int:
        return self.inliers.num_inliers


def reprojection_jacobian(Q: np.ndarray, p_c: np.ndarray, K: CameraIntrinsics):
    """Residuals r = pi(Q) - p_c (2N,) and their Jacobian (2N, 6) with respect to
    a left-multiplied twist (omega, v) applied to the camera-frame points Q."""
    X, Y, Z = Q
    iz = 1.0 / Z
    u = K.fx * X * iz + K.cx
    v = K.fy * Y * iz + K.cy
    r = np.empty(2 * Q.shape[1])
    r[0::2] = u - p_c[0]
    r[1::2] = v - p_c[1]
    # d pi / dQ
    du = np.stack([K.fx * iz, np.zeros_like(Z), -K.fx * X * iz * iz], axis=1)
    dv = np.stack([np.zeros_like(Z), K.fy * iz, -K.fy * Y * iz * iz], axis=1)
    # dQ / d(omega, v) = [-[Q]x | I]
    Qt = Q.T

    def chain(dpi):
        rot = np.cross(Qt, dpi)  # row of dpi @ -[Q]x
        return np.concatenate([rot, dpi], axis=1)

    J = np.empty((2 * Q.shape[1], 6))
    J[0::2] = chain(du)
    J[1::2] = chain(dv)
    return r, J


def _check_rank(J: np.ndarray):
    norms = np.linalg.norm(J, axis=0)
    if np.any(norms == 0):
        raise DegenerateError("pose parameter has no influence on the residual")
    s = np.linalg.svd(J / norms, compute_uv=False)
    if s[-1] < 1e-6 * s[0]:
        raise DegenerateError(f"rank-deficient PnP normal equations (sv ratio {s[-1] / s[0]:.2e})")


def pnp_gauss_newton(
    P_t,
    p_c,
    K: CameraIntrinsics,
    init: Optional[Pose] = None,
    max_iterations: int = 100,
    step_tol: float = 1e-10,
    damping: float = 1e-6,
) -> Pose:
    """Minimise the reprojection error of P_t (target frame) against pixels p_c."""
    P_t = as_points(P_t)
    p_c = as_points(p_c, 2)
    if P_t.shape[1] < MIN_SAMPLE:
        raise DegenerateError(f"PnP needs at least 4 points, got {P_t.shape[1]}")
    X = init if init is not None else Pose()
    prev_cost = math.inf
    growth = 0
    for it in range(max_iterations):
        Q = transform(X, P_t)
        if np.any(Q[2] <= 0):
            raise NonConvergenceError(f"points moved behind the camera at iteration {it}")
        r, J = reprojection_jacobian(Q, p_c, K)
        if it == 0:
            _check_rank(J)
        cost = float(r @ r)
        growth = growth + 1 if cost > prev_cost else 0
        if growth >= 5:
            raise NonConvergenceError("reprojection error grew for 5 consecutive iterations")
        prev_cost = cost
        H = J.T @ J
        H[np.diag_indices(6)] += damping
        delta = -np.linalg.solve(H, J.T @ r)
        if not np.all(np.isfinite(delta)):
            raise NonConvergenceError("non-finite Gauss-Newton step")
        X = se3_exp(delta) @ X
        if np.linalg.norm(delta) < step_tol:
            break
    return X


def reprojection_errors(X: Pose, P_t: np.ndarray, p_c: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Per-point pixel error; points behind the camera get +inf."""
    uv, valid = project(transform(X, P_t), K, return_mask=True)
    err = np.hypot(uv[0] - p_c[0], uv[1] - p_c[1])
    err[~valid] = np.inf
    return err


def _required_iterations(inlier_ratio: float, confidence: float, sample: int) -> float:
    good = inlier_ratio ** sample
    if good <= 0:
        return math.inf
    if good >= 1:
        return 0
    return math.log(1 - confidence) / math.log(1 - good)


def pnp_ransac(P_t, p_c, K: CameraIntrinsics, cfg: RansacConfig = RansacConfig()) -> PoseEstimate:
    """Robust PnP. Hypotheses come from Gauss-Newton on 4-point samples started at identity."""
    P_t = as_points(P_t)
    p_c = as_points(p_c, 2)
    n = P_t.shape[1]
    if n < cfg.min_sample:
        raise EstimationFailedError(f"{n} correspondences, need at least {cfg.min_sample}")
    rng = np.random.default_rng(cfg.seed)
    thresh = cfg.inlier_threshold_px
    best_mask = None
    best_count = 0
    it = 0
    while it < cfg.max_iterations:
        sample = rng.choice(n, size=cfg.min_sample, replace=False)
        it += 1
        try:
            X = pnp_gauss_newton(P_t[:, sample], p_c[:, sample], K)
        except (DegenerateError, NonConvergenceError, np.linalg.LinAlgError):
            continue
        mask = reprojection_errors(X, P_t, p_c, K) < thresh
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            if it >= _required_iterations(count / n, cfg.confidence, cfg.min_sample):
                break
        elif it >= _required_iterations(best_count / n, cfg.confidence, cfg.min_sample):
            break
    # A minimal sample can fit itself by chance; only outside support counts as evidence.
    if best_count <= cfg.min_sample:
        raise EstimationFailedError(
            f"no hypothesis supported beyond its own {cfg.min_sample}-point sample after {it} hypotheses")

    # Refit on the consensus set until it stops changing.
    mask = best_mask
    X = None
    for _ in range(5):
        try:
            X = pnp_gauss_newton(P_t[:, mask], p_c[:, mask], K, init=X)
        except (DegenerateError, NonConvergenceError) as exc:
            raise EstimationFailedError(f"refit on consensus set failed: {exc}") from exc
        new_mask = reprojection_errors(X, P_t, p_c, K) < thresh
        if new_mask.sum() < cfg.min_sample or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    err = reprojection_errors(X, P_t, p_c, K)[mask]
    rms = float(np.sqrt(np.mean(err ** 2)))
    idx = np.arange(n)
    return PoseEstimate(X, X, CorrespondenceSet(np.stack([idx, idx], axis=1), mask), rms)


def lift_context(p_c, P_t, X0: Pose, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift context pixels using the depth of the target points seen through X0.

    Returns the lifted points for the kept pairs and the boolean keep-mask;
    pairs whose re-projected depth is not positive are dropped.
    """
    p_c = as_points(p_c, 2)
    d_c = transform(X0, P_t)[2]
    keep = d_c > 0
    return unproject(p_c[:, keep], d_c[keep], K), keep


def _center(P):
    c = P.mean(axis=1)
    return P - c[:, None], c


def _svd_alignment(P_t, P_c):
    A, c_t = _center(P_t)
    B, c_c = _center(P_c)
    H = A @ B.T
    U, S, Vt = np.linalg.svd(H)
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) > 0 else -1.0
    D = np.diag([1.0, 1.0, d])
    R = V @ D @ U.T
    return R, c_t, c_c, A, B, U, S, V, D


def procrustes(P_t, P_c) -> Pose:
    """Closed-form rigid transform minimising sum ||P_c - (R P_t + t)||^2."""
    P_t = as_points(P_t)
    P_c = as_points(P_c)
    if P_t.shape != P_c.shape:
        raise DegenerateError(f"point cloud shapes differ: {P_t.shape} vs {P_c.shape}")
    if P_t.shape[1] < 3:
        raise DegenerateError("need at least 3 point pairs")
    R, c_t, c_c, *_, S, _, _ = _svd_alignment(P_t, P_c)
    if S[1] < 1e-12 * S[0] or S[0] == 0:
        raise DegenerateError("collinear or coincident point cloud")
    # Kabsch output is orthonormal to round-off; snap det/orthogonality drift.
    return Pose(R, c_c - R @ c_t)


@dataclass(frozen=True, eq=False)
class ProcrustesGradient:
    P_t: np.ndarray
    P_c: np.ndarray
    used_fallback: bool = False


def procrustes_backward(P_t, P_c, grad_R, grad_t, gap_tol: float = 1e-8) -> ProcrustesGradient:
    """Gradients of a scalar loss with respect to both clouds, given dL/dR and dL/dt."""
    P_t = as_points(P_t)
    P_c = as_points(P_c)
    grad_R = np.asarray(grad_R, dtype=np.float64).reshape(3, 3)
    grad_t = np.asarray(grad_t, dtype=np.float64).reshape(3)
    R, c_t, c_c, A, B, U, S, V, D = _svd_alignment(P_t, P_c)
    n = P_t.shape[1]

    # t = c_c - R c_t contributes to dL/dR as well.
    G = grad_R - np.outer(grad_t, c_t)
    M = V.T @ G @ U
    X = M @ D
    Y = D @ M
    Gp = np.zeros((3, 3))
    diag = np.diag(D)
    for i in range(3):
        for j in range(i + 1, 3):
            a = X[i, j] - X[j, i]
            b = Y[i, j] - Y[j, i]
            if diag[i] == diag[j]:
                # a == b here and the 1/(s_j^2 - s_i^2) factor reduces to 1/(s_i + s_j).
                denom = S[i] + S[j]
                if denom <= gap_tol * S[0]:
                    return _procrustes_backward_fd(P_t, P_c, grad_R, grad_t)
                Gp[i, j] = -a / denom
                Gp[j, i] = a / denom
            else:
                gap = S[j] - S[i]
                if abs(gap) <= gap_tol * S[0]:
                    return _procrustes_backward_fd(P_t, P_c, grad_R, grad_t)
                k = 1.0 / (S[j] ** 2 - S[i] ** 2)
                Gp[i, j] = k * (a * S[i] - b * S[j])
                Gp[j, i] = k * (a * S[j] - b * S[i])
    G_H = U @ Gp @ V.T
    G_A = G_H @ B
    G_B = G_H.T @ A
    # Centering: project out the mean, then add the centroid paths.
    G_A -= G_A.mean(axis=1, keepdims=True)
    G_B -= G_B.mean(axis=1, keepdims=True)
    g_ct = -(R.T @ grad_t)
    g_cc = grad_t
    return ProcrustesGradient(G_A + g_ct[:, None] / n, G_B + g_cc[:, None] / n)


def _procrustes_backward_fd(P_t, P_c, grad_R, grad_t, h: float = 1e-6) -> ProcrustesGradient:
    def loss(a, b):
        X = procrustes(a, b)
        return float(np.sum(grad_R * X.rotation) + grad_t @ X.translation)

    out = []
    for which in (0, 1):
        base = [P_t.copy(), P_c.copy()]
        g = np.zeros_like(base[which])
        for idx in np.ndindex(*g.shape):
            plus = [x.copy() for x in base]
            minus = [x.copy() for x in base]
            plus[which][idx] += h
            minus[which][idx] -= h
            g[idx] = (loss(*plus) - loss(*minus)) / (2 * h)
        out.append(g)
    return ProcrustesGradient(out[0], out[1], used_fallback=True)


def estimate_relative_pose(
    target: KeypointFrame,
    context: KeypointFrame,
    K: CameraIntrinsics,
    cfg: RansacConfig = RansacConfig(),
    max_match_distance: Optional[float] = None,
) -> PoseEstimate:
    """Match, lift, PnP-RANSAC, then refine the pose in closed form on the inliers.

    The returned ``inliers`` indexes the reciprocal matches between the frames;
    matches whose target depth is unknown are kept with a False mask entry.
    """
    if target.depths is None:
        raise EstimationFailedError("target frame has no depths")
    matches = reciprocal_match(target, context, max_match_distance)
    i, j = matches.target_idx, matches.context_idx
    has_depth = ~np.isnan(target.depths[i])
    if has_depth.sum() < cfg.min_sample:
        raise EstimationFailedError(f"only {int(has_depth.sum())} usable matches")
    sel = np.flatnonzero(has_depth)
    p_t = target.positions[:, i[sel]]
    p_c = context.positions[:, j[sel]]
    P_t = unproject(p_t, target.depths[i[sel]], K)
    stage1 = pnp_ransac(P_t, p_c, K, cfg)
    inl = stage1.inliers.inlier_mask
    P_c, keep = lift_context(p_c[:, inl], P_t[:, inl], stage1.initial, K)
    P_t_in = P_t[:, inl][:, keep]
    if P_t_in.shape[1] < 3:
        raise EstimationFailedError("too few inliers with positive lifted depth")
    refined = procrustes(P_t_in, P_c)
    mask = np.zeros(len(matches), dtype=bool)
    mask[sel[np.flatnonzero(inl)[keep]]] = True
    return PoseEstimate(
        stage1.initial,
        refined,
        matches.with_mask(mask),
        stage1.residual_rms_px,
        target_points=P_t_in,
        context_points=P_c,
    )



@dataclass(frozen=True)
class FrameDiagnostics:
    frame: int
    matches: int
    inliers: int
    rms_px: float
    fallback: bool


def track_frames(frames, K: CameraIntrinsics, cfg: RansacConfig = RansacConfig(),
                 max_match_distance: Optional[float] = None,
                 reorthonormalize_every: int = 1000) -> tuple[list[Pose], list[FrameDiagnostics]]:
    """Chain frame-to-frame estimates into camera-to-world poses anchored at identity.

    ``frames`` may be any iterable (e.g. a lazy loader).  A pair whose
    estimation fails contributes identity motion and is flagged in the
    diagnostics instead of aborting the run.
    """
    it = iter(frames)
    try:
        current = next(it)
    except StopIteration:
        raise Kp3dError("no frames to track") from None
    poses = [Pose.identity()]
    diags = []
    for k, nxt in enumerate(it, start=1):
        try:
            est = estimate_relative_pose(current, nxt, K, cfg, max_match_distance)
            motion = est.refined
            diags.append(FrameDiagnostics(k, len(est.inliers), est.num_inliers, float(est.residual_rms_px), False))
        except Kp3dError as exc:
            log.warning("frame %d: %s; using identity motion", k, exc)
            motion = Pose.identity()
            diags.append(FrameDiagnostics(k, 0, 0, math.nan, True))
        T = poses[-1] @ motion.inverse()
        if k % reorthonormalize_every == 0:
            T = T.orthonormalized()
        poses.append(T)
        current = nxt
    if len(poses) < 2:
        raise Kp3dError("need at least two frames")
    return poses, diags


@dataclass(frozen=True, eq=False)
class KeypointGradient:
    """Gradients with respect to the inlier keypoints used by the closed-form stage."""

    target_positions: np.ndarray
    target_depths: np.ndarray
    context_positions: np.ndarray
    used_fallback: bool


def relative_pose_backward(estimate: PoseEstimate, K: CameraIntrinsics, grad_R, grad_t) -> KeypointGradient:
    """Chain dL/dR, dL/dt through Procrustes and the two unprojections.

    The stage-one pose (and hence the lifted context depth) is held fixed,
    as is the inlier selection.
    """
    P_t, P_c = estimate.target_points, estimate.context_points
    g = procrustes_backward(P_t, P_c, grad_R, grad_t)
    d_t, d_c = P_t[2], P_c[2]
    p_t = project(P_t, K)
    gp_t = np.stack([g.P_t[0] * d_t / K.fx, g.P_t[1] * d_t / K.fy])
    gd_t = g.P_t[0] * (p_t[0] - K.cx) / K.fx + g.P_t[1] * (p_t[1] - K.cy) / K.fy + g.P_t[2]
    gp_c = np.stack([g.P_c[0] * d_c / K.fx, g.P_c[1] * d_c / K.fy])
    return KeypointGradient(gp_t, gd_t, gp_c, g.used_fallback)

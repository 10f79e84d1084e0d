"""Analytic-versus-finite-difference checks for every differentiable output.

Each check builds a seeded random instance away from non-smooth points and
compares the analytic gradient with central differences (h = 1e-6).  The
error measure is max|analytic - numeric| / max|numeric|.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .geometry import CameraIntrinsics, Pose, se3_exp, transform, unproject
from .pose import procrustes, procrustes_backward

FD_STEP = 1e-6
TOLERANCE = 1e-4

K_TEST = CameraIntrinsics(200.0, 210.0, 32.0, 24.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    rel_error: float

    @property
    def passed(self) -> bool:
        return self.rel_error < TOLERANCE


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def _worst(pairs) -> float:
    return max(relative_error(a, n) for a, n in pairs)


def _random_pose(rng, max_angle=0.3, t_scale=1.0) -> Pose:
    w = rng.normal(size=3)
    w *= rng.uniform(0.05, max_angle) / np.linalg.norm(w)
    return se3_exp(np.concatenate([w, rng.normal(size=3) * t_scale]))


def _off_grid(rng, lo, hi, size):
    """Uniform samples kept at least 0.05 away from integer grid lines."""
    x = rng.uniform(lo, hi, size)
    frac = x - np.floor(x)
    return np.floor(x) + np.clip(frac, 0.05, 0.95)


# -- individual checks ----------------------------------------------------------

def check_procrustes(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    P_t = rng.normal(size=(3, 20)) * np.array([[2.0], [1.5], [1.0]]) + np.array([[0], [0], [6.0]])
    X = _random_pose(rng)
    P_c = transform(X, P_t) + 0.05 * rng.normal(size=P_t.shape)
    G_R = rng.normal(size=(3, 3))
    g_t = rng.normal(size=3)

    def loss(a, b):
        Y = procrustes(a, b)
        return float(np.sum(G_R * Y.rotation) + g_t @ Y.translation)

    g = procrustes_backward(P_t, P_c, G_R, g_t)
    err = _worst([
        (g.P_t, numerical_gradient(lambda a: loss(a, P_c), P_t)),
        (g.P_c, numerical_gradient(lambda b: loss(P_t, b), P_c)),
    ])
    return CheckResult("procrustes_backward", seed, err)


def _keypoint_instance(rng, n=12):
    K = K_TEST
    p_t = np.stack([rng.uniform(5, 59, n), rng.uniform(5, 43, n)])
    d_t = rng.uniform(3, 8, n)
    X = _random_pose(rng, max_angle=0.1, t_scale=0.2)
    Q = transform(X, unproject(p_t, d_t, K))
    p_c = K.matrix[:2] @ (Q / Q[2]) + rng.normal(size=(2, n)) * 2.0
    return K, p_t, d_t, p_c, X


def check_geometric(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    K, p_t, d_t, p_c, X = _keypoint_instance(rng)
    res = losses.keypoint_geometric_loss(p_t, d_t, p_c, X, K)

    def f(pt=p_t, dt=d_t, pc=p_c, pose=X):
        return losses.keypoint_geometric_loss(pt, dt, pc, pose, K).value

    pose_fd = numerical_gradient(lambda x: f(pose=se3_exp(x) @ X), np.zeros(6))
    # R enters as an unconstrained matrix here, so warp without building a Pose.
    P = unproject(p_t, d_t, K)

    def f_raw(R):
        Q = R @ P + X.translation[:, None]
        return losses.geometric_loss(K.matrix[:2] @ (Q / Q[2]), p_c).value

    R_fd = numerical_gradient(f_raw, X.rotation)
    err = _worst([
        (res.grad["p_t"], numerical_gradient(lambda x: f(pt=x), p_t)),
        (res.grad["d_t"], numerical_gradient(lambda x: f(dt=x), d_t)),
        (res.grad["p_c"], numerical_gradient(lambda x: f(pc=x), p_c)),
        (res.grad["twist"], pose_fd),
        (res.grad["R"], R_fd),
        (res.grad["t"], numerical_gradient(lambda t: f(pose=Pose(X.rotation, t)), X.translation)),
    ])
    return CheckResult("geometric_loss", seed, err)


def check_descriptor(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    D, L, m = 16, 10, 0.2
    while True:
        f, fp, fn = (rng.normal(size=(D, L)) for _ in range(3))
        fp = f + 0.4 * fp
        fn = f + 0.45 * fn
        hinge = np.linalg.norm(f - fp, axis=0) - np.linalg.norm(f - fn, axis=0) + m
        if np.min(np.abs(hinge)) > 1e-3 and np.any(hinge > 0):
            break
    res = losses.descriptor_triplet_loss(f, fp, fn, m)
    err = _worst([
        (res.grad["anchors"], numerical_gradient(lambda x: losses.descriptor_triplet_loss(x, fp, fn, m).value, f)),
        (res.grad["positives"], numerical_gradient(lambda x: losses.descriptor_triplet_loss(f, x, fn, m).value, fp)),
        (res.grad["negatives"], numerical_gradient(lambda x: losses.descriptor_triplet_loss(f, fp, x, m).value, fn)),
    ])
    return CheckResult("descriptor_triplet_loss", seed, err)


def check_score(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    n = 15
    s_t, s_c = rng.uniform(0.05, 0.95, n), rng.uniform(0.05, 0.95, n)
    p_c = rng.uniform(0, 100, (2, n))
    p_w = p_c + rng.normal(size=(2, n)) * 3
    res = losses.score_loss(s_t, s_c, p_w, p_c)

    def f(a=s_t, b=s_c, c=p_w, d=p_c):
        return losses.score_loss(a, b, c, d).value

    err = _worst([
        (res.grad["s_t"], numerical_gradient(lambda x: f(a=x), s_t)),
        (res.grad["s_c"], numerical_gradient(lambda x: f(b=x), s_c)),
        (res.grad["p_warped"], numerical_gradient(lambda x: f(c=x), p_w)),
        (res.grad["p_c"], numerical_gradient(lambda x: f(d=x), p_c)),
    ])
    return CheckResult("score_loss", seed, err)


def check_photometric(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    C = 1 if seed % 2 == 0 else 3
    I_t = rng.uniform(0.1, 0.9, (9, 11, C))
    I_hat = np.clip(I_t + rng.choice([-1, 1], I_t.shape) * rng.uniform(0.01, 0.2, I_t.shape), 0.02, 0.98)
    mask = rng.uniform(size=(9, 11)) > 0.2
    res = losses.photometric_loss(I_t, I_hat, 0.85, mask)
    num = numerical_gradient(lambda x: losses.photometric_loss(I_t, x, 0.85, mask).value, I_hat)
    return CheckResult("photometric_loss", seed, relative_error(res.grad["I_hat"], num))


def check_smoothness(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    D = rng.uniform(1.0, 10.0, (8, 9))
    I = rng.uniform(0, 1, (8, 9, 3))
    res = losses.smoothness_loss(D, I)
    num = numerical_gradient(lambda x: losses.smoothness_loss(x, I).value, D)
    return CheckResult("smoothness_loss", seed, relative_error(res.grad["D"], num))


def check_depth_consistency(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    H, W, n = 12, 14, 10
    D_t = rng.uniform(2, 6, (H, W))
    D_c = rng.uniform(2, 6, (H, W))
    p_t = np.stack([_off_grid(rng, 0, W - 1, n), _off_grid(rng, 0, H - 1, n)])
    p_c = np.stack([_off_grid(rng, 0, W - 1, n), _off_grid(rng, 0, H - 1, n)])
    res = losses.keypoint_depth_consistency(D_t, p_t, D_c, p_c)
    d_t, d_c = rng.uniform(1, 5, n), rng.uniform(1, 5, n)
    plain = losses.depth_consistency_loss(d_t, d_c)
    err = _worst([
        (res.grad["p_t"], numerical_gradient(lambda x: losses.keypoint_depth_consistency(D_t, x, D_c, p_c).value, p_t)),
        (res.grad["p_c"], numerical_gradient(lambda x: losses.keypoint_depth_consistency(D_t, p_t, D_c, x).value, p_c)),
        (plain.grad["d_t"], numerical_gradient(lambda x: losses.depth_consistency_loss(x, d_c).value, d_t)),
        (plain.grad["d_c"], numerical_gradient(lambda x: losses.depth_consistency_loss(d_t, x).value, d_c)),
    ])
    return CheckResult("depth_consistency_loss", seed, err)


def check_bilinear(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    I = rng.uniform(0, 1, (7, 9, 3))
    m = 25
    coords = np.stack([_off_grid(rng, 0, 8, m), _off_grid(rng, 0, 6, m)])
    s = losses.bilinear_sample(I, coords)
    pairs = []
    for c in range(3):
        def f(x, c=c):
            return float(losses.bilinear_sample(I, x).values[:, c].sum())

        num = numerical_gradient(f, coords)
        pairs.append((np.stack([s.grad_u[:, c], s.grad_v[:, c]]), num))
    return CheckResult("bilinear_sample", seed, _worst(pairs))


CHECKS: dict[str, Callable[[int], CheckResult]] = {
    "procrustes_backward": check_procrustes,
    "geometric_loss": check_geometric,
    "descriptor_triplet_loss": check_descriptor,
    "score_loss": check_score,
    "photometric_loss": check_photometric,
    "smoothness_loss": check_smoothness,
    "depth_consistency_loss": check_depth_consistency,
    "bilinear_sample": check_bilinear,
}


def run_all(seed: int = 0, instances: int = 10) -> list[CheckResult]:
    return [check(seed + k) for check in CHECKS.values() for k in range(instances)]

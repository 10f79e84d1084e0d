"""Self-supervision objectives with analytic gradients.

Every loss returns a ``LossResult``: the scalar value and a dict of gradients
keyed by input name.  Non-smooth points use zero subgradients (|x| at 0,
hinge at its kink).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DimensionMismatchError, Kp3dError
from .geometry import CameraIntrinsics, Pose, as_points, project, transform, unproject

SSIM_C1 = 1e-4
SSIM_C2 = 9e-4


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.1
    beta4: float = 0.1
    gamma: float = 0.85
    margin: float = 0.2

    def __post_init__(self):
        for name, val in vars(self).items():
            if not val >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {val}")
        if self.gamma > 1:
            raise ValueError("gamma must lie in [0, 1]")

    def coefficients(self) -> dict[str, float]:
        """Effective multiplier of each sub-loss in the total objective."""
        return {
            "photo": 1.0,
            "smooth": self.beta3,
            "const": self.beta4,
            "geom": self.alpha,
            "desc": self.alpha * self.beta1,
            "score": self.alpha * self.beta2,
        }


class LossResult(NamedTuple):
    value: float
    grad: dict
    map: Optional[np.ndarray] = None


def as_image(I) -> np.ndarray:
    """Validate an intensity image and return it as H x W x C float64."""
    I = np.asarray(I, dtype=np.float64)
    if I.ndim == 2:
        I = I[:, :, None]
    if I.ndim != 3 or I.shape[2] not in (1, 3):
        raise Kp3dError(f"image must be HxW or HxWxC with C in (1, 3), got {I.shape}")
    if not np.all(np.isfinite(I)) or I.min(initial=0) < 0 or I.max(initial=0) > 1:
        raise Kp3dError("image values must be finite and within [0, 1]")
    return I


def as_depth_map(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise Kp3dError(f"depth map must be HxW, got {D.shape}")
    if not np.all(np.isfinite(D)) or np.any(D <= 0):
        raise Kp3dError("depth values must be positive and finite")
    return D


def _safe_unit(diff: np.ndarray):
    """Column norms and unit vectors of diff, with unit = 0 where the norm is 0."""
    norm = np.sqrt(np.sum(diff * diff, axis=0))
    unit = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
    return norm, unit


# -- keypoint losses ---------------------------------------------------------

def warp_keypoints(P_t, X: Pose, K: CameraIntrinsics) -> np.ndarray:
    """Project target-frame 3D keypoints into the context image through X."""
    return project(transform(X, P_t), K)


def geometric_loss(p_warped, p_c) -> LossResult:
    """Mean pixel distance between warped and matched context keypoints."""
    p_warped = as_points(p_warped, 2)
    p_c = as_points(p_c, 2)
    n = p_warped.shape[1]
    if n == 0:
        return LossResult(0.0, {"p_warped": np.zeros((2, 0)), "p_c": np.zeros((2, 0))})
    err, unit = _safe_unit(p_warped - p_c)
    g = unit / n
    return LossResult(float(err.mean()), {"p_warped": g, "p_c": -g})


def keypoint_geometric_loss(p_t, d_t, p_c, X: Pose, K: CameraIntrinsics) -> LossResult:
    """Geometric loss as a function of target keypoints, their depths and the pose.

    Pose gradients are given as dL/dR, dL/dt and as dL/d(twist) for a
    left-multiplied perturbation exp(twist) * X.
    """
    P = unproject(p_t, d_t, K)
    Q = transform(X, P)
    p_w = project(Q, K)
    res = geometric_loss(p_w, p_c)
    g_pw = res.grad["p_warped"]
    iz = 1.0 / Q[2]
    g_Q = np.stack([
        g_pw[0] * K.fx * iz,
        g_pw[1] * K.fy * iz,
        -(g_pw[0] * K.fx * Q[0] + g_pw[1] * K.fy * Q[1]) * iz * iz,
    ])
    g_P = X.rotation.T @ g_Q
    p_t = as_points(p_t, 2)
    d_t = np.asarray(d_t, dtype=np.float64).reshape(-1)
    grad = {
        "p_t": np.stack([g_P[0] * d_t / K.fx, g_P[1] * d_t / K.fy]),
        "d_t": g_P[0] * (p_t[0] - K.cx) / K.fx + g_P[1] * (p_t[1] - K.cy) / K.fy + g_P[2],
        "p_c": res.grad["p_c"],
        "R": g_Q @ P.T,
        "t": g_Q.sum(axis=1),
        "twist": np.concatenate([np.cross(Q.T, g_Q.T).sum(axis=0), g_Q.sum(axis=1)]),
    }
    return LossResult(res.value, grad)


def descriptor_triplet_loss(anchors, positives, negatives, margin: float = 0.2) -> LossResult:
    """Mean hinge max(0, |f - f+| - |f - f-| + margin) over D x L descriptor columns."""
    f = np.asarray(anchors, dtype=np.float64)
    fp = np.asarray(positives, dtype=np.float64)
    fn = np.asarray(negatives, dtype=np.float64)
    if not (f.shape == fp.shape == fn.shape) or f.ndim != 2:
        raise DimensionMismatchError(f"triplet shapes differ: {f.shape}, {fp.shape}, {fn.shape}")
    n = f.shape[1]
    if n == 0:
        z = np.zeros_like(f)
        return LossResult(0.0, {"anchors": z, "positives": z.copy(), "negatives": z.copy()})
    dp, up = _safe_unit(f - fp)
    dn, un = _safe_unit(f - fn)
    hinge = dp - dn + margin
    active = (hinge > 0).astype(np.float64) / n
    grad = {
        "anchors": (up - un) * active,
        "positives": -up * active,
        "negatives": un * active,
    }
    return LossResult(float(np.maximum(hinge, 0).mean()), grad)


def score_loss(s_t, s_c, p_warped, p_c) -> LossResult:
    """Score consistency plus error-weighted score term over matched pairs.

    Can be negative: pairs with below-average error and high scores lower it.
    """
    s_t = np.asarray(s_t, dtype=np.float64).reshape(-1)
    s_c = np.asarray(s_c, dtype=np.float64).reshape(-1)
    p_warped = as_points(p_warped, 2)
    p_c = as_points(p_c, 2)
    n = s_t.shape[0]
    if not (s_c.shape[0] == n == p_warped.shape[1] == p_c.shape[1]):
        raise DimensionMismatchError("score loss inputs disagree in length")
    if n == 0:
        z = np.zeros(0)
        return LossResult(0.0, {"s_t": z, "s_c": z, "p_warped": np.zeros((2, 0)), "p_c": np.zeros((2, 0))})
    err, unit = _safe_unit(p_warped - p_c)
    dev = err - err.mean()
    s_mean = 0.5 * (s_t + s_c)
    diff = s_t - s_c
    value = float(np.mean(s_mean * dev + diff * diff))
    g_err = (s_mean - s_mean.mean()) / n
    g_pw = unit * g_err
    grad = {
        "s_t": (0.5 * dev + 2 * diff) / n,
        "s_c": (0.5 * dev - 2 * diff) / n,
        "p_warped": g_pw,
        "p_c": -g_pw,
    }
    return LossResult(value, grad)


# -- dense sampling and view synthesis ---------------------------------------

class Sample(NamedTuple):
    values: np.ndarray  # (M, C)
    valid: np.ndarray  # (M,)
    grad_u: np.ndarray  # d values / d u, (M, C)
    grad_v: np.ndarray


def bilinear_sample(I, coords) -> Sample:
    """Sample an HxW(xC) grid at 2xM (u=column, v=row) coordinates.

    Samples outside [0, W-1] x [0, H-1] are invalid and returned as zero
    with zero gradient.
    """
    img = np.asarray(I, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    H, W = img.shape[:2]
    if H < 2 or W < 2:
        raise Kp3dError("bilinear sampling needs a grid of at least 2x2")
    coords = as_points(coords, 2)
    u, v = coords
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    x0 = np.clip(np.floor(uc).astype(np.intp), 0, W - 2)
    y0 = np.clip(np.floor(vc).astype(np.intp), 0, H - 2)
    wx = (uc - x0)[:, None]
    wy = (vc - y0)[:, None]
    I00 = img[y0, x0]
    I01 = img[y0, x0 + 1]
    I10 = img[y0 + 1, x0]
    I11 = img[y0 + 1, x0 + 1]
    top = I00 + wx * (I01 - I00)
    bottom = I10 + wx * (I11 - I10)
    values = top + wy * (bottom - top)
    grad_u = (1 - wy) * (I01 - I00) + wy * (I11 - I10)
    grad_v = bottom - top
    keep = valid[:, None]
    return Sample(values * keep, valid, grad_u * keep, grad_v * keep)


BORDER_SNAP = 1e-9


def pixel_grid(H: int, W: int) -> np.ndarray:
    """2 x (H*W) pixel coordinates in row-major order."""
    v, u = np.mgrid[0:H, 0:W]
    return np.stack([u.ravel(), v.ravel()]).astype(np.float64)


def synthesize_view(I_c, D_t, X: Pose, K: CameraIntrinsics):
    """Reconstruct the target image by sampling the context image.

    Every target pixel is lifted with D_t, moved by X (target -> context),
    projected and sampled.  Returns (image HxWxC, valid HxW).
    """
    I_c = as_image(I_c)
    D_t = np.asarray(D_t, dtype=np.float64)
    H, W = D_t.shape
    q = pixel_grid(H, W)
    d = D_t.ravel()
    ok = d > 0
    P = np.zeros((3, d.size))
    P[:, ok] = unproject(q[:, ok], d[ok], K)
    uv, in_front = project(transform(X, P), K, return_mask=True)
    in_front &= ok
    # round-trip rounding can push border pixels a hair outside the grid
    lim = np.array([[W - 1.0], [H - 1.0]])
    near = (uv > -BORDER_SNAP) & (uv < lim + BORDER_SNAP)
    uv = np.where(near, np.clip(uv, 0.0, lim), uv)
    sample = bilinear_sample(I_c, uv)
    valid = sample.valid & in_front
    out = sample.values * valid[:, None]
    return out.reshape(H, W, I_c.shape[2]), valid.reshape(H, W)


# -- SSIM and photometric loss -----------------------------------------------

def _box3(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter over the first two axes with replicate padding."""
    p = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    H, W = x.shape[:2]
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + H, dx:dx + W]
    return out / 9.0


def _box3_adjoint(g: np.ndarray) -> np.ndarray:
    H, W = g.shape[:2]
    p = np.zeros((H + 2, W + 2) + g.shape[2:])
    for dy in range(3):
        for dx in range(3):
            p[dy:dy + H, dx:dx + W] += g
    p[1] += p[0]
    p[-2] += p[-1]
    p[:, 1] += p[:, 0]
    p[:, -2] += p[:, -1]
    return p[1:-1, 1:-1] / 9.0


def _ssim_parts(x, y):
    mx, my = _box3(x), _box3(y)
    sxx = _box3(x * x) - mx * mx
    syy = _box3(y * y) - my * my
    sxy = _box3(x * y) - mx * my
    A1 = 2 * mx * my + SSIM_C1
    A2 = 2 * sxy + SSIM_C2
    B1 = mx * mx + my * my + SSIM_C1
    B2 = sxx + syy + SSIM_C2
    return mx, my, A1, A2, B1, B2


def ssim(x, y) -> np.ndarray:
    """Per-pixel, per-channel SSIM map using 3x3 box statistics."""
    x, y = as_image(x), as_image(y)
    if x.shape != y.shape:
        raise DimensionMismatchError(f"image shapes differ: {x.shape} vs {y.shape}")
    _, _, A1, A2, B1, B2 = _ssim_parts(x, y)
    return (A1 * A2) / (B1 * B2)


def ssim_backward(x, y, upstream) -> np.ndarray:
    """Gradient of sum(upstream * ssim(x, y)) with respect to y."""
    x, y = as_image(x), as_image(y)
    mx, my, A1, A2, B1, B2 = _ssim_parts(x, y)
    S = (A1 * A2) / (B1 * B2)
    BB = B1 * B2
    d_my = 2 * mx * (A2 - A1) / BB - S * (2 * my / B1 - 2 * my / B2)
    d_eyy = -S / B2
    d_exy = 2 * A1 / BB
    g = np.asarray(upstream, dtype=np.float64).reshape(S.shape)
    return (
        _box3_adjoint(g * d_my)
        + 2 * y * _box3_adjoint(g * d_eyy)
        + x * _box3_adjoint(g * d_exy)
    )


def photometric_map(I_t, I_hat, gamma: float = 0.85) -> np.ndarray:
    """Per-pixel SSIM + L1 appearance error, averaged over channels (HxW)."""
    I_t, I_hat = as_image(I_t), as_image(I_hat)
    per_channel = gamma * (1 - ssim(I_t, I_hat)) / 2 + (1 - gamma) * np.abs(I_t - I_hat)
    return per_channel.mean(axis=2)


def photometric_loss(I_t, I_hat, gamma: float = 0.85, mask=None) -> LossResult:
    """Photometric error mean-reduced over ``mask`` (all pixels if None).

    Gradient is with respect to the synthesized image ``I_hat``.
    """
    I_t, I_hat = as_image(I_t), as_image(I_hat)
    pmap = photometric_map(I_t, I_hat, gamma)
    mask = np.ones(pmap.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return LossResult(0.0, {"I_hat": np.zeros_like(I_hat)}, pmap)
    C = I_t.shape[2]
    w = (mask / (count * C))[:, :, None] * np.ones((1, 1, C))
    g = -gamma / 2 * ssim_backward(I_t, I_hat, w) + (1 - gamma) * np.sign(I_hat - I_t) * w
    return LossResult(float(pmap[mask].mean()), {"I_hat": g}, pmap)


def auto_mask(I_t, I_hat, I_c, gamma: float = 0.85) -> np.ndarray:
    """True where the synthesized view explains the target better than the raw context."""
    return photometric_map(I_t, I_hat, gamma) < photometric_map(I_t, I_c, gamma)


# -- depth losses ------------------------------------------------------------

def smoothness_loss(D, I) -> LossResult:
    """Edge-aware smoothness of mean-normalised inverse depth; gradient w.r.t. D."""
    D = as_depth_map(D)
    I = as_image(I)
    if I.shape[:2] != D.shape:
        raise DimensionMismatchError(f"depth {D.shape} and image {I.shape[:2]} sizes differ")
    disp = 1.0 / D
    m = disp.mean()
    n = disp / m
    dx = n[:, 1:] - n[:, :-1]
    dy = n[1:, :] - n[:-1, :]
    wx = np.exp(-np.abs(I[:, 1:] - I[:, :-1]).mean(axis=2))
    wy = np.exp(-np.abs(I[1:, :] - I[:-1, :]).mean(axis=2))
    value = 0.0
    g_n = np.zeros_like(D)
    if dx.size:
        value += float(np.mean(np.abs(dx) * wx))
        gx = np.sign(dx) * wx / dx.size
        g_n[:, 1:] += gx
        g_n[:, :-1] -= gx
    if dy.size:
        value += float(np.mean(np.abs(dy) * wy))
        gy = np.sign(dy) * wy / dy.size
        g_n[1:, :] += gy
        g_n[:-1, :] -= gy
    g_disp = g_n / m - np.sum(g_n * disp) / (m * m * disp.size)
    return LossResult(value, {"D": -g_disp / (D * D)})


def depth_consistency_loss(d_t, d_c) -> LossResult:
    """Mean of |d_t - d_c| / (d_t + d_c) over matched keypoint depths."""
    a = np.asarray(d_t, dtype=np.float64).reshape(-1)
    b = np.asarray(d_c, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionMismatchError("depth arrays differ in length")
    if a.size == 0:
        return LossResult(0.0, {"d_t": np.zeros(0), "d_c": np.zeros(0)})
    if np.any(a <= 0) or np.any(b <= 0):
        raise Kp3dError("depths must be positive")
    s = a + b
    diff = a - b
    ratio = np.abs(diff) / s
    sign = np.sign(diff)
    n = a.size
    return LossResult(
        float(ratio.mean()),
        {"d_t": (sign / s - ratio / s) / n, "d_c": (-sign / s - ratio / s) / n},
    )


def keypoint_depth_consistency(D_t, p_t, D_c, p_c) -> LossResult:
    """Depth consistency with both depths read bilinearly from dense maps.

    Pairs whose sample falls outside either map are ignored.  Gradients are
    with respect to the keypoint positions and the sampled depth values.
    """
    st = bilinear_sample(D_t, p_t)
    sc = bilinear_sample(D_c, p_c)
    ok = st.valid & sc.valid
    res = depth_consistency_loss(st.values[ok, 0], sc.values[ok, 0])
    n = ok.size
    g_dt = np.zeros(n)
    g_dc = np.zeros(n)
    g_dt[ok] = res.grad["d_t"]
    g_dc[ok] = res.grad["d_c"]
    grad = {
        "d_t": g_dt,
        "d_c": g_dc,
        "p_t": np.stack([g_dt * st.grad_u[:, 0], g_dt * st.grad_v[:, 0]]),
        "p_c": np.stack([g_dc * sc.grad_u[:, 0], g_dc * sc.grad_v[:, 0]]),
    }
    return LossResult(res.value, grad)


# -- total objective -----------------------------------------------------------

TERMS = ("photo", "smooth", "const", "geom", "desc", "score")


class TotalLoss(NamedTuple):
    value: float
    grad: dict
    terms: dict


def total_loss(terms: dict, weights: LossWeights = LossWeights()) -> TotalLoss:
    """Weighted sum L = L_depth + alpha * L_kpn of the six sub-losses.

    ``terms`` maps sub-loss names (see TERMS) to LossResult; missing terms
    count as zero.  Gradients sharing an input name are summed.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms: {sorted(unknown)}")
    coef = weights.coefficients()
    value = 0.0
    grad: dict = {}
    for name in TERMS:
        if name not in terms:
            continue
        res = terms[name]
        value += coef[name] * res.value
        for key, g in res.grad.items():
            grad[key] = grad[key] + coef[name] * g if key in grad else coef[name] * np.asarray(g)
    return TotalLoss(value, grad, {name: terms[name].value for name in TERMS if name in terms})

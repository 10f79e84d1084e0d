"""Keypoint frames, reciprocal descriptor matching and hardest-negative mining."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionMismatchError, Kp3dError, NoNegativeError

DEFAULT_SAFE_RADIUS = 4.0


@dataclass(frozen=True, eq=False)
class KeypointFrame:
    """Keypoints of one image: positions (2,N), descriptors (D,N), scores (N,).

    ``depths`` is optional; individual entries may be NaN to mark a keypoint
    whose depth is unknown.  ``image_size`` is (W, H) when known.
    """

    positions: np.ndarray
    descriptors: np.ndarray
    scores: np.ndarray
    depths: Optional[np.ndarray] = None
    image_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(2, -1)
        n = p.shape[1]
        f = np.asarray(self.descriptors, dtype=np.float64)
        if f.ndim == 1 and n == 0:
            f = f.reshape(-1, 0)
        if f.ndim != 2 or f.shape[1] != n:
            raise DimensionMismatchError(f"descriptors shape {f.shape} does not match {n} keypoints")
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if s.shape[0] != n:
            raise DimensionMismatchError(f"{s.shape[0]} scores for {n} keypoints")
        if np.any((s < 0) | (s > 1)) or not np.all(np.isfinite(s)):
            raise Kp3dError("scores must lie in [0, 1]")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(f))):
            raise Kp3dError("positions and descriptors must be finite")
        d = self.depths
        if d is not None:
            d = np.asarray(d, dtype=np.float64).reshape(-1)
            if d.shape[0] != n:
                raise DimensionMismatchError(f"{d.shape[0]} depths for {n} keypoints")
            known = ~np.isnan(d)
            if np.any(d[known] <= 0) or np.any(np.isinf(d)):
                raise Kp3dError("known depths must be positive and finite")
        size = self.image_size
        if size is not None:
            size = (int(size[0]), int(size[1]))
            if n and (np.any(p < 0) or np.any(p[0] >= size[0]) or np.any(p[1] >= size[1])):
                raise Kp3dError(f"keypoint outside image bounds {size}")
        for name, val in (("positions", p), ("descriptors", f), ("scores", s), ("depths", d)):
            if val is not None:
                val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "image_size", size)

    def __len__(self):
        return self.positions.shape[1]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[0]

    def subset(self, idx) -> "KeypointFrame":
        idx = np.asarray(idx, dtype=np.intp)
        return KeypointFrame(
            self.positions[:, idx],
            self.descriptors[:, idx],
            self.scores[idx],
            None if self.depths is None else self.depths[idx],
            self.image_size,
        )

    def top_k(self, k: int) -> "KeypointFrame":
        """Keep the k highest-scoring keypoints (stable order on ties)."""
        order = np.argsort(-self.scores, kind="stable")[:k]
        return self.subset(np.sort(order))


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """One-to-one index pairs (target i, context j), shape (M, 2)."""

    pairs: np.ndarray
    inlier_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)
        if len(np.unique(pairs[:, 0])) != len(pairs) or len(np.unique(pairs[:, 1])) != len(pairs):
            raise Kp3dError("correspondences must be one-to-one")
        mask = self.inlier_mask
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(-1)
            if mask.shape[0] != pairs.shape[0]:
                raise DimensionMismatchError("inlier mask length differs from number of pairs")
            mask.setflags(write=False)
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "inlier_mask", mask)

    def __len__(self):
        return self.pairs.shape[0]

    @property
    def target_idx(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def context_idx(self) -> np.ndarray:
        return self.pairs[:, 1]

    @property
    def num_inliers(self) -> int:
        return len(self) if self.inlier_mask is None else int(self.inlier_mask.sum())

    def inliers(self) -> "CorrespondenceSet":
        if self.inlier_mask is None:
            return self
        return CorrespondenceSet(self.pairs[self.inlier_mask])

    def with_mask(self, mask) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs, mask)

    def transposed(self) -> "CorrespondenceSet":
        return CorrespondenceSet(self.pairs[:, ::-1], self.inlier_mask)


def squared_distances(fa: np.ndarray, fb: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between columns of fa (D,N) and fb (D,M).

    Each entry is summed from explicit differences, never from the
    |a|^2 + |b|^2 - 2ab expansion, so near-ties are not reordered by
    cancellation error.
    """
    fa = np.asarray(fa, dtype=np.float64)
    fb = np.asarray(fb, dtype=np.float64)
    if fa.shape[0] != fb.shape[0]:
        raise DimensionMismatchError(f"descriptor dimensions differ: {fa.shape[0]} vs {fb.shape[0]}")
    if fa.shape[1] == 0 or fb.shape[1] == 0:
        return np.zeros((fa.shape[1], fb.shape[1]))
    return cdist(fa.T, fb.T, "sqeuclidean")


def reciprocal_match(
    target: KeypointFrame,
    context: KeypointFrame,
    max_distance: Optional[float] = None,
) -> CorrespondenceSet:
    """Mutual nearest neighbours in descriptor space; ties go to the lowest index."""
    if target.descriptor_dim != context.descriptor_dim:
        raise DimensionMismatchError(
            f"descriptor dimensions differ: {target.descriptor_dim} vs {context.descriptor_dim}"
        )
    if len(target) == 0 or len(context) == 0:
        return CorrespondenceSet(np.zeros((0, 2), dtype=np.intp))
    dist = squared_distances(target.descriptors, context.descriptors)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    i = np.arange(len(target))
    keep = nn_ba[nn_ab] == i
    if max_distance is not None:
        keep &= dist[i, nn_ab] <= max_distance * max_distance
    return CorrespondenceSet(np.stack([i[keep], nn_ab[keep]], axis=1))


def hardest_negative(
    anchor_idx: int,
    anchors: KeypointFrame,
    candidates: KeypointFrame,
    positive_idx: int,
    safe_radius: float = DEFAULT_SAFE_RADIUS,
) -> int:
    """Closest candidate descriptor to the anchor that is not the positive.

    Candidates closer than ``safe_radius`` pixels to the positive keypoint are
    excluded too, so near-duplicate detections are never used as negatives.
    """
    if len(candidates) < 2:
        raise NoNegativeError("need at least two candidates")
    f = anchors.descriptors[:, anchor_idx]
    diff = candidates.descriptors - f[:, None]
    dist = np.einsum("ij,ij->j", diff, diff)
    offset = candidates.positions - candidates.positions[:, positive_idx][:, None]
    allowed = np.hypot(offset[0], offset[1]) >= safe_radius
    allowed[positive_idx] = False
    if not np.any(allowed):
        raise NoNegativeError(f"all candidates excluded for anchor {anchor_idx}")
    dist = np.where(allowed, dist, np.inf)
    return int(np.argmin(dist))


def mine_triplets(
    target: KeypointFrame,
    context: KeypointFrame,
    matches: CorrespondenceSet,
    safe_radius: float = DEFAULT_SAFE_RADIUS,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(anchor, positive, negative) index triples for every match that has a negative."""
    a, pos, neg = [], [], []
    for i, j in matches.pairs:
        try:
            k = hardest_negative(i, target, context, j, safe_radius)
        except NoNegativeError:
            continue
        a.append(i)
        pos.append(j)
        neg.append(k)
    return np.array(a, dtype=np.intp), np.array(pos, dtype=np.intp), np.array(neg, dtype=np.intp)

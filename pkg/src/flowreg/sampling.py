"""Keypoint sampling and local descriptors for one dense view.

Pipeline per view: voxel downsample, statistical outlier removal, coverage
count, keypoint budget, farthest point sampling, then a ball-query patch and
descriptor per keypoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPatch, TooFewPoints
from .geometry import as_cloud

DESCRIPTOR_DIM = 32


@dataclass(frozen=True)
class SamplingConfig:
    v_d: float = 0.25
    v_c: float = 0.25
    alpha_s: float = 0.2
    r_s: Optional[float] = None  # defaults to 20 * v_d
    max_patch_points: int = 512
    outlier_k: int = 20
    outlier_std_ratio: float = 2.0
    descriptor_dim: int = DESCRIPTOR_DIM
    seed: int = 0

    def __post_init__(self):
        if self.r_s is None:
            object.__setattr__(self, "r_s", 20.0 * self.v_d)
        if not (self.v_d > 0 and self.v_c > 0 and self.r_s > 0):
            raise ValueError("voxel sizes and patch radius must be positive")
        if not 0 < self.alpha_s <= 1:
            raise ValueError(f"alpha_s must be in (0, 1], got {self.alpha_s}")
        if self.max_patch_points < 8:
            raise ValueError("max_patch_points must be >= 8")
        if self.descriptor_dim < 1 or self.outlier_k < 1:
            raise ValueError("descriptor_dim and outlier_k must be >= 1")


@dataclass(frozen=True, eq=False)
class SampledView:
    keypoints: np.ndarray  # (K, 3)
    descriptors: np.ndarray  # (K, D)
    source_reduced: np.ndarray  # (M_v, 3)
    keypoint_indices: np.ndarray = field(default=None)  # rows of source_reduced

    def __post_init__(self):
        K = self.keypoints.shape[0]
        if K < 3:
            raise TooFewPoints(f"a sampled view needs >= 3 keypoints, got {K}")
        if self.descriptors.shape[0] != K:
            raise ValueError("descriptor rows must match keypoint count")
        if not np.all(np.isfinite(self.descriptors)):
            raise ValueError("descriptors contain non-finite entries")

    @property
    def num_keypoints(self) -> int:
        return self.keypoints.shape[0]


def voxel_keys(P: np.ndarray, v: float) -> np.ndarray:
    return np.floor(P / v).astype(np.int64)


def voxel_downsample(P, v: float) -> np.ndarray:
    """Centroid of each occupied voxel, ordered by ascending voxel index."""
    P = as_cloud(P)
    if v <= 0:
        raise ValueError("voxel size must be positive")
    keys, inverse = np.unique(voxel_keys(P, v), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=keys.shape[0]).astype(np.float64)
    out = np.empty((keys.shape[0], 3))
    for c in range(3):
        out[:, c] = np.bincount(inverse, weights=P[:, c], minlength=keys.shape[0]) / counts
    return out


def remove_statistical_outliers(P, k: int = 20, std_ratio: float = 2.0) -> np.ndarray:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std."""
    P = as_cloud(P)
    if k < 1 or P.shape[0] <= k:
        raise TooFewPoints(f"outlier removal with k={k} needs more than {k} points, got {P.shape[0]}")
    dist, _ = cKDTree(P).query(P, k=k + 1)
    mean_d = dist[:, 1:].mean(axis=1)
    threshold = mean_d.mean() + std_ratio * mean_d.std()
    return P[mean_d <= threshold]


def coverage_count(P, v_c: float) -> int:
    P = as_cloud(P)
    if v_c <= 0:
        raise ValueError("coverage voxel size must be positive")
    return int(np.unique(voxel_keys(P, v_c), axis=0).shape[0])


def keypoint_count(V_i: int, alpha_s: float, n_available: Optional[int] = None) -> int:
    # small epsilon so products like 0.2 * 1000 do not floor one below
    K = int(math.floor(alpha_s * V_i + 1e-9))
    K = max(K, 3)
    if n_available is not None:
        K = min(K, n_available)
    return K


def farthest_point_sampling(P, K: int, seed: int = 0, first_index: Optional[int] = None) -> np.ndarray:
    """Greedy farthest point sampling; ties go to the lowest index."""
    P = as_cloud(P)
    n = P.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"K must be in [1, {n}], got {K}")
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(n))
    selected = np.empty(K, dtype=np.int64)
    selected[0] = first_index
    min_sq = np.sum((P - P[first_index]) ** 2, axis=1)
    for i in range(1, K):
        nxt = int(np.argmax(min_sq))
        selected[i] = nxt
        np.minimum(min_sq, np.sum((P - P[nxt]) ** 2, axis=1), out=min_sq)
    return selected


def _normalize_patch(P_v, members, center, r_s, max_points, rng):
    if members.size == 0:
        raise EmptyPatch(f"no points within {r_s} of {np.asarray(center).tolist()}")
    if members.size > max_points:
        members = np.sort(rng.choice(members, size=max_points, replace=False))
    return (P_v[members] - center) / r_s


def ball_query_patch(P_v, center, r_s: float, max_points: int = 512, seed=0) -> np.ndarray:
    """Neighbors of ``center`` within ``r_s``, centered and scaled into the unit ball."""
    P_v = as_cloud(P_v)
    if r_s <= 0:
        raise ValueError("patch radius must be positive")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    sq = np.sum((P_v - center) ** 2, axis=1)
    members = np.nonzero(sq <= r_s * r_s)[0]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _normalize_patch(P_v, members, center, r_s, max_points, rng)


def _l1(x: np.ndarray) -> np.ndarray:
    norm = np.abs(x).sum()
    return x / norm if norm > 0 else x


def describe_patch(patch) -> np.ndarray:
    """Rotation- and reflection-invariant 32-D patch descriptor.

    Blocks, each L1-normalized: 16-bin histogram of radial distances on [0, 1];
    8-bin histogram of distances to the patch centroid on [0, 2]; the sorted
    covariance eigenvalues divided by their sum; and the mean, std, skew, min
    and max of the radial distances.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] == 0:
        raise EmptyPatch("cannot describe an empty patch")
    radial = np.sqrt(np.sum(patch**2, axis=1))
    radial_hist = np.histogram(np.clip(radial, 0.0, 1.0), bins=16, range=(0.0, 1.0))[0]

    centered = patch - patch.mean(axis=0)
    to_centroid = np.sqrt(np.sum(centered**2, axis=1))
    centroid_hist = np.histogram(np.clip(to_centroid, 0.0, 2.0), bins=8, range=(0.0, 2.0))[0]

    eig = np.sort(np.linalg.eigvalsh(centered.T @ centered / patch.shape[0]))[::-1]
    eig = np.clip(eig, 0.0, None)
    if eig.sum() > 1e-12:
        eig_block = eig / eig.sum()
    else:
        eig_block = np.full(3, 1.0 / 3.0)

    mean = radial.mean()
    std = radial.std()
    skew = np.mean((radial - mean) ** 3) / std**3 if std > 1e-12 else 0.0
    moments = np.array([mean, std, skew, radial.min(), radial.max()])

    return np.concatenate(
        [
            _l1(radial_hist.astype(np.float64)),
            _l1(centroid_hist.astype(np.float64)),
            eig_block,
            _l1(moments),
        ]
    )


Descriptor = Callable[[np.ndarray], np.ndarray]


def sample_view(P, cfg: SamplingConfig, descriptor: Descriptor = describe_patch,
                first_index: Optional[int] = None) -> SampledView:
    """Reduce a dense view to keypoints with local descriptors.

    ``descriptor`` maps a normalized patch to a ``cfg.descriptor_dim`` vector;
    swap it to plug in a learned extractor.
    """
    P = as_cloud(P)
    reduced = voxel_downsample(P, cfg.v_d)
    if reduced.shape[0] > cfg.outlier_k:
        reduced = remove_statistical_outliers(reduced, cfg.outlier_k, cfg.outlier_std_ratio)
    if reduced.shape[0] < 3:
        raise TooFewPoints(f"only {reduced.shape[0]} points survive downsampling")
    V = coverage_count(reduced, cfg.v_c)
    K = keypoint_count(V, cfg.alpha_s, reduced.shape[0])
    idx = farthest_point_sampling(reduced, K, cfg.seed, first_index=first_index)
    keypoints = reduced[idx]

    tree = cKDTree(reduced)
    rng = np.random.default_rng([cfg.seed, 1])
    desc = np.empty((K, cfg.descriptor_dim))
    for k, q in enumerate(keypoints):
        members = np.asarray(tree.query_ball_point(q, cfg.r_s * (1 + 1e-9)), dtype=np.int64)
        # exact membership test; the tree only narrows candidates
        members = np.sort(members)
        members = members[np.sum((reduced[members] - q) ** 2, axis=1) <= cfg.r_s**2]
        patch = _normalize_patch(reduced, members, q, cfg.r_s, cfg.max_patch_points, rng)
        desc[k] = descriptor(patch)
    return SampledView(keypoints=keypoints, descriptors=desc, source_reduced=reduced,
                       keypoint_indices=idx)

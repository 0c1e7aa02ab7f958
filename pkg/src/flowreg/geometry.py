"""Rigid and similarity transform algebra, Kabsch alignment and error metrics.

Point clouds are plain ``(M, 3)`` float64 numpy arrays. ``as_cloud`` is the
single validation gate used by every public function that accepts one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometry,
    EmptyCloud,
    InvalidCloud,
    InvalidTransform,
    LengthMismatch,
    TooFewPoints,
)

ORTHO_TOL = 1e-9
# second singular value of the cross-covariance relative to the first
DEGENERACY_RTOL = 1e-12


def as_cloud(points, allow_empty=False) -> np.ndarray:
    """Return ``points`` as a validated ``(M, 3)`` float64 array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidCloud(f"expected an (M, 3) array, got shape {arr.shape}")
    if arr.shape[0] == 0 and not allow_empty:
        raise EmptyCloud("point cloud is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidCloud("point cloud contains non-finite coordinates")
    return arr


def _check_rotation(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidTransform(f"rotation must be a finite 3x3 matrix, got {R.shape}")
    if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL:
        raise InvalidTransform("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise InvalidTransform("rotation has det != +1")
    return R


def _check_vector(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.shape != (3,) or not np.all(np.isfinite(t)):
        raise InvalidTransform("translation must be a finite 3-vector")
    return t


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element acting as ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _check_rotation(self.rotation)
        t = _check_vector(self.translation)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=np.float64)
        if M.shape != (4, 4):
            raise InvalidTransform(f"expected a 4x4 matrix, got {M.shape}")
        if np.max(np.abs(M[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > ORTHO_TOL:
            raise InvalidTransform("last row of a rigid 4x4 must be [0, 0, 0, 1]")
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        P = as_cloud(points, allow_empty=True)
        return P @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)


@dataclass(frozen=True)
class SimilarityTransform:
    """SIM(3) element acting as ``p -> scale * R p + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise InvalidTransform(f"scale must be positive and finite, got {scale}")
        R = _check_rotation(self.rotation)
        t = _check_vector(self.translation)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def from_rigid(cls, T: RigidTransform, scale: float = 1.0) -> "SimilarityTransform":
        return cls(scale, T.rotation, T.translation)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        P = as_cloud(points, allow_empty=True)
        return self.scale * (P @ self.rotation.T) + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return SimilarityTransform(inv_s, Rt, -inv_s * (Rt @ self.translation))

    def as_rigid(self, tol: float = 1e-9) -> RigidTransform:
        if abs(self.scale - 1.0) > tol:
            raise InvalidTransform(f"scale {self.scale} is not 1; not a rigid transform")
        return RigidTransform(self.rotation, self.translation)


def apply_rigid(T: RigidTransform, P) -> np.ndarray:
    return T.apply(P)


def apply_similarity(T: SimilarityTransform, P) -> np.ndarray:
    return T.apply(P)


def compose_rigid_after_similarity(A: RigidTransform, B: SimilarityTransform) -> SimilarityTransform:
    """Similarity equal to applying ``B`` then ``A``."""
    return SimilarityTransform.from_rigid(A).compose(B)


def kabsch_align(source, target) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    Minimizes ``sum ||R s_i + t - t_i||^2`` over corresponded rows. A reflection
    in the naive SVD solution is corrected by flipping the singular vector of
    the smallest singular value.

    Raises:
        LengthMismatch: row counts differ.
        TooFewPoints: fewer than 3 correspondences.
        DegenerateGeometry: centered source spans less than a plane, so the
            rotation about the point axis is unobservable.
    """
    S = as_cloud(source)
    D = as_cloud(target)
    if S.shape[0] != D.shape[0]:
        raise LengthMismatch(f"source has {S.shape[0]} points, target has {D.shape[0]}")
    if S.shape[0] < 3:
        raise TooFewPoints(f"Kabsch needs at least 3 points, got {S.shape[0]}")
    s_mean = S.mean(axis=0)
    d_mean = D.mean(axis=0)
    H = (S - s_mean).T @ (D - d_mean)
    U, sv, Vt = np.linalg.svd(H)
    if not sv[0] > 0 or sv[1] <= DEGENERACY_RTOL * sv[0]:
        raise DegenerateGeometry(
            f"cross-covariance has rank < 2 (singular values {sv.tolist()})"
        )
    V = Vt.T
    R = V @ U.T
    if np.linalg.det(R) < 0:
        V[:, 2] = -V[:, 2]
        R = V @ U.T
    t = d_mean - R @ s_mean
    return RigidTransform(R, t)


def rotation_error_deg(R_gt, R_est) -> float:
    R_gt = np.asarray(R_gt, dtype=np.float64)
    R_est = np.asarray(R_est, dtype=np.float64)
    cos = float(np.clip((np.trace(R_gt.T @ R_est) - 1.0) / 2.0, -1.0, 1.0))
    if cos > 0.5:
        # same angle via ||R_gt - R_est||_F = 2 sqrt(2) sin(theta / 2); arccos near 1
        # loses half the digits (one ulp below 1 reads as 1.2e-6 degrees)
        half_chord = np.linalg.norm(R_gt - R_est) / (2.0 * np.sqrt(2.0))
        return float(np.degrees(2.0 * np.arcsin(min(half_chord, 1.0))))
    return float(np.degrees(np.arccos(cos)))


def translation_error_m(t_gt, t_est) -> float:
    diff = np.asarray(t_gt, dtype=np.float64) - np.asarray(t_est, dtype=np.float64)
    return float(np.linalg.norm(diff))


def nearest_neighbors(query, reference) -> tuple[np.ndarray, np.ndarray]:
    """Squared distance and index of each query point's nearest reference point.

    Uses a KD-tree, then resolves distance ties to the lowest reference index
    so the result is identical to an exhaustive scan.
    """
    Q = as_cloud(query)
    Rf = as_cloud(reference)
    tree = cKDTree(Rf)
    k = min(2, Rf.shape[0])
    _, idx = tree.query(Q, k=k)
    idx = np.asarray(idx).reshape(Q.shape[0], k)
    cand_sq = np.sum((Q[:, None, :] - Rf[idx]) ** 2, axis=-1)
    best = idx[:, 0].copy()
    best_sq = cand_sq[:, 0].copy()
    if k == 2:
        suspects = np.nonzero(cand_sq[:, 1] <= cand_sq[:, 0] * (1 + 1e-9) + 1e-300)[0]
        for q in suspects:
            radius = np.sqrt(max(cand_sq[q, 0], cand_sq[q, 1])) * (1 + 1e-9) + 1e-12
            near = np.asarray(tree.query_ball_point(Q[q], radius), dtype=np.int64)
            sq = np.sum((Q[q] - Rf[near]) ** 2, axis=-1)
            m = sq.min()
            best[q] = near[sq == m].min()
            best_sq[q] = m
    return best_sq, best


def chamfer_distance(A, B) -> float:
    """Bi-directional RMS nearest-neighbor distance between two clouds."""
    A = as_cloud(A)
    B = as_cloud(B)
    ab, _ = nearest_neighbors(A, B)
    ba, _ = nearest_neighbors(B, A)
    return float(np.sqrt(0.5 * (ab.mean() + ba.mean())))


def rigid_projection(prediction: Sequence, inputs: Sequence):
    """Project each predicted view onto the rigid orbit of its input view.

    Returns the projected views and the per-view Kabsch transforms
    (input frame -> prediction frame).
    """
    if len(prediction) != len(inputs):
        raise LengthMismatch(f"{len(prediction)} predicted views vs {len(inputs)} inputs")
    projected, transforms = [], []
    for X, Q in zip(prediction, inputs):
        X = as_cloud(X)
        Q = as_cloud(Q)
        if X.shape[0] != Q.shape[0]:
            raise LengthMismatch(f"view has {X.shape[0]} predicted vs {Q.shape[0]} input points")
        T = kabsch_align(Q, X)
        transforms.append(T)
        projected.append(T.apply(Q))
    return projected, transforms


def rigidity_residual(prediction: Sequence, inputs: Sequence) -> float:
    """RMS distance between a prediction and its per-view rigid projection."""
    projected, _ = rigid_projection(prediction, inputs)
    total = 0.0
    count = 0
    for X, Y in zip(prediction, projected):
        X = np.asarray(X, dtype=np.float64)
        total += float(np.sum((X - Y) ** 2))
        count += X.shape[0]
    return float(np.sqrt(total / count))

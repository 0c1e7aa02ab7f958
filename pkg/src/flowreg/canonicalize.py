"""Map views and the registration target into a shared canonical frame.

Each view is centered on its keypoint centroid, scaled by ``1/s`` where ``s``
is the longest bounding-box edge of the largest view, and rotated by its own
uniform random rotation. The target (ground-truth registered keypoints) is
recentered, rotated by the largest view's rotation and scaled by ``1/s`` as
well, so each target view is an exact rigid motion of its canonical input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateScale, LengthMismatch, TooFewPoints, TooFewViews
from .geometry import RigidTransform, SimilarityTransform, as_cloud

MIN_SCALE = 1e-9

RngLike = Union[np.random.Generator, Sequence[np.random.Generator]]


@dataclass(frozen=True, eq=False)
class CanonicalizedViews:
    normalized_keypoints: list  # per view (K_i, 3)
    view_transforms: list  # per view SimilarityTransform, Q_i -> Q̄_i
    global_scale: float
    reference_view: int
    reference_rotation: np.ndarray
    rotations: list

    @property
    def view_ids(self) -> np.ndarray:
        return np.concatenate(
            [np.full(len(Q), i, dtype=np.int64) for i, Q in enumerate(self.normalized_keypoints)]
        )

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate(self.normalized_keypoints, axis=0)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) from a normalized 4-D Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    R = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    # re-orthonormalize away the O(eps) drift of the closed form
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def _keypoints(view) -> np.ndarray:
    return as_cloud(getattr(view, "keypoints", view))


def largest_view(sizes: Sequence[int]) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(np.asarray(sizes)))


def canonicalize_inputs(views: Sequence, rng: RngLike) -> CanonicalizedViews:
    """Center, scale and randomly rotate every view.

    ``views`` holds ``SampledView`` objects or raw ``(K_i, 3)`` keypoint arrays.
    ``rng`` is one generator consumed in view order, or one generator per view
    (which ties each rotation to view identity rather than position).
    """
    Qs = [_keypoints(v) for v in views]
    if len(Qs) < 2:
        raise TooFewViews(f"need at least 2 views, got {len(Qs)}")
    for i, Q in enumerate(Qs):
        if Q.shape[0] < 3:
            raise TooFewPoints(f"view {i} has {Q.shape[0]} keypoints, need >= 3")
    if isinstance(rng, np.random.Generator):
        rngs = [rng] * len(Qs)
    else:
        rngs = list(rng)
        if len(rngs) != len(Qs):
            raise LengthMismatch(f"{len(rngs)} generators for {len(Qs)} views")

    ref = largest_view([Q.shape[0] for Q in Qs])
    Qref = Qs[ref]
    s = float(np.max(Qref.max(axis=0) - Qref.min(axis=0)))
    if s < MIN_SCALE:
        raise DegenerateScale(f"global scale {s} is below {MIN_SCALE}")

    normalized, transforms, rotations = [], [], []
    for Q, g in zip(Qs, rngs):
        R = random_rotation(g)
        c = Q.mean(axis=0)
        T = SimilarityTransform(1.0 / s, R, -(R @ c) / s)
        rotations.append(R)
        transforms.append(T)
        normalized.append(((Q - c) @ R.T) / s)
    return CanonicalizedViews(
        normalized_keypoints=normalized,
        view_transforms=transforms,
        global_scale=s,
        reference_view=ref,
        reference_rotation=rotations[ref],
        rotations=rotations,
    )


def canonicalize_target(views: Sequence, gt_poses: Sequence[RigidTransform],
                        canon: CanonicalizedViews) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth registered keypoints in the canonical frame.

    Returns the ``(K, 3)`` target cloud X(0) in view-major order and the
    matching per-point view ids.
    """
    Qs = [_keypoints(v) for v in views]
    if len(gt_poses) != len(Qs):
        raise LengthMismatch(f"{len(gt_poses)} poses for {len(Qs)} views")
    if len(canon.normalized_keypoints) != len(Qs):
        raise LengthMismatch("canonicalization was built from a different view set")
    merged = np.concatenate([T.apply(Q) for T, Q in zip(gt_poses, Qs)], axis=0)
    merged = merged - merged.mean(axis=0)
    X0 = (merged @ canon.reference_rotation.T) / canon.global_scale
    return X0, canon.view_ids


def canonical_target_transforms(gt_poses: Sequence[RigidTransform], views: Sequence,
                                canon: CanonicalizedViews) -> list:
    """Exact rigid maps Q̄_i -> X(0)_i implied by the ground-truth poses."""
    Qs = [_keypoints(v) for v in views]
    merged = np.concatenate([T.apply(Q) for T, Q in zip(gt_poses, Qs)], axis=0)
    c = merged.mean(axis=0)
    s = canon.global_scale
    R_ref = canon.reference_rotation
    out = []
    for T_gt, T_bar in zip(gt_poses, canon.view_transforms):
        # X0_i = R_ref (T_gt(p) - c) / s with p = T_bar^{-1}(q)
        world_from_canon = SimilarityTransform.from_rigid(T_gt).compose(T_bar.inverse())
        target = SimilarityTransform(1.0 / s, R_ref, -(R_ref @ c) / s).compose(world_from_canon)
        out.append(target.as_rigid(tol=1e-6))
    return out

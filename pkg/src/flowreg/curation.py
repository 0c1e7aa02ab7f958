"""Multi-view sample curation from posed sequences, and synthetic scenes.

``generate_samples`` follows the keyframe / interval / validity procedure used
to build training data from SLAM sequences; ``generate_synthetic_scene``
builds desk-scale scenes from random surface primitives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .canonicalize import random_rotation
from .errors import NoValidSample, RetryExhausted, TooFewViews
from .geometry import RigidTransform, as_cloud
from .sampling import voxel_keys

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Frame:
    points: np.ndarray  # sensor frame
    pose: RigidTransform  # sensor -> world
    timestamp: float


@dataclass(frozen=True, eq=False)
class SequenceData:
    frames: tuple
    sequence_id: str = "sequence"

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("a sequence needs at least one frame")
        stamps = np.array([f.timestamp for f in self.frames])
        if np.any(np.diff(stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "frames", tuple(self.frames))


@dataclass(frozen=True)
class CurationConfig:
    tau_time: float = 1.0
    tau_space: float = 1.0
    beta: float = 1.0
    T_max: int = 10
    N_min: int = 2
    N_max: int = 4
    F_min: int = 1
    F_max: int = 1
    d_max: float = 100.0
    eps_overlap: float = 0.01
    v_overlap: float = 0.5
    deskewed: bool = True  # motion deskewing is not implemented; inputs must be deskewed

    def __post_init__(self):
        if self.N_min < 2 or self.N_max < self.N_min:
            raise ValueError("need 2 <= N_min <= N_max")
        if self.F_min < 1 or self.F_max < self.F_min:
            raise ValueError("need 1 <= F_min <= F_max")
        if self.T_max < 1:
            raise ValueError("T_max must be >= 1")
        if not 0.0 <= self.eps_overlap <= 1.0:
            raise ValueError("eps_overlap must lie in [0, 1]")
        if not (self.tau_time > 0 and self.tau_space > 0 and self.d_max > 0 and self.v_overlap > 0):
            raise ValueError("thresholds and voxel sizes must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not self.deskewed:
            raise ValueError("motion deskewing is out of scope; provide deskewed scans")


@dataclass(eq=False)
class CurationSample:
    """N views in their own local frames plus view -> world ground-truth poses."""

    views: list
    gt_poses: list
    overlap_edges: list = field(default_factory=list)  # (i, j, ratio)
    provenance: dict = field(default_factory=dict)

    def world_views(self) -> list:
        return [T.apply(P) for T, P in zip(self.gt_poses, self.views)]

    def centers(self) -> np.ndarray:
        return np.stack([P.mean(axis=0) for P in self.world_views()])


def select_keyframes(seq: SequenceData, tau_time: float, tau_space: float) -> list:
    """Keep frame 0, then every frame far enough in time OR space from the last kept one."""
    kept = [0]
    last = seq.frames[0]
    for k in range(1, len(seq.frames)):
        f = seq.frames[k]
        dt = f.timestamp - last.timestamp
        dx = np.linalg.norm(f.pose.translation - last.pose.translation)
        if dt >= tau_time or dx >= tau_space:
            kept.append(k)
            last = f
    return kept


def _voxel_set(P: np.ndarray, v: float) -> np.ndarray:
    return np.unique(voxel_keys(P, v), axis=0)


def overlap_ratio(A, B, v: float) -> float:
    """Intersection-over-union of occupied voxels."""
    if v <= 0:
        raise ValueError("overlap voxel size must be positive")
    a = _voxel_set(as_cloud(A), v)
    b = _voxel_set(as_cloud(B), v)
    union = np.unique(np.concatenate([a, b], axis=0), axis=0).shape[0]
    inter = a.shape[0] + b.shape[0] - union
    return inter / union


def is_connected(views: Sequence, eps_overlap: float, v_overlap: float):
    """Connectivity of the overlap graph; returns ``(connected, edges)``."""
    n = len(views)
    if n < 1:
        raise TooFewViews("connectivity needs at least one view")
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            r = overlap_ratio(views[i], views[j], v_overlap)
            if r >= eps_overlap:
                edges.append((i, j, r))
                parent[find(i)] = find(j)
    roots = {find(i) for i in range(n)}
    return len(roots) == 1, edges


def max_center_distance(world_views: Sequence) -> float:
    centers = np.stack([as_cloud(P).mean(axis=0) for P in world_views])
    diff = centers[:, None, :] - centers[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max())


def verify_sample(sample: CurationSample, d_max: float, eps_overlap: float, v_overlap: float) -> bool:
    """Independent re-check of the two validity rules on world-frame views."""
    world = sample.world_views()
    if max_center_distance(world) > d_max:
        return False
    return is_connected(world, eps_overlap, v_overlap)[0]


def _draw_intervals(rng, M, lengths):
    """Non-overlapping keyframe index ranges separated by >= 1 keyframe, or None."""
    N = len(lengths)
    free = M - sum(lengths) - (N - 1)
    if free < 0:
        return None
    # stars and bars: N + 1 gaps summing to ``free``
    cuts = np.sort(rng.choice(free + N, size=N, replace=False))
    gaps = np.diff(np.concatenate([[-1], cuts])) - 1
    order = rng.permutation(N)
    ordered = [lengths[i] for i in order]
    intervals, start = [], 0
    for g, length in zip(gaps, ordered):
        start += int(g)
        intervals.append((start, start + length))
        start += length + 1
    back = np.empty(N, dtype=np.int64)
    back[order] = np.arange(N)
    return [intervals[i] for i in back]


def generate_samples(seq: SequenceData, cfg: CurationConfig, rng: np.random.Generator,
                     failures: Optional[list] = None) -> list:
    """Curate multi-view samples from one posed sequence.

    Attempts ``floor(beta * M)`` samples over ``M`` keyframes. Each view
    accumulates a run of consecutive keyframes and is expressed in the sensor
    frame of the run's middle keyframe, whose pose becomes the view's ground
    truth. Samples that exhaust ``T_max`` attempts are skipped; their indices
    are appended to ``failures`` when given.
    """
    keyframes = select_keyframes(seq, cfg.tau_time, cfg.tau_space)
    M = len(keyframes)
    n_target = int(math.floor(cfg.beta * M + 1e-9))
    seeds = rng.integers(0, 2**63 - 1, size=n_target)
    out = []
    for n in range(n_target):
        srng = np.random.default_rng(int(seeds[n]))
        sample = None
        for attempt in range(cfg.T_max):
            N = int(srng.integers(cfg.N_min, cfg.N_max + 1))
            lengths = [int(srng.integers(cfg.F_min, cfg.F_max + 1)) for _ in range(N)]
            intervals = _draw_intervals(srng, M, lengths)
            if intervals is None:
                continue
            world, local, poses = [], [], []
            for a, b in intervals:
                frames = [seq.frames[keyframes[k]] for k in range(a, b)]
                pts = np.concatenate([f.pose.apply(f.points) for f in frames], axis=0)
                T_mid = frames[len(frames) // 2].pose
                world.append(pts)
                local.append(T_mid.inverse().apply(pts))
                poses.append(T_mid)
            if max_center_distance(world) > cfg.d_max:
                continue
            ok, edges = is_connected(world, cfg.eps_overlap, cfg.v_overlap)
            if ok:
                sample = CurationSample(
                    views=local,
                    gt_poses=poses,
                    overlap_edges=edges,
                    provenance={
                        "sequence_id": seq.sequence_id,
                        "intervals": [[keyframes[a], keyframes[b - 1]] for a, b in intervals],
                        "attempt": attempt,
                        "seed": int(seeds[n]),
                    },
                )
                break
        if sample is None:
            log.warning("%s", NoValidSample(f"sample {n}: no valid configuration in {cfg.T_max} attempts"))
            if failures is not None:
                failures.append(n)
            continue
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    primitives: tuple = (5, 20)
    points: tuple = (5000, 50000)
    scene_size: tuple = (8.0, 12.0)
    view_radius: float = 0.45  # crop radius as a fraction of the scene size
    max_hop: float = 0.35  # neighboring view centers, as a fraction of the scene size
    min_points_per_view: int = 500
    min_overlap: float = 0.1
    v_overlap: float = 0.5
    eps_overlap: float = 0.01
    max_attempts: int = 50


def _sample_box(rng, n, center, half, R):
    areas = 4 * np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face = rng.choice(6, size=n, p=np.repeat(areas, 2) / (2 * areas.sum()))
    uv = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    uv[np.arange(n), axis] = sign * half[axis]
    return uv @ R.T + center


def _sample_sphere(rng, n, center, radius):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + radius * d


def _sample_plane(rng, n, center, half, R):
    uv = np.zeros((n, 3))
    uv[:, :2] = rng.uniform(-1, 1, size=(n, 2)) * half
    return uv @ R.T + center


def synthetic_scene_points(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()):
    """Surface samples of random boxes, spheres and planes; returns (points, size)."""
    size = float(rng.uniform(*cfg.scene_size))
    n_prim = int(rng.integers(cfg.primitives[0], cfg.primitives[1] + 1))
    n_total = int(rng.integers(cfg.points[0], cfg.points[1] + 1))
    prims = []
    for _ in range(n_prim):
        kind = rng.choice(["box", "sphere", "plane"], p=[0.5, 0.25, 0.25])
        center = rng.uniform(-0.5, 0.5, size=3) * size
        R = random_rotation(rng)
        if kind == "box":
            half = rng.uniform(0.03, 0.15, size=3) * size
            area = 8 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2])
            prims.append((kind, area, (center, half, R)))
        elif kind == "sphere":
            r = float(rng.uniform(0.03, 0.12) * size)
            prims.append((kind, 4 * np.pi * r * r, (center, r)))
        else:
            half = rng.uniform(0.05, 0.25, size=2) * size
            prims.append((kind, 4 * half[0] * half[1], (center, half, R)))
    areas = np.array([p[1] for p in prims])
    counts = rng.multinomial(n_total, areas / areas.sum())
    parts = []
    for (kind, _, args), n in zip(prims, counts):
        if n == 0:
            continue
        if kind == "box":
            parts.append(_sample_box(rng, n, *args))
        elif kind == "sphere":
            parts.append(_sample_sphere(rng, n, *args))
        else:
            parts.append(_sample_plane(rng, n, *args))
    return np.concatenate(parts, axis=0), size


def generate_synthetic_scene(rng: np.random.Generator, n_views: int,
                             scene_cfg: SceneConfig = SceneConfig()) -> CurationSample:
    """Random primitive scene cropped into ``n_views`` overlapping ball views.

    View centers form a random chain of short hops, so consecutive views share
    geometry; each view is re-expressed in a random local frame whose pose is
    the ground truth. Rejection enforces a minimum consecutive overlap and
    overlap-graph connectivity.

    Raises:
        RetryExhausted: no valid crop set within ``max_attempts``.
    """
    if n_views < 2:
        raise TooFewViews(f"a synthetic scene needs >= 2 views, got {n_views}")
    cfg = scene_cfg
    for attempt in range(cfg.max_attempts):
        points, size = synthetic_scene_points(rng, cfg)
        radius = cfg.view_radius * size
        centers = [points[rng.integers(len(points))]]
        for _ in range(n_views - 1):
            anchor = centers[rng.integers(len(centers))]
            near = np.nonzero(np.linalg.norm(points - anchor, axis=1) <= cfg.max_hop * size)[0]
            centers.append(points[rng.choice(near)])
        crops = [points[np.linalg.norm(points - c, axis=1) <= radius] for c in centers]
        if min(len(c) for c in crops) < cfg.min_points_per_view:
            continue
        consecutive = [overlap_ratio(crops[i], crops[i + 1], cfg.v_overlap) for i in range(n_views - 1)]
        if min(consecutive) < cfg.min_overlap:
            continue
        ok, edges = is_connected(crops, cfg.eps_overlap, cfg.v_overlap)
        if not ok:
            continue
        poses, views = [], []
        for c, crop in zip(centers, crops):
            T = RigidTransform(random_rotation(rng), c)
            poses.append(T)
            views.append(T.inverse().apply(crop))
        return CurationSample(
            views=views,
            gt_poses=poses,
            overlap_edges=edges,
            provenance={"kind": "synthetic", "scene_size": size, "attempt": attempt,
                        "n_scene_points": int(len(points))},
        )
    raise RetryExhausted(f"no valid synthetic scene in {cfg.max_attempts} attempts")


def synthetic_sequence(rng: np.random.Generator, n_frames: int = 60, radius: float = 4.0,
                       scan_range: float = 6.0, scene_cfg: SceneConfig = SceneConfig(),
                       dt: float = 0.1, sequence_id: str = "synthetic") -> SequenceData:
    """A sensor circling inside a primitive scene, scanning everything in range."""
    points, _ = synthetic_scene_points(rng, scene_cfg)
    frames = []
    for k in range(n_frames):
        a = 2 * np.pi * k / n_frames
        pos = np.array([radius * np.cos(a), radius * np.sin(a), 0.0])
        c, s = np.cos(a + np.pi / 2), np.sin(a + np.pi / 2)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pose = RigidTransform(R, pos)
        scan = points[np.linalg.norm(points - pos, axis=1) <= scan_range]
        frames.append(Frame(pose.inverse().apply(scan), pose, k * dt))
    return SequenceData(tuple(frames), sequence_id)


def synthetic_suite(seed: int, n_samples: int, min_views: int = 2, max_views: int = 4,
                    scene_cfg: SceneConfig = SceneConfig()):
    """Deterministic stream of synthetic samples; sample ``i`` depends only on ``(seed, i)``.

    Use different seeds for training and held-out suites.
    """
    if min_views < 2 or max_views < min_views:
        raise ValueError("need 2 <= min_views <= max_views")
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        yield generate_synthetic_scene(rng, int(rng.integers(min_views, max_views + 1)), scene_cfg)

"""Registration error metrics, success criteria and report generation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyInput, LengthMismatch
from .geometry import (
    RigidTransform,
    SimilarityTransform,
    as_cloud,
    chamfer_distance,
    rotation_error_deg,
    translation_error_m,
)
from .sampling import voxel_downsample

REPORT_COLUMNS = (
    "sample_id",
    "n_views",
    "anchor_view",
    "success",
    "mean_re_deg",
    "mean_te_m",
    "max_re_deg",
    "max_te_m",
    "chamfer_m",
    "rigidity_residual",
    "te_threshold_m",
)


@dataclass(frozen=True)
class SuccessCriteria:
    """Either a pointwise-RMSE threshold or rotation/translation thresholds.

    For pose thresholds, ``te_fraction`` makes the translation threshold
    relative: ``te_fraction * scene extent`` (longest bounding-box edge of the
    ground-truth merged cloud) replaces ``te_threshold``.
    """

    kind: str = "pose-thresholds"
    rmse_threshold: Optional[float] = None
    te_threshold: Optional[float] = None
    re_threshold: Optional[float] = None
    te_fraction: Optional[float] = None

    def __post_init__(self):
        if self.kind == "pointwise-rmse":
            if not (self.rmse_threshold and self.rmse_threshold > 0):
                raise ValueError("pointwise-rmse criteria need rmse_threshold > 0")
        elif self.kind == "pose-thresholds":
            if not (self.re_threshold and self.re_threshold > 0):
                raise ValueError("pose criteria need re_threshold > 0")
            te_ok = (self.te_threshold and self.te_threshold > 0) or (self.te_fraction and self.te_fraction > 0)
            if not te_ok:
                raise ValueError("pose criteria need te_threshold > 0 or te_fraction > 0")
        else:
            raise ValueError(f"unknown criteria kind {self.kind!r}")

    @classmethod
    def kitti(cls) -> "SuccessCriteria":
        return cls(kind="pose-thresholds", te_threshold=2.0, re_threshold=5.0)

    @classmethod
    def threedmatch(cls) -> "SuccessCriteria":
        return cls(kind="pointwise-rmse", rmse_threshold=0.2)

    def translation_threshold(self, extent: Optional[float] = None) -> Optional[float]:
        if self.te_fraction is not None:
            if extent is None:
                raise ValueError("relative translation threshold needs the scene extent")
            return self.te_fraction * extent
        return self.te_threshold


def _rigid(T) -> RigidTransform:
    if isinstance(T, RigidTransform):
        return T
    if isinstance(T, SimilarityTransform):
        return T.as_rigid(tol=1e-6)
    return RigidTransform.from_matrix(T)


def correspondence_rmse(P_src, T_est, T_gt) -> float:
    P = as_cloud(P_src)
    diff = _rigid(T_est).apply(P) - _rigid(T_gt).apply(P)
    return float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))


def pairwise_success(T_est, T_gt, criteria: SuccessCriteria, source=None, extent=None):
    """Success flag and (RE, TE) for one estimated transform; thresholds are inclusive."""
    T_est, T_gt = _rigid(T_est), _rigid(T_gt)
    re = rotation_error_deg(T_gt.rotation, T_est.rotation)
    te = translation_error_m(T_gt.translation, T_est.translation)
    if criteria.kind == "pointwise-rmse":
        if source is None:
            raise ValueError("pointwise-rmse criteria need the source cloud")
        ok = correspondence_rmse(source, T_est, T_gt) <= criteria.rmse_threshold
    else:
        ok = re <= criteria.re_threshold and te <= criteria.translation_threshold(extent)
    return bool(ok), (re, te)


def gauge_align(est_poses: Sequence, gt_poses: Sequence, anchor_view: int) -> list:
    """Left-multiply every estimate by ``T_gt,anchor ∘ T_est,anchor^-1``."""
    est = [_rigid(T) for T in est_poses]
    gt = [_rigid(T) for T in gt_poses]
    G = gt[anchor_view].compose(est[anchor_view].inverse())
    return [G.compose(T) for T in est]


def multiview_errors(est_poses: Sequence, gt_poses: Sequence, anchor_view: int = 0) -> list:
    """Per-view (RE degrees, TE meters) after anchor gauge alignment."""
    if len(est_poses) != len(gt_poses):
        raise LengthMismatch(f"{len(est_poses)} estimated vs {len(gt_poses)} ground-truth poses")
    if len(est_poses) < 2:
        raise LengthMismatch("multi-view errors need at least 2 views")
    aligned = gauge_align(est_poses, gt_poses, anchor_view)
    gt = [_rigid(T) for T in gt_poses]
    return [
        (rotation_error_deg(g.rotation, a.rotation), translation_error_m(g.translation, a.translation))
        for a, g in zip(aligned, gt)
    ]


@dataclass(eq=False)
class EvalCase:
    est_poses: list  # per view, view frame -> registered frame
    gt_poses: list  # per view, view frame -> world
    views: list  # dense clouds in their own frames
    sample_id: object = 0
    rigidity_residual: float = float("nan")

    @classmethod
    def from_result(cls, result, gt_poses, views, sample_id=0) -> "EvalCase":
        return cls(list(result.poses_metric), list(gt_poses), list(views), sample_id,
                   float(result.rigidity_residual))


@dataclass
class EvalReport:
    success_rate: float
    mean_re: float
    mean_te: float
    chamfer: float
    rows: list = field(default_factory=list)
    criteria: dict = field(default_factory=dict)
    cd_voxel: Optional[float] = None
    gauge: str = "anchor view with the most points"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "success_rate": self.success_rate,
            "mean_re_deg": self.mean_re,
            "mean_te_m": self.mean_te,
            "chamfer_m": self.chamfer,
            "n_samples": len(self.rows),
            "criteria": self.criteria,
            "cd_voxel_m": self.cd_voxel,
            "gauge": self.gauge,
            "columns": list(REPORT_COLUMNS),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def scene_extent(world_views: Sequence) -> float:
    merged = np.concatenate([as_cloud(P) for P in world_views], axis=0)
    return float(np.max(merged.max(axis=0) - merged.min(axis=0)))


def evaluate(cases: Sequence[EvalCase], criteria: SuccessCriteria,
             cd_voxel: Optional[float] = 0.5) -> EvalReport:
    """Success rate, mean RE/TE and Chamfer distance over registration cases.

    A sample succeeds when every view succeeds after anchor gauge alignment.
    Chamfer distance compares the aligned registered clouds with the
    ground-truth merged cloud, both voxel-downsampled at ``cd_voxel``
    (``None`` computes it on the full clouds).
    """
    if len(cases) == 0:
        raise EmptyInput("evaluation needs at least one case")
    rows = []
    for case in cases:
        n = len(case.views)
        if len(case.est_poses) != n or len(case.gt_poses) != n:
            raise LengthMismatch(f"sample {case.sample_id}: poses and views disagree")
        anchor = int(np.argmax([len(as_cloud(v)) for v in case.views]))
        gt = [_rigid(T) for T in case.gt_poses]
        world = [T.apply(P) for T, P in zip(gt, case.views)]
        extent = scene_extent(world)
        aligned = gauge_align(case.est_poses, gt, anchor)
        errs, ok = [], True
        for i in range(n):
            flag, (re, te) = pairwise_success(aligned[i], gt[i], criteria, source=case.views[i], extent=extent)
            errs.append((re, te))
            ok = ok and flag
        pred = np.concatenate([T.apply(P) for T, P in zip(aligned, case.views)], axis=0)
        truth = np.concatenate(world, axis=0)
        if cd_voxel is not None:
            pred, truth = voxel_downsample(pred, cd_voxel), voxel_downsample(truth, cd_voxel)
        re_arr = np.array([e[0] for e in errs])
        te_arr = np.array([e[1] for e in errs])
        te_thr = criteria.translation_threshold(extent) if criteria.kind == "pose-thresholds" else None
        rows.append({
            "sample_id": case.sample_id,
            "n_views": n,
            "anchor_view": anchor,
            "success": bool(ok),
            "mean_re_deg": float(re_arr.mean()),
            "mean_te_m": float(te_arr.mean()),
            "max_re_deg": float(re_arr.max()),
            "max_te_m": float(te_arr.max()),
            "chamfer_m": chamfer_distance(pred, truth),
            "rigidity_residual": float(case.rigidity_residual),
            "te_threshold_m": float(te_thr) if te_thr is not None else float("nan"),
        })
    return EvalReport(
        success_rate=100.0 * float(np.mean([r["success"] for r in rows])),
        mean_re=float(np.mean([r["mean_re_deg"] for r in rows])),
        mean_te=float(np.mean([r["mean_te_m"] for r in rows])),
        chamfer=float(np.mean([r["chamfer_m"] for r in rows])),
        rows=rows,
        criteria=asdict(criteria),
        cd_voxel=cd_voxel,
    )

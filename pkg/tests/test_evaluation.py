import json

import numpy as np
import pytest

from conftest import random_rigid
from flowreg.errors import EmptyInput, LengthMismatch
from flowreg.evaluation import (
    REPORT_COLUMNS,
    EvalCase,
    SuccessCriteria,
    correspondence_rmse,
    evaluate,
    gauge_align,
    multiview_errors,
    pairwise_success,
    scene_extent,
)
from flowreg.geometry import RigidTransform


def rot_z(deg):
    a = np.radians(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def test_correspondence_rmse(rng):
    P = rng.normal(size=(50, 3))
    T = random_rigid(rng)
    assert correspondence_rmse(P, T, T) == 0.0
    shift = RigidTransform(T.rotation, T.translation + [0.3, 0.0, 0.4])
    assert correspondence_rmse(P, shift, T) == pytest.approx(0.5, abs=1e-12)
    U = random_rigid(rng)
    direct = np.sqrt(np.mean([np.sum((U.rotation @ p + U.translation - T.rotation @ p - T.translation) ** 2)
                              for p in P]))
    assert correspondence_rmse(P, U, T) == pytest.approx(direct, rel=1e-12)


def test_criteria_validation():
    with pytest.raises(ValueError):
        SuccessCriteria(kind="pose-thresholds", re_threshold=5.0)
    with pytest.raises(ValueError):
        SuccessCriteria(kind="pointwise-rmse")
    with pytest.raises(ValueError):
        SuccessCriteria(kind="other", re_threshold=1.0, te_threshold=1.0)
    with pytest.raises(ValueError):
        SuccessCriteria(re_threshold=5.0, te_fraction=0.02).translation_threshold()


def test_pairwise_success_boundaries():
    gt = RigidTransform.identity()
    crit = SuccessCriteria.kitti()
    ok, (re, te) = pairwise_success(RigidTransform(rot_z(5.0), np.zeros(3)), gt, crit)
    assert re == pytest.approx(5.0, abs=1e-9)
    assert ok == (re <= 5.0)
    assert pairwise_success(RigidTransform(rot_z(4.999), np.zeros(3)), gt, crit)[0]
    assert not pairwise_success(RigidTransform(rot_z(5.01), np.zeros(3)), gt, crit)[0]
    assert pairwise_success(RigidTransform(np.eye(3), [2.0, 0, 0]), gt, crit)[0]
    assert not pairwise_success(RigidTransform(np.eye(3), [2.001, 0, 0]), gt, crit)[0]
    rel = SuccessCriteria(re_threshold=5.0, te_fraction=0.02)
    assert pairwise_success(RigidTransform(np.eye(3), [1.0, 0, 0]), gt, rel, extent=50.0)[0]
    assert not pairwise_success(RigidTransform(np.eye(3), [1.0, 0, 0]), gt, rel, extent=49.0)[0]


def test_pointwise_rmse_success(rng):
    P = rng.normal(size=(30, 3))
    crit = SuccessCriteria.threedmatch()
    gt = RigidTransform.identity()
    assert pairwise_success(RigidTransform(np.eye(3), [0.2, 0, 0]), gt, crit, source=P)[0]
    assert not pairwise_success(RigidTransform(np.eye(3), [0.21, 0, 0]), gt, crit, source=P)[0]
    with pytest.raises(ValueError):
        pairwise_success(gt, gt, crit)


def test_multiview_gauge_invariance(rng):
    gt = [random_rigid(rng) for _ in range(4)]
    est = [RigidTransform(T.rotation @ rot_z(0.5 * i), T.translation + 0.01 * i) for i, T in enumerate(gt)]
    base = multiview_errors(est, gt, anchor_view=1)
    G = random_rigid(rng)
    moved = multiview_errors([G.compose(T) for T in est], gt, anchor_view=1)
    assert np.allclose(base, moved, atol=1e-9)
    assert base[1] == pytest.approx((0.0, 0.0), abs=1e-7)
    # direct recomputation from the definition
    H = gt[1].as_matrix() @ np.linalg.inv(est[1].as_matrix())
    for (re, te), E, T in zip(base, est, gt):
        A = H @ E.as_matrix()
        cos = np.clip((np.trace(T.rotation.T @ A[:3, :3]) - 1) / 2, -1, 1)
        assert re == pytest.approx(np.degrees(np.arccos(cos)), abs=1e-5)
        assert te == pytest.approx(np.linalg.norm(A[:3, 3] - T.translation), abs=1e-9)


def test_multiview_errors_validation(rng):
    T = random_rigid(rng)
    with pytest.raises(LengthMismatch):
        multiview_errors([T, T], [T])
    with pytest.raises(LengthMismatch):
        multiview_errors([T], [T])


def test_gauge_align_anchor_exact(rng):
    gt = [random_rigid(rng) for _ in range(3)]
    est = [random_rigid(rng) for _ in range(3)]
    aligned = gauge_align(est, gt, 2)
    assert np.allclose(aligned[2].as_matrix(), gt[2].as_matrix(), atol=1e-12)


def _case(rng, n=3, perfect=True, sample_id=0):
    views = [rng.uniform(0, 10, size=(40 + 10 * i, 3)) for i in range(n)]
    gt = [random_rigid(rng) for _ in range(n)]
    G = random_rigid(rng)
    est = [G.compose(T) for T in gt]
    if not perfect:
        est[0] = RigidTransform(est[0].rotation @ rot_z(20.0), est[0].translation)
    return EvalCase(est, gt, views, sample_id, 0.0)


def test_evaluate_perfect_and_rows(rng):
    cases = [_case(rng, sample_id=i) for i in range(4)] + [_case(rng, perfect=False, sample_id=4)]
    rep = evaluate(cases, SuccessCriteria(re_threshold=5.0, te_fraction=0.02), cd_voxel=None)
    assert rep.success_rate == pytest.approx(80.0)
    assert [r["success"] for r in rep.rows] == [True] * 4 + [False]
    for r in rep.rows[:4]:
        assert r["chamfer_m"] < 1e-6 and r["max_re_deg"] < 1e-5
        assert r["anchor_view"] == 2
    assert rep.mean_re == pytest.approx(np.mean([r["mean_re_deg"] for r in rep.rows]))
    assert rep.mean_te == pytest.approx(np.mean([r["mean_te_m"] for r in rep.rows]))
    assert rep.chamfer == pytest.approx(np.mean([r["chamfer_m"] for r in rep.rows]))
    world = [T.apply(P) for T, P in zip(cases[0].gt_poses, cases[0].views)]
    assert rep.rows[0]["te_threshold_m"] == pytest.approx(0.02 * scene_extent(world))


def test_evaluate_monotone_in_threshold():
    rng = np.random.default_rng(3)
    cases = []
    for i in range(8):
        c = _case(rng, sample_id=i)
        c.est_poses[0] = RigidTransform(c.est_poses[0].rotation @ rot_z(1.5 * i), c.est_poses[0].translation)
        cases.append(c)
    rates = [evaluate(cases, SuccessCriteria(re_threshold=thr, te_threshold=100.0)).success_rate
             for thr in (1.0, 3.0, 6.0, 20.0)]
    assert rates == sorted(rates) and rates[-1] == 100.0


def test_report_serialization_deterministic(rng):
    cases = [_case(rng, sample_id=i) for i in range(3)]
    crit = SuccessCriteria(re_threshold=5.0, te_fraction=0.02)
    a, b = evaluate(cases, crit), evaluate(cases, crit)
    assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()
    header = a.to_csv().splitlines()[0].split(",")
    assert tuple(header) == REPORT_COLUMNS
    doc = json.loads(a.to_json())
    assert doc["n_samples"] == 3 and doc["cd_voxel_m"] == 0.5


def test_evaluate_errors(rng):
    crit = SuccessCriteria.kitti()
    with pytest.raises(EmptyInput):
        evaluate([], crit)
    c = _case(rng)
    c.gt_poses = c.gt_poses[:-1]
    with pytest.raises(LengthMismatch):
        evaluate([c], crit)

"""Acceptance suite: one test per headline criterion, each reported as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``. The desk-scale test needs the
shipped checkpoint ``artifacts/desk_model.pfrg`` (see ``demos/train_desk_model.py``)
and takes several minutes on one CPU core.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats
from scipy.spatial.transform import Rotation

from conftest import ACCEPTANCE_RESULTS, random_rigid
from test_curation import independent_valid
from test_geometry import exhaustive_chamfer
from test_model import finite_difference_check, make_item, randomize
from test_sampler import rigid_problem
from test_sampling import greedy_fps_reference

from flowreg.canonicalize import canonicalize_inputs, canonicalize_target
from flowreg.curation import CurationConfig, generate_samples, synthetic_sequence, synthetic_suite
from flowreg.evaluation import EvalCase, SuccessCriteria, evaluate
from flowreg.geometry import (
    chamfer_distance,
    kabsch_align,
    rigidity_residual,
    rotation_error_deg,
    translation_error_m,
)
from flowreg.model import AnalyticVelocity, ModelConfig, VelocityField, collate, load_model, sample_timestep
from flowreg.sampler import SamplerConfig, euler_integrate, register, rigidity_forcing_integrate, split_views
from flowreg.sampling import SampledView, SamplingConfig, farthest_point_sampling
from flowreg.training import samples_from_views

ROOT = Path(__file__).resolve().parents[1]
DESK_CHECKPOINT = ROOT / "artifacts" / "desk_model.pfrg"
# smaller keypoint budget and patch radius for the 20 m synthetic scenes
DESK_SAMPLING = SamplingConfig(v_d=0.2, v_c=0.25, alpha_s=0.08, r_s=1.0)
DESK_HELD_OUT_SEED = 2  # training scenes come from seed 1


def record(name, passed, detail):
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
    assert passed, f"{name}: {detail}"


def test_kabsch_oracle():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_re = worst_te = 0.0
    for _ in range(1000):
        C = rng.normal(size=(16, 3)) * 3
        T = random_rigid(rng, 10.0)
        est = kabsch_align(C, T.apply(C))
        worst_re = max(worst_re, rotation_error_deg(T.rotation, est.rotation))
        worst_te = max(worst_te, translation_error_m(T.translation, est.translation))
    elapsed = time.perf_counter() - start
    record("Kabsch oracle", worst_re < 1e-6 and worst_te < 1e-9 and elapsed < 5.0,
           f"1000 pairs, max RE {worst_re:.2e} deg, max TE {worst_te:.2e} m, {elapsed:.2f} s")


def test_fps_equivalence():
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        P = rng.normal(size=(n, 3))
        K = int(rng.integers(1, n + 1))
        first = int(rng.integers(n))
        got = farthest_point_sampling(P, K, first_index=first).tolist()
        mismatches += got != greedy_fps_reference(P, K, first)
    record("FPS equivalence", mismatches == 0, f"{100 - mismatches}/100 index sequences identical")


def test_chamfer_equivalence():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        A, B = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
        worst = max(worst, abs(chamfer_distance(A, B) - exhaustive_chamfer(A, B)))
    record("Chamfer equivalence", worst <= 1e-9, f"100 pairs, max |diff| {worst:.2e}")


def test_gradient_check():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    start = time.perf_counter()
    model = randomize(VelocityField(ModelConfig(blocks=2, hidden=16, heads=2, time_embed_dim=16)).double(), std=0.2)
    batch = collate([make_item(rng, [6, 6])], torch.float64)
    t = torch.tensor([0.37], dtype=torch.float64)
    noise = torch.randn(1, 12, 3, dtype=torch.float64)
    worst, count, failures = finite_difference_check(model, batch, t, noise)
    elapsed = time.perf_counter() - start
    total = sum(p.numel() for p in model.parameters())
    record("Gradient check", not failures and count == total and elapsed < 120.0,
           f"{count} scalars, worst relative error {worst:.2e}, {len(failures)} tensors over 1e-3, {elapsed:.1f} s")


def test_flow_exactness():
    rng = np.random.default_rng(3)
    worst_euler = worst_forced = worst_rigid = 0.0
    for steps in (1, 10):
        for _ in range(20):
            Q, _, X0 = rigid_problem(rng)
            X1 = rng.normal(size=X0.shape)
            oracle = AnalyticVelocity(X0, X1)
            worst_euler = max(worst_euler, np.max(np.abs(euler_integrate(oracle, X1, None, steps) - X0)))
            forced = rigidity_forcing_integrate(oracle, X1, None, Q, steps)
            worst_forced = max(worst_forced, np.max(np.abs(forced - X0)))
    sizes = [8, 11, 6]
    for k in range(20):
        Q, _, X0 = rigid_problem(rng, sizes)
        junk = np.random.default_rng(k)
        out = rigidity_forcing_integrate(lambda t, x, c: junk.normal(size=x.shape) * 5, rng.normal(size=X0.shape),
                                         None, Q, 10)
        worst_rigid = max(worst_rigid, rigidity_residual(split_views(out, sizes), Q))
    ok = max(worst_euler, worst_forced, worst_rigid) < 1e-9
    record("Flow exactness", ok, f"Euler err {worst_euler:.1e}, forcing err {worst_forced:.1e}, "
                                 f"forced residual under random velocity {worst_rigid:.1e}")


def test_canonicalization_consistency():
    worst = 0.0
    for i, scene in enumerate(synthetic_suite(11, 100)):
        rng = np.random.default_rng(i)
        kps = [P[rng.choice(len(P), size=min(200, len(P)), replace=False)] for P in scene.views]
        canon = canonicalize_inputs(kps, rng)
        x0, _ = canonicalize_target(kps, scene.gt_poses, canon)
        sizes = [len(q) for q in kps]
        worst = max(worst, rigidity_residual(split_views(x0, sizes), canon.normalized_keypoints))
    record("Canonicalization consistency", worst < 1e-9, f"100 synthetic samples, max residual {worst:.1e}")


def test_curation_validity():
    cfg = CurationConfig(tau_time=0.3, tau_space=0.5, beta=1.0, T_max=10, N_min=2, N_max=4,
                         F_min=1, F_max=2, d_max=10.0, eps_overlap=0.05, v_overlap=0.5)
    emitted = valid = 0
    for seed in range(3):
        seq = synthetic_sequence(np.random.default_rng(seed), n_frames=60)
        for s in generate_samples(seq, cfg, np.random.default_rng(seed)):
            emitted += 1
            valid += independent_valid(s.world_views(), cfg.d_max, cfg.eps_overlap, cfg.v_overlap)
    record("Curation validity", emitted > 0 and valid == emitted, f"{valid}/{emitted} samples re-verified")


def test_metric_spot_checks():
    rng = np.random.default_rng(4)
    I = np.eye(3)
    Rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
    checks = [
        rotation_error_deg(I, I) == 0.0,
        abs(rotation_error_deg(I, Rz) - 90.0) < 1e-9,
        translation_error_m(np.zeros(3), np.zeros(3)) == 0.0,
        translation_error_m(np.zeros(3), [3.0, 4.0, 0.0]) == 5.0,
        chamfer_distance(np.zeros((1, 3)), np.zeros((1, 3))) == 0.0,
        abs(chamfer_distance(np.zeros((1, 3)), [[2.5, 0, 0]]) - 2.5) < 1e-12,
    ]
    for _ in range(100):
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        theta = rng.uniform(1e-3, np.pi - 1e-3)
        R = Rotation.from_rotvec(theta * u).as_matrix()
        checks.append(abs(rotation_error_deg(I, R) - np.degrees(theta)) < 1e-9)
        a, b = rng.normal(size=3), rng.normal(size=3)
        checks.append(abs(translation_error_m(a, b) - np.sqrt(sum((a - b) ** 2))) < 1e-12)
    t = sample_timestep(np.random.default_rng(5), 100_000)
    ks = stats.kstest(t, stats.arcsine.cdf)
    ok = all(checks) and ks.pvalue > 1e-3
    record("Metric spot checks", ok, f"{sum(checks)}/{len(checks)} formula checks, "
                                     f"arcsine KS D={ks.statistic:.4f} p={ks.pvalue:.3f}")


@pytest.mark.slow
def test_desk_scale_end_to_end():
    name = "Desk-scale end-to-end"
    if not DESK_CHECKPOINT.exists():
        record(name, False, f"missing {DESK_CHECKPOINT.relative_to(ROOT)}; run demos/train_desk_model.py")
    model = load_model(DESK_CHECKPOINT)
    model.eval()
    scenes = list(synthetic_suite(DESK_HELD_OUT_SEED, 100))
    sampled = samples_from_views([s.views for s in scenes], [s.gt_poses for s in scenes], DESK_SAMPLING)
    crit = SuccessCriteria(re_threshold=5.0, te_fraction=0.02)
    rates = {}
    for label, S, forcing in (("euler S=1", 1, False), ("forcing S=1", 1, True), ("forcing S=5", 5, True)):
        cases = []
        for i, (scene, s) in enumerate(zip(scenes, sampled)):
            views = [SampledView(k, d, k) for k, d in zip(s.keypoints, s.descriptors)]
            res = register(scene.views, model, SamplerConfig(generations=S, rigidity_forcing=forcing, noise_seed=i),
                           DESK_SAMPLING, sampled=views)
            cases.append(EvalCase.from_result(res, scene.gt_poses, scene.views, i))
        rates[label] = evaluate(cases, crit, cd_voxel=0.2).success_rate
    sr = rates["forcing S=5"]
    ok = (sr >= 90.0 and sr >= rates["forcing S=1"] - 1.0
          and rates["forcing S=1"] >= rates["euler S=1"] - 1.0)
    record(name, ok, "SR " + ", ".join(f"{k} {v:.0f}%" for k, v in rates.items())
           + " (need S=5 >= 90, S=5 >= S=1 - 1, forcing >= Euler - 1)")

"""Inference: Euler integration, rigidity forcing, selection, pose recovery, lifting.

A velocity model here is any callable ``model(t, x, batch) -> v`` on
``(S, K, 3)`` arrays, where ``S`` independent generations are integrated side
by side. ``TorchVelocity`` adapts a trained ``VelocityField``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .canonicalize import CanonicalizedViews, canonicalize_inputs
from .errors import LengthMismatch, NonFiniteState, TooFewViews
from .geometry import (
    RigidTransform,
    SimilarityTransform,
    as_cloud,
    kabsch_align,
    rigid_projection,
    rigidity_residual,
)
from .model import FlowBatch, VelocityField, collate
from .sampling import SamplingConfig, describe_patch, sample_view

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 10
    generations: int = 5
    rigidity_forcing: bool = True
    noise_seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.generations < 1:
            raise ValueError("steps and generations must be >= 1")


@dataclass(eq=False)
class RegistrationResult:
    poses_canonical: list  # RigidTransform per view, Q̄_i -> X̂_i(0)
    poses_metric: list  # SimilarityTransform per view, input frame -> registered frame
    keypoints_generated: np.ndarray  # selected X̂(0), (K, 3)
    rigidity_residual: float
    residuals: list
    selected: int
    canon: CanonicalizedViews
    sampled: list = field(default_factory=list)
    view_seeds: list = field(default_factory=list)
    registered: list = field(default_factory=list)  # dense clouds in the registered frame


def time_grid(steps: int) -> np.ndarray:
    """Flow times ``1, 1 - 1/k, ..., 0`` with every entry an exact ratio."""
    return np.array([(steps - k) / steps for k in range(steps + 1)])


def split_views(x: np.ndarray, sizes: Sequence[int]) -> list:
    return np.split(x, np.cumsum(sizes)[:-1], axis=-2)


def _check_finite(x, step):
    if not np.all(np.isfinite(x)):
        raise NonFiniteState(f"non-finite flow state at step {step}", step=step)


def euler_integrate(model, x1, cond=None, steps: int = 10, trajectory: Optional[list] = None):
    """Plain Euler from t=1 to t=0: ``X(t - dt) = X(t) - dt * V(t, X(t))``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x1, dtype=np.float64)
    grid = time_grid(steps)
    dt = 1.0 / steps
    for k in range(steps):
        t = grid[k]
        if trajectory is not None:
            trajectory.append(t)
        x = x - dt * np.asarray(model(t, x, cond), dtype=np.float64)
        _check_finite(x, k)
    if trajectory is not None:
        trajectory.append(grid[-1])
    return x


def _project(y, inputs):
    """Rigid projection of every generation in ``y`` (S, K, 3) or (K, 3)."""
    sizes = [len(q) for q in inputs]
    flat = y.reshape(-1, *y.shape[-2:])
    out = np.empty_like(flat)
    for g in range(flat.shape[0]):
        proj, _ = rigid_projection(split_views(flat[g], sizes), inputs)
        out[g] = np.concatenate(proj, axis=0)
    return out.reshape(y.shape)


def rigidity_forcing_integrate(model, x1, cond, inputs: Sequence, steps: int = 10,
                               return_extrapolation: bool = False, trajectory: Optional[list] = None):
    """Euler integration that re-projects the clean estimate onto rigid view orbits.

    Each step extrapolates ``Y = X(t) - t V``, replaces every view of ``Y`` by
    its Kabsch projection of the canonical input view, and re-noises to
    ``X(t') = (1 - t') Pi(Y) + t' X(1)``. The last step lands on ``Pi(Y)``.

    With ``return_extrapolation`` the final pre-projection ``Y`` is returned
    too; that is the estimate whose rigidity residual drives selection.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    inputs = [as_cloud(q) for q in inputs]
    x1 = np.array(x1, dtype=np.float64)
    if x1.shape[-2] != sum(len(q) for q in inputs):
        raise LengthMismatch("noise point count does not match the input views")
    grid = time_grid(steps)
    x = x1.copy()
    y = x
    for k in range(steps):
        t, t_next = grid[k], grid[k + 1]
        if trajectory is not None:
            trajectory.append(t)
        v = np.asarray(model(t, x, cond), dtype=np.float64)
        y = x - t * v
        _check_finite(y, k)
        projected = _project(y, inputs)
        x = projected if t_next == 0.0 else (1.0 - t_next) * projected + t_next * x1
        _check_finite(x, k)
    if trajectory is not None:
        trajectory.append(grid[-1])
    if return_extrapolation:
        return x, y
    return x


def select_by_rigidity(generations: Sequence, inputs: Sequence) -> tuple[int, list]:
    """Index of the generation with the lowest rigidity residual (ties: lowest index)."""
    sizes = [len(q) for q in inputs]
    residuals = [rigidity_residual(split_views(np.asarray(g), sizes), inputs) for g in generations]
    return int(np.argmin(residuals)), residuals


def recover_poses(x0, inputs: Sequence) -> list:
    """Per-view Kabsch transforms mapping each canonical input onto its generated subset."""
    sizes = [len(q) for q in inputs]
    return [kabsch_align(q, xi) for q, xi in zip(inputs, split_views(np.asarray(x0), sizes))]


def lift_to_metric(poses: Sequence[RigidTransform], canon: CanonicalizedViews,
                   dense: Optional[Sequence] = None):
    """Compose canonical poses with the canonicalization and undo the 1/s scaling.

    Returns ``(registered dense clouds, metric poses)``; each metric pose is
    ``S_s ∘ T̂_i ∘ T̄_i`` and maps the original view frame into the registered
    frame at metric scale (its scale is 1 up to round-off).
    """
    if len(poses) != len(canon.view_transforms):
        raise LengthMismatch(f"{len(poses)} poses for {len(canon.view_transforms)} views")
    unscale = SimilarityTransform(canon.global_scale, np.eye(3), np.zeros(3))
    metric = [
        unscale.compose(SimilarityTransform.from_rigid(T_hat).compose(T_bar))
        for T_hat, T_bar in zip(poses, canon.view_transforms)
    ]
    registered = []
    if dense is not None:
        if len(dense) != len(metric):
            raise LengthMismatch(f"{len(dense)} dense clouds for {len(metric)} poses")
        registered = [T.apply(P) for T, P in zip(metric, dense)]
    return registered, metric


class TorchVelocity:
    """Adapt a ``VelocityField`` to the numpy sampler interface.

    The condition tokens are embedded once and reused at every step.
    """

    def __init__(self, model: VelocityField, batch: FlowBatch):
        self.model = model
        self.batch = batch
        self._cache = {}

    def _batch_for(self, S):
        if S not in self._cache:
            b = self.batch.repeat(S) if S != self.batch.points.shape[0] else self.batch
            with torch.no_grad():
                cond = self.model.embed_condition(b)
            self._cache[S] = (b, cond)
        return self._cache[S]

    def __call__(self, t, x, cond=None):
        x = np.asarray(x)
        squeeze = x.ndim == 2
        xb = x[None] if squeeze else x
        b, c = self._batch_for(xb.shape[0])
        with torch.no_grad():
            v = self.model(float(t), torch.as_tensor(xb, dtype=torch.float32), b, cond=c)
        v = v.numpy().astype(np.float64)
        return v[0] if squeeze else v


def condition_batch(canon: CanonicalizedViews, sampled: Sequence) -> FlowBatch:
    return collate([{
        "points": canon.stacked,
        "descriptors": np.concatenate([s.descriptors for s in sampled], axis=0),
        "scale": canon.global_scale,
        "view_ids": canon.view_ids,
    }])


def derive_view_seeds(root: int, n_views: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root).spawn(n_views)]


def draw_noise(view_seeds: Sequence[int], sizes: Sequence[int], generation: int) -> np.ndarray:
    """Gaussian X(1) built from per-view streams so noise follows view identity."""
    return np.concatenate([
        np.random.default_rng([seed, 2, generation]).standard_normal((n, 3))
        for seed, n in zip(view_seeds, sizes)
    ], axis=0)


def register(views: Sequence, model, sampler_cfg: SamplerConfig = SamplerConfig(),
             sampling_cfg: SamplingConfig = SamplingConfig(), view_seeds: Optional[Sequence[int]] = None,
             descriptor=describe_patch, sampled: Optional[Sequence] = None) -> RegistrationResult:
    """Register dense views end to end.

    ``model`` is a ``VelocityField`` or any numpy velocity callable. Every
    random draw is keyed by a per-view seed, so permuting the views (with their
    seeds) permutes the outputs. Pass ``sampled`` to reuse cached keypoints.
    """
    views = [as_cloud(v) for v in views]
    if len(views) < 2:
        raise TooFewViews(f"registration needs at least 2 views, got {len(views)}")
    if view_seeds is None:
        view_seeds = derive_view_seeds(sampler_cfg.noise_seed, len(views))
    if len(view_seeds) != len(views):
        raise LengthMismatch(f"{len(view_seeds)} seeds for {len(views)} views")
    if sampled is None:
        sampled = [sample_view(P, replace(sampling_cfg, seed=seed), descriptor)
                   for P, seed in zip(views, view_seeds)]
    canon = canonicalize_inputs(sampled, [np.random.default_rng([s, 1]) for s in view_seeds])
    inputs = canon.normalized_keypoints
    sizes = [len(q) for q in inputs]

    S = sampler_cfg.generations
    x1 = np.stack([draw_noise(view_seeds, sizes, g) for g in range(S)])
    if isinstance(model, VelocityField):
        velocity = TorchVelocity(model, condition_batch(canon, sampled))
    else:
        velocity = model
    if sampler_cfg.rigidity_forcing:
        final, extrapolated = rigidity_forcing_integrate(
            velocity, x1, None, inputs, sampler_cfg.steps, return_extrapolation=True)
        selected, residuals = select_by_rigidity(list(extrapolated), inputs)
    else:
        final = euler_integrate(velocity, x1, None, sampler_cfg.steps)
        selected, residuals = select_by_rigidity(list(final), inputs)
    x0 = final[selected]
    poses = recover_poses(x0, inputs)
    registered, metric = lift_to_metric(poses, canon, views)
    log.debug("selected generation %d of %d, residuals %s", selected, S, residuals)
    return RegistrationResult(
        poses_canonical=poses,
        poses_metric=metric,
        keypoints_generated=x0,
        rigidity_residual=float(residuals[selected]),
        residuals=[float(r) for r in residuals],
        selected=selected,
        canon=canon,
        sampled=list(sampled),
        view_seeds=list(view_seeds),
        registered=registered,
    )

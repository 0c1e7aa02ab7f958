"""Flow-matching training loop with token-budget batching and resumable checkpoints.

All randomness is derived from ``(seed, epoch, sample_id)`` for canonicalization
and from ``(seed, step)`` for flow times and noise, so a run resumed from a
checkpoint replays exactly the same batches.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .canonicalize import canonicalize_inputs, canonicalize_target
from .errors import EmptyDataset, NonFiniteLoss
from .geometry import RigidTransform
from .model import (
    FlowBatch,
    ModelConfig,
    VelocityField,
    collate,
    flow_matching_loss,
    read_checkpoint,
    sample_timestep,
    write_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    max_tokens: int = 2048
    lr_matrix: float = 2e-3
    lr_vector: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    # epochs (as fractions of the run) at which both learning rates halve
    lr_halving: tuple = (0.27, 0.37, 0.47, 0.57, 0.67)
    warmup_steps: int = 200
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints
    checkpoint_path: Optional[str] = None
    seed: int = 0
    max_steps: Optional[int] = None
    # fresh canonical rotations every epoch; off keys them to the sample only
    augment: bool = True


@dataclass
class TrainingSample:
    """Preprocessed sample: per-view keypoints/descriptors plus ground-truth poses."""

    keypoints: list  # per view (K_i, 3)
    descriptors: list  # per view (K_i, D)
    gt_poses: list  # per view RigidTransform
    sample_id: int = 0

    @property
    def num_tokens(self) -> int:
        return int(sum(len(q) for q in self.keypoints))


@dataclass
class TrainResult:
    model: VelocityField
    losses: list = field(default_factory=list)
    step: int = 0
    epoch: int = 0


def anchor_gauge(poses: Sequence[RigidTransform], reference: int) -> list:
    """Re-express poses so the reference view's pose is the identity."""
    G = poses[reference].inverse()
    return [G.compose(T) for T in poses]


def canonical_item(sample: TrainingSample, rng: np.random.Generator, anchored: bool = True) -> dict:
    """Canonical inputs and target for one sample.

    With ``anchored`` the world frame is moved onto the largest view, so the
    target orientation is fixed by that view's canonical rotation instead of
    an arbitrary world frame the inputs cannot reveal.
    """
    canon = canonicalize_inputs(sample.keypoints, rng)
    poses = anchor_gauge(sample.gt_poses, canon.reference_view) if anchored else sample.gt_poses
    x0, vids = canonicalize_target(sample.keypoints, poses, canon)
    return {
        "points": canon.stacked,
        "descriptors": np.concatenate(sample.descriptors, axis=0),
        "scale": canon.global_scale,
        "view_ids": vids,
        "target": x0,
        "sample_id": sample.sample_id,
    }


def token_budget_batches(sizes: Sequence[int], max_tokens: int, order: Sequence[int]) -> list:
    """Greedy next-fit packing of whole samples into batches of at most ``max_tokens``."""
    batches, current, used = [], [], 0
    for i in order:
        n = int(sizes[i])
        if n > max_tokens:
            raise ValueError(f"sample {i} has {n} tokens, more than max_tokens={max_tokens}")
        if current and used + n > max_tokens:
            batches.append(current)
            current, used = [], 0
        current.append(int(i))
        used += n
    if current:
        batches.append(current)
    return batches


def epoch_batches(dataset: Sequence[TrainingSample], cfg: TrainConfig, epoch: int) -> list:
    order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(dataset))
    return token_budget_batches([s.num_tokens for s in dataset], cfg.max_tokens, order)


def make_optimizer(model: VelocityField, cfg: TrainConfig) -> torch.optim.Optimizer:
    """AdamW with the matrix / vector learning-rate split."""
    matrices = [p for p in model.parameters() if p.dim() >= 2]
    vectors = [p for p in model.parameters() if p.dim() < 2]
    return torch.optim.AdamW(
        [
            {"params": matrices, "lr": cfg.lr_matrix, "base_lr": cfg.lr_matrix,
             "weight_decay": cfg.weight_decay},
            {"params": vectors, "lr": cfg.lr_vector, "base_lr": cfg.lr_vector,
             "weight_decay": 0.0},
        ],
        betas=tuple(cfg.betas),
    )


def lr_factor(cfg: TrainConfig, epoch: int, step: int) -> float:
    halvings = sum(1 for f in cfg.lr_halving if epoch >= math.floor(f * cfg.epochs))
    warm = min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps > 0 else 1.0
    return warm * 0.5**halvings


def step_noise(cfg: TrainConfig, step: int, batch: FlowBatch):
    rng = np.random.default_rng([cfg.seed, step, 11])
    B, K, _ = batch.target.shape
    t = sample_timestep(rng, B)
    noise = rng.standard_normal((B, K, 3))
    dtype = batch.target.dtype
    noise = torch.as_tensor(noise, dtype=dtype) * batch.valid[..., None].to(dtype)
    return torch.as_tensor(t, dtype=dtype), noise


def _optimizer_tensors(model, opt) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, st in opt.state.items():
        name = names[id(p)]
        out[f"optim.exp_avg.{name}"] = st["exp_avg"]
        out[f"optim.exp_avg_sq.{name}"] = st["exp_avg_sq"]
    return out


def _optimizer_steps(opt) -> dict:
    return {str(i): float(st["step"]) for i, st in enumerate(opt.state.values())}


def save_training_checkpoint(path, model, opt, cfg: TrainConfig, step, epoch, batch_index, losses):
    tensors = dict(model.state_dict())
    tensors.update(_optimizer_tensors(model, opt))
    opt_step = next(iter(_optimizer_steps(opt).values()), 0.0)
    meta = {
        "kind": "training",
        "step": step,
        "epoch": epoch,
        "batch_index": batch_index,
        "optimizer_step": opt_step,
        "train_config": asdict(cfg),
        "losses": [float(x) for x in losses],
    }
    write_checkpoint(path, model.cfg, tensors, meta)


def _restore(path, model, opt):
    config, tensors, meta = read_checkpoint(path)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()
                           if not k.startswith("optim.")})
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = f"optim.exp_avg.{name}"
        if key in tensors:
            opt.state[p] = {
                "step": torch.tensor(meta["optimizer_step"]),
                "exp_avg": torch.from_numpy(tensors[key]),
                "exp_avg_sq": torch.from_numpy(tensors[f"optim.exp_avg_sq.{name}"]),
            }
    return meta


def _canon_rng(cfg: TrainConfig, epoch: int, sample_id: int) -> np.random.Generator:
    if cfg.augment:
        return np.random.default_rng([cfg.seed, epoch, sample_id])
    return np.random.default_rng([cfg.seed, sample_id])


def train(dataset: Sequence[TrainingSample], model_cfg: ModelConfig = ModelConfig(),
          cfg: TrainConfig = TrainConfig(), resume_from=None, callback=None) -> TrainResult:
    """Train a velocity field on preprocessed samples.

    Raises:
        EmptyDataset: no samples.
        NonFiniteLoss: a step produced NaN/inf loss; the message names the
            step and the sample ids of the offending batch.
    """
    if len(dataset) == 0:
        raise EmptyDataset("training needs at least one sample")
    model = VelocityField(model_cfg)
    model.train()
    opt = make_optimizer(model, cfg)
    step, start_epoch, start_batch, losses = 0, 0, 0, []
    if resume_from is not None:
        meta = _restore(resume_from, model, opt)
        step, start_epoch, start_batch = meta["step"], meta["epoch"], meta["batch_index"]
        losses = list(meta.get("losses", []))

    t_start = time.time()
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        batches = epoch_batches(dataset, cfg, epoch)
        first = start_batch if epoch == start_epoch else 0
        for b_idx in range(first, len(batches)):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return TrainResult(model, losses, step, epoch)
            members = batches[b_idx]
            batch = collate([
                canonical_item(dataset[i], _canon_rng(cfg, epoch, dataset[i].sample_id))
                for i in members
            ])
            t, noise = step_noise(cfg, step, batch)
            factor = lr_factor(cfg, epoch, step)
            for group in opt.param_groups:
                group["lr"] = group["base_lr"] * factor
            opt.zero_grad(set_to_none=True)
            loss = flow_matching_loss(model, batch, t, noise)
            if not torch.isfinite(loss):
                ids = [dataset[i].sample_id for i in members]
                raise NonFiniteLoss(f"non-finite loss at step {step} (epoch {epoch}, samples {ids})")
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
            step += 1
            if callback is not None:
                callback(step, epoch, losses[-1])
            if cfg.checkpoint_every and cfg.checkpoint_path and step % cfg.checkpoint_every == 0:
                nxt_epoch, nxt_batch = (epoch, b_idx + 1) if b_idx + 1 < len(batches) else (epoch + 1, 0)
                save_training_checkpoint(cfg.checkpoint_path, model, opt, cfg, step,
                                         nxt_epoch, nxt_batch, losses)
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            recent = losses[-len(batches):] if batches else []
            log.info("epoch %d step %d loss %.5f (%.0fs)", epoch, step,
                     float(np.mean(recent)) if recent else float("nan"), time.time() - t_start)
    return TrainResult(model, losses, step, epoch + 1)


def samples_from_views(views_per_sample, gt_poses_per_sample, sampling_cfg, descriptor=None,
                       start_id: int = 0) -> list:
    """Run keypoint sampling on dense views and package training samples."""
    from dataclasses import replace

    from .sampling import describe_patch, sample_view

    descriptor = descriptor or describe_patch
    out = []
    for n, (views, poses) in enumerate(zip(views_per_sample, gt_poses_per_sample)):
        sid = start_id + n
        kps, descs = [], []
        for i, P in enumerate(views):
            sv = sample_view(P, replace(sampling_cfg, seed=view_seed(sampling_cfg.seed, sid, i)),
                             descriptor)
            kps.append(sv.keypoints)
            descs.append(sv.descriptors)
        out.append(TrainingSample(kps, descs, [RigidTransform(p.rotation, p.translation) for p in poses], sid))
    return out


def view_seed(root: int, sample_id: int, view: int) -> int:
    return int(np.random.SeedSequence([root, sample_id, view]).generate_state(1)[0])

"""Conditional velocity field: an alternating-attention diffusion transformer.

Tokens are keypoints. Each block runs one self-attention layer restricted to
points of the same view followed by one global self-attention layer over all
points of the sample; every attention and feed-forward sublayer is modulated
by the flow time through adaptive layer norm (DiT adaLN-Zero).

Batches are padded: ``view_ids == -1`` marks padding tokens.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ShapeMismatch

CHECKPOINT_MAGIC = b"PFRG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 4
    hidden: int = 128
    heads: int = 4
    descriptor_dim: int = 32
    fourier_frequencies: int = 8
    scale_frequencies: int = 4
    time_embed_dim: int = 128
    mlp_ratio: int = 4
    parameter_init_seed: int = 0

    def __post_init__(self):
        for name in ("blocks", "hidden", "heads", "descriptor_dim", "fourier_frequencies",
                     "scale_frequencies", "time_embed_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")


def fourier_encode(x, n_freq: int) -> np.ndarray:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for k = 0..n_freq-1 along the last axis.

    For a 3-vector the result has length ``6 * n_freq + 3``.
    """
    if n_freq < 1:
        raise ValueError("n_freq must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    arg = (x[..., None, :] * freqs[:, None]).reshape(*x.shape[:-1], -1)
    return np.concatenate([x, np.sin(arg), np.cos(arg)], axis=-1)


def fourier_features(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    freqs = (2.0 ** torch.arange(n_freq, dtype=x.dtype)) * math.pi
    arg = (x[..., None, :] * freqs[:, None]).reshape(*x.shape[:-1], -1)
    return torch.cat([x, torch.sin(arg), torch.cos(arg)], dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of flow time; ``t`` in [0, 1] is stretched to [0, 1000]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def sample_timestep(rng: np.random.Generator, size=None):
    """U-shaped (arcsine-law) flow time: ``sin^2(pi u / 2)`` with u ~ U(0, 1)."""
    u = rng.random(size)
    return np.sin(0.5 * np.pi * u) ** 2


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


@dataclass
class FlowBatch:
    """Padded, model-ready conditioning for B samples of up to K keypoints."""

    points: torch.Tensor  # (B, K, 3) canonical keypoints
    descriptors: torch.Tensor  # (B, K, D)
    log_scale: torch.Tensor  # (B,)
    view_ids: torch.Tensor  # (B, K) long, -1 for padding
    target: Optional[torch.Tensor] = None  # (B, K, 3) X(0) when training
    sample_ids: list = field(default_factory=list)

    @property
    def valid(self) -> torch.Tensor:
        return self.view_ids >= 0

    def to(self, dtype) -> "FlowBatch":
        conv = lambda a: None if a is None else a.to(dtype)  # noqa: E731
        return FlowBatch(conv(self.points), conv(self.descriptors), conv(self.log_scale),
                         self.view_ids, conv(self.target), list(self.sample_ids))

    def repeat(self, n: int) -> "FlowBatch":
        """Tile a single-sample batch ``n`` times along the batch axis."""
        rep = lambda a: None if a is None else a.repeat(n, *([1] * (a.dim() - 1)))  # noqa: E731
        return FlowBatch(rep(self.points), rep(self.descriptors), rep(self.log_scale),
                         rep(self.view_ids), rep(self.target), list(self.sample_ids) * n)


def collate(items, dtype=torch.float32) -> FlowBatch:
    """Pad a list of per-sample dicts (points, descriptors, scale, view_ids[, target])."""
    if not items:
        raise ShapeMismatch("cannot collate an empty batch")
    B = len(items)
    K = max(len(it["points"]) for it in items)
    D = items[0]["descriptors"].shape[1]
    points = np.zeros((B, K, 3))
    desc = np.zeros((B, K, D))
    vids = np.full((B, K), -1, dtype=np.int64)
    has_target = all(it.get("target") is not None for it in items)
    target = np.zeros((B, K, 3)) if has_target else None
    log_scale = np.zeros(B)
    for b, it in enumerate(items):
        n = len(it["points"])
        if it["descriptors"].shape != (n, D) or len(it["view_ids"]) != n:
            raise ShapeMismatch(f"sample {b}: inconsistent point/descriptor/view-id counts")
        points[b, :n] = it["points"]
        desc[b, :n] = it["descriptors"]
        vids[b, :n] = it["view_ids"]
        log_scale[b] = math.log(it["scale"])
        if has_target:
            target[b, :n] = it["target"]
    t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return FlowBatch(t(points), t(desc), t(log_scale), torch.as_tensor(vids),
                     None if target is None else t(target),
                     [it.get("sample_id") for it in items])


def attention_masks(view_ids: torch.Tensor):
    """Boolean (B, K, K) masks for per-view and global attention."""
    valid = view_ids >= 0
    eye = torch.eye(view_ids.shape[1], dtype=torch.bool)[None]
    same_view = (view_ids[:, :, None] == view_ids[:, None, :]) & valid[:, None, :]
    glob = valid[:, None, :].expand(-1, view_ids.shape[1], -1)
    # padding rows attend to themselves so softmax stays finite
    return same_view | eye, glob | eye


class MaskedSelfAttention(nn.Module):
    def __init__(self, hidden, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.proj = nn.Linear(hidden, hidden)

    def forward(self, x, mask):
        B, K, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, K, 3, h, d // h).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None])
        out = out.transpose(1, 2).reshape(B, K, d)
        return self.proj(out)


class AttentionLayer(nn.Module):
    """adaLN-Zero transformer layer: modulated attention then modulated MLP."""

    def __init__(self, hidden, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = MaskedSelfAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, mlp_ratio * hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(mlp_ratio * hidden, hidden),
        )
        self.ada = nn.Linear(hidden, 6 * hidden)

    def forward(self, x, c, mask):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(F.silu(c)).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1), mask)
        x = x + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class AlternatingBlock(nn.Module):
    def __init__(self, hidden, heads, mlp_ratio):
        super().__init__()
        self.view_layer = AttentionLayer(hidden, heads, mlp_ratio)
        self.global_layer = AttentionLayer(hidden, heads, mlp_ratio)

    def forward(self, x, c, view_mask, global_mask, disable_global=False):
        x = self.view_layer(x, c, view_mask)
        if not disable_global:
            x = self.global_layer(x, c, global_mask)
        return x


class VelocityField(nn.Module):
    """V(t, X(t) | C) predicting per-point 3-D velocities."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        d = cfg.hidden
        pos_dim = 6 * cfg.fourier_frequencies + 3
        scale_dim = 2 * cfg.scale_frequencies + 1
        self.cond_embed = nn.Linear(pos_dim + cfg.descriptor_dim + scale_dim, d)
        self.x_embed = nn.Linear(pos_dim, d)
        self.t_embed = nn.Sequential(nn.Linear(cfg.time_embed_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(
            [AlternatingBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.blocks)]
        )
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Linear(d, 2 * d)
        self.head = nn.Linear(d, 3)
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.cfg.parameter_init_seed)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                bound = math.sqrt(6.0 / (m.in_features + m.out_features))
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
        with torch.no_grad():
            for blk in self.blocks:
                for layer in (blk.view_layer, blk.global_layer):
                    layer.ada.weight.zero_()
                    layer.ada.bias.zero_()
            self.final_ada.weight.zero_()
            self.final_ada.bias.zero_()
            self.head.weight.zero_()
            self.head.bias.zero_()

    def embed_condition(self, batch: FlowBatch) -> torch.Tensor:
        """Condition tokens: Fourier(Q̄) ‖ descriptors ‖ Fourier(log s), then linear."""
        cfg = self.cfg
        B, K, _ = batch.points.shape
        if batch.descriptors.shape != (B, K, cfg.descriptor_dim):
            raise ShapeMismatch(
                f"descriptors {tuple(batch.descriptors.shape)} vs expected {(B, K, cfg.descriptor_dim)}"
            )
        if batch.view_ids.shape != (B, K) or batch.log_scale.shape != (B,):
            raise ShapeMismatch("view_ids / log_scale do not match the point batch")
        pos = fourier_features(batch.points, cfg.fourier_frequencies)
        scale = fourier_features(batch.log_scale[:, None], cfg.scale_frequencies)
        feats = torch.cat([pos, batch.descriptors, scale[:, None, :].expand(B, K, -1)], dim=-1)
        return self.cond_embed(feats)

    def forward(self, t, x, batch: FlowBatch, cond: Optional[torch.Tensor] = None,
                disable_global: bool = False) -> torch.Tensor:
        B, K, _ = batch.points.shape
        if x.shape != (B, K, 3):
            raise ShapeMismatch(f"state {tuple(x.shape)} does not match condition {(B, K, 3)}")
        t = torch.as_tensor(t, dtype=x.dtype)
        if t.dim() == 0:
            t = t.expand(B)
        if cond is None:
            cond = self.embed_condition(batch)
        h = self.x_embed(fourier_features(x, self.cfg.fourier_frequencies)) + cond
        c = self.t_embed(timestep_embedding(t, self.cfg.time_embed_dim))
        view_mask, global_mask = attention_masks(batch.view_ids)
        for blk in self.blocks:
            h = blk(h, c, view_mask, global_mask, disable_global=disable_global)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(h), shift, scale))
        return out * batch.valid[..., None].to(out.dtype)


def interpolate(x0, x1, t):
    """Linear path ``X(t) = (1 - t) X(0) + t X(1)`` with per-sample ``t``."""
    t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    return (1 - t) * x0 + t * x1


def flow_matching_loss(model, batch: FlowBatch, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Mean squared error to the straight-path velocity X(1) - X(0) over valid points."""
    if batch.target is None:
        raise ShapeMismatch("batch has no target X(0)")
    if noise.shape != batch.target.shape or t.shape != (batch.target.shape[0],):
        raise ShapeMismatch("noise / time shapes do not match the batch")
    x_t = interpolate(batch.target, noise, t)
    v = model(t, x_t, batch)
    mask = batch.valid[..., None].to(v.dtype)
    err = ((v - (noise - batch.target)) ** 2) * mask
    return err.sum() / (3.0 * mask.sum())


def cfm_loss(model, batch: FlowBatch, t, noise):
    """Loss value and exact gradients for every named parameter."""
    params = dict(model.named_parameters()) if isinstance(model, nn.Module) else {}
    for p in params.values():
        p.grad = None
    loss = flow_matching_loss(model, batch, torch.as_tensor(t, dtype=noise.dtype), noise)
    if params and loss.requires_grad:
        loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    return float(loss.detach()), grads


class AnalyticVelocity:
    """Exact straight-path velocity ``X(1) - X(0)``; a test and calibration hook."""

    def __init__(self, x0, x1):
        self.x0 = x0
        self.x1 = x1

    def __call__(self, t, x, batch=None, *args, **kwargs):
        return self.x1 - self.x0


# ---------------------------------------------------------------------------
# checkpoint I/O


def write_checkpoint(path, config: ModelConfig, tensors: dict, metadata: Optional[dict] = None):
    """Write named float32 tensors in the PFRG container.

    Layout (little-endian): magic ``PFRG`` | u32 version | u32 n | n bytes of
    JSON metadata (holds ``model_config``) | u32 tensor count | per tensor:
    u32 name length, utf-8 name, u32 ndim, ndim x u32 dims, row-major f32 data.
    """
    meta = dict(metadata or {})
    meta["model_config"] = asdict(config)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint(path):
    """Return ``(ModelConfig, {name: np.ndarray}, metadata)``."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a PFRG checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(take(meta_len).decode("utf-8"))
        config = ModelConfig(**meta["model_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after the last tensor")
    return config, tensors, meta


def save_model(path, model: VelocityField, metadata: Optional[dict] = None):
    write_checkpoint(path, model.cfg, dict(model.state_dict()), metadata)


def load_model(path) -> VelocityField:
    config, tensors, _ = read_checkpoint(path)
    model = VelocityField(config)
    state = {k: torch.from_numpy(v) for k, v in tensors.items() if not k.startswith("optim.")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
    model.load_state_dict(state)
    model.eval()
    return model

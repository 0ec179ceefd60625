"""Residual latent mapper over W+ ("mining" the target region of an adapted generator)."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ._io import CheckpointError, load_archive, save_archive
from .generator import StyleGenerator, broadcast_w, make_rng, map_to_w, sample_z, synthesize
from .losses import embedding_norm_loss, global_clip_loss

log = logging.getLogger(__name__)


def default_groups(num_layers: int) -> list[tuple[int, int]]:
    """Coarse/medium/fine row ranges [0,4), [4,8), [8,L), clipped to L; empty groups dropped."""
    bounds = [(0, 4), (4, 8), (8, num_layers)]
    return [(a, min(b, num_layers)) for a, b in bounds if a < min(b, num_layers)]


class GroupMLP(nn.Module):
    """Shared per-row MLP: pixel norm, then fully connected layers with leaky ReLU.
    The last layer starts at zero so the residual starts at zero."""

    def __init__(self, w_dim: int, depth: int = 4, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList()
        for i in range(depth):
            lin = nn.Linear(w_dim, w_dim)
            with torch.no_grad():
                if i == depth - 1:
                    lin.weight.zero_()
                else:
                    lin.weight.copy_(torch.randn(w_dim, w_dim, generator=gen) / math.sqrt(w_dim))
                lin.bias.zero_()
            self.layers.append(lin)

    def forward(self, x):
        x = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i < len(self.layers) - 1:
                x = F.leaky_relu(x, 0.2)
        return x


class LatentMapper(nn.Module):
    def __init__(self, num_layers: int, w_dim: int, groups: Sequence[tuple[int, int]] | None = None,
                 depth: int = 4, seed: int = 0):
        super().__init__()
        groups = [tuple(g) for g in (groups or default_groups(num_layers))]
        covered = sorted(r for a, b in groups for r in range(a, b))
        if covered != list(range(num_layers)):
            raise ValueError(f"groups {groups} must partition rows [0, {num_layers})")
        self.num_layers = num_layers
        self.w_dim = w_dim
        self.depth = depth
        self.groups = groups
        self.nets = nn.ModuleList(GroupMLP(w_dim, depth, seed + i) for i in range(len(groups)))

    def residual(self, wplus: torch.Tensor) -> torch.Tensor:
        if wplus.ndim != 3 or wplus.shape[1:] != (self.num_layers, self.w_dim):
            raise ValueError(f"expected W+ codes (N, {self.num_layers}, {self.w_dim}), got {tuple(wplus.shape)}")
        parts = [net(wplus[:, a:b]) for (a, b), net in zip(self.groups, self.nets)]
        order = sorted(range(len(self.groups)), key=lambda i: self.groups[i][0])
        return torch.cat([parts[i] for i in order], dim=1)

    def forward(self, wplus):
        return wplus + self.residual(wplus)


def apply_mapper(mapper: LatentMapper, wplus: torch.Tensor) -> torch.Tensor:
    return mapper(wplus)


@dataclass
class MapperConfig:
    target_text: str = "Cat"
    steps: int = 200
    batch_size: int = 8
    learning_rate: float = 0.01
    l2_lambda: float = 0.5
    norm_lambda: float = 0.2
    truncation_psi: float = 1.0
    seed: int = 0
    groups: list | None = None
    depth: int = 4


def train_mapper(G: StyleGenerator, target, config: MapperConfig, backends,
                 on_step=None) -> LatentMapper:
    """Fit a residual mapper so that G(M(w)) approaches ``target``.

    Objective per batch: global loss + l2_lambda * mean squared residual +
    norm_lambda * embedding-norm loss. ``target`` is a prompt or one target
    embedding per backend. G is not modified.
    """
    rng = make_rng(config.seed)
    mapper = LatentMapper(G.num_layers, G.cfg.w_dim, config.groups, config.depth, config.seed)
    opt = torch.optim.Adam(mapper.parameters(), lr=config.learning_rate)
    grad_flags = [p.requires_grad for p in G.parameters()]
    for p in G.parameters():
        p.requires_grad_(False)
    try:
        for step in range(1, config.steps + 1):
            with torch.no_grad():
                w = broadcast_w(map_to_w(G, sample_z(config.batch_size, rng, G.cfg.z_dim),
                                         config.truncation_psi), G.num_layers)
            res = mapper.residual(w)
            edited = w + res
            loss = global_clip_loss(synthesize(G, edited), target, backends)
            loss = loss + config.l2_lambda * res.pow(2).mean()
            if config.norm_lambda:
                loss = loss + config.norm_lambda * embedding_norm_loss(G, lambda _: edited, w, backends)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"mapper step {step}: non-finite loss")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if on_step is not None:
                on_step(step, float(loss.detach()))
    finally:
        for p, flag in zip(G.parameters(), grad_flags):
            p.requires_grad_(flag)
    return mapper


def save_mapper(mapper: LatentMapper, path: str | os.PathLike) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in mapper.state_dict().items()}
    manifest = {"kind": "mapper", "num_layers": mapper.num_layers, "w_dim": mapper.w_dim,
                "groups": [list(g) for g in mapper.groups], "depth": mapper.depth}
    save_archive(path, manifest, arrays)


def load_mapper(path: str | os.PathLike) -> LatentMapper:
    manifest, arrays = load_archive(path)
    if manifest.get("kind") != "mapper":
        raise CheckpointError(f"{os.fspath(path)!r} is not a mapper checkpoint")
    mapper = LatentMapper(manifest["num_layers"], manifest["w_dim"],
                          [tuple(g) for g in manifest["groups"]], manifest["depth"])
    try:
        mapper.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    except RuntimeError as exc:
        raise CheckpointError(f"{os.fspath(path)!r}: {exc}") from exc
    return mapper

"""The adaptation loop: a frozen and a trainable generator share one mapping
network; the trainable copy is pushed along a text-defined embedding direction.

Run directory layout (when ``out_dir`` is given)::

    checkpoints/iter_000050.ckpt
    grids/iter_000050.png
    run.log        # one line per iteration: iter, loss, selected layers
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from ._io import digest_json
from .embedding import (EmbeddingBackend, as_backend_list, load_text_table, resolve_backend,
                        text_direction)
from .generator import (CheckpointSnapshot, GeneratorPair, StyleGenerator, broadcast_w, clone_pair,
                        make_rng, map_to_w, mixed_codes, sample_z, save_checkpoint,
                        set_trainable_layers, snapshot, synthesize)
from .layer_selection import rank_layers, select_top_k
from .losses import directional_clip_loss, global_clip_loss, masked_directional_loss, outside_mask_consistency
from .perceptual import PerceptualDistance, PixelL2

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int, last_good: CheckpointSnapshot | None):
        super().__init__(message)
        self.iteration = iteration
        self.last_good = last_good


@dataclass
class AdaptationConfig:
    source_text: str = "Photo"
    target_text: str = "Sketch"
    iterations: int = 300
    batch_size: int = 2
    learning_rate: float = 0.002
    betas: tuple[float, float] = (0.9, 0.999)
    mixing_prob: float = 0.0
    adaptive_k: int | None = None
    reselect_every: int = 1
    n_w: int = 8
    n_i: int = 1
    latent_lr: float = 0.01
    backends: list[str] = field(default_factory=lambda: ["ViT-B/32"])
    text_table: str | None = None
    truncation_psi: float = 1.0
    snapshot_psi: float = 0.7
    snapshot_every: int = 50
    grid_size: int = 16
    grid_cols: int = 4
    seed: int = 0
    source_checkpoint: str | None = None
    extra_losses: dict = field(default_factory=dict)
    # "global" trains against the plain target-text loss; kept as a baseline
    objective: str = "directional"

    def validate(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.mixing_prob <= 1.0:
            raise ValueError("mixing_prob must lie in [0, 1]")
        if not 0.0 <= self.truncation_psi <= 1.0 or not 0.0 <= self.snapshot_psi <= 1.0:
            raise ValueError("truncation psi must lie in [0, 1]")
        if self.adaptive_k is not None and self.adaptive_k < 1:
            raise ValueError("adaptive_k must be >= 1 when set")
        if self.reselect_every < 1 or self.snapshot_every < 1:
            raise ValueError("reselect_every and snapshot_every must be >= 1")
        if not self.backends:
            raise ValueError("at least one backend is required")
        if self.objective not in ("directional", "global"):
            raise ValueError(f"objective must be 'directional' or 'global', got {self.objective!r}")
        unknown = set(self.extra_losses) - {"outside_mask_weight"}
        if unknown:
            raise ValueError(f"unknown extra_losses keys: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def config_hash(self) -> str:
        return digest_json(self.to_dict())


def load_config(path: str | os.PathLike) -> AdaptationConfig:
    return AdaptationConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(config: AdaptationConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


# Published presets for StyleGAN2-FFHQ (18 layers); k=18 means "all layers".
PRESETS: dict[str, dict] = {
    "white_walker": dict(iterations=200, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.9, adaptive_k=18),
    "werewolf": dict(iterations=300, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.9, adaptive_k=12),
    "elf": dict(iterations=200, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.9, adaptive_k=18),
    "edvard_munch": dict(iterations=300, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.9, adaptive_k=18),
    "sketch": dict(iterations=300, backends=["ViT-B/32"], mixing_prob=0.0, adaptive_k=18),
    "pixar": dict(iterations=130, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.9, adaptive_k=18),
    "zombie": dict(iterations=150, backends=["ViT-B/32"], mixing_prob=0.9, adaptive_k=18),
    "cubism": dict(iterations=300, backends=["ViT-B/32"], mixing_prob=0.0, adaptive_k=18),
    "princess": dict(iterations=200, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.9, adaptive_k=18),
    "modigliani": dict(iterations=400, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.0, adaptive_k=18),
    "shire": dict(iterations=300, backends=["ViT-B/32"], mixing_prob=0.9, adaptive_k=14),
    "nicolas_cage": dict(iterations=300, backends=["ViT-B/32"], mixing_prob=0.9, adaptive_k=12),
    "cat": dict(iterations=2000, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.0, adaptive_k=3),
    "bear": dict(iterations=2000, backends=["ViT-B/32", "ViT-B/16"], mixing_prob=0.0, adaptive_k=3),
}


def apply_preset(config: AdaptationConfig, name: str) -> AdaptationConfig:
    try:
        values = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return dataclasses.replace(config, **values, batch_size=2, learning_rate=0.002)


def resolve_backends(config: AdaptationConfig) -> list[EmbeddingBackend]:
    table = load_text_table(config.text_table) if config.text_table else None
    return [resolve_backend(b, text_table=table, seed=config.seed) for b in config.backends]


def effective_k(config: AdaptationConfig, num_layers: int) -> int:
    if config.adaptive_k is None:
        return num_layers
    if config.adaptive_k > num_layers:
        log.warning("adaptive_k=%d exceeds the generator's %d layers; training all layers",
                    config.adaptive_k, num_layers)
    return min(config.adaptive_k, num_layers)


# ---------------------------------------------------------------------------

def training_codes(pair: GeneratorPair, config: AdaptationConfig, rng: torch.Generator) -> torch.Tensor:
    G = pair.trainable
    with torch.no_grad():
        w = map_to_w(G, sample_z(config.batch_size, rng, G.cfg.z_dim), config.truncation_psi)
        if config.mixing_prob > 0:
            w2 = map_to_w(G, sample_z(config.batch_size, rng, G.cfg.z_dim), config.truncation_psi)
            return mixed_codes(w, w2, config.mixing_prob, rng, G.num_layers)
        return broadcast_w(w, G.num_layers)


def training_step(pair: GeneratorPair, codes: torch.Tensor, directions, optimizer: torch.optim.Optimizer,
                  backends, mask_fn: Callable[[torch.Tensor], torch.Tensor] | None = None,
                  outside_mask_weight: float = 0.0,
                  perceptual: PerceptualDistance | None = None,
                  global_target=None) -> float:
    """One optimizer step of the directional loss on the unfrozen layers.

    With ``mask_fn`` the directional term only sees the masked region and the
    region outside the mask is held to the frozen output with weight
    ``outside_mask_weight``. Passing ``global_target`` swaps the directional
    term for the global loss towards that target.
    """
    with torch.no_grad():
        frozen_images = synthesize(pair.frozen, codes)
    train_images = synthesize(pair.trainable, codes)
    if not torch.isfinite(train_images).all():
        raise FloatingPointError("non-finite generator output")
    if global_target is not None:
        loss = global_clip_loss(train_images, global_target, backends)
    elif mask_fn is None:
        loss = directional_clip_loss(train_images, frozen_images, directions, backends)
    else:
        masks = mask_fn(frozen_images)
        loss = masked_directional_loss(train_images, frozen_images, masks, directions, backends)
        if outside_mask_weight:
            loss = loss + outside_mask_weight * outside_mask_consistency(
                train_images, frozen_images, masks, perceptual or PixelL2())
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError("non-finite gradient")
    optimizer.step()
    return float(loss.detach())


def make_optimizer(G: StyleGenerator, config: AdaptationConfig) -> torch.optim.Adam:
    # moments are keyed by parameter; frozen layers keep theirs because Adam
    # skips parameters whose grad is None
    return torch.optim.Adam(G.synthesis_parameters(), lr=config.learning_rate, betas=tuple(config.betas))


# ---------------------------------------------------------------------------
# grids

def to_uint8(images: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) in [0, 1] -> (N, H, W, 3) uint8."""
    x = images.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).cpu().numpy()


def tile_images(images: np.ndarray, cols: int) -> np.ndarray:
    n, h, w, c = images.shape
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * h, cols * w, c), dtype=images.dtype)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[r * h:(r + 1) * h, col * w:(col + 1) * w] = images[i]
    return grid


def save_png(array: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(array).save(path, format="PNG")


def snapshot_grid(G: StyleGenerator, fixed_codes: torch.Tensor, path: str | os.PathLike,
                  cols: int = 4, psi: float = 0.7) -> str:
    """Write a row-major tiled PNG of G's outputs for ``fixed_codes``.

    Codes may be z vectors (N, z_dim), mapped with truncation ``psi``, or
    ready W+ codes (N, L, w_dim).
    """
    with torch.no_grad():
        if fixed_codes.ndim == 2:
            fixed_codes = broadcast_w(map_to_w(G, fixed_codes, psi), G.num_layers)
        images = synthesize(G, fixed_codes)
    save_png(tile_images(to_uint8(images), cols), path)
    return os.fspath(path)


def grid_codes(config: AdaptationConfig, z_dim: int) -> torch.Tensor:
    return sample_z(config.grid_size, config.seed + 1, z_dim)


# ---------------------------------------------------------------------------

def adapt(G_source: StyleGenerator, config: AdaptationConfig, backends=None,
          out_dir: str | os.PathLike | None = None, directions=None, rank_target=None,
          mask_fn=None, perceptual: PerceptualDistance | None = None,
          on_step: Callable[[int, float, set, GeneratorPair], None] | None = None,
          return_pair: bool = False):
    """Adapt a copy of ``G_source`` towards ``config.target_text``.

    ``directions`` overrides the text direction (one per backend) and
    ``rank_target`` the global-loss target used for layer ranking. Returns
    the emitted snapshots, plus the generator pair when ``return_pair``.
    """
    config.validate()
    backends = as_backend_list(backends if backends is not None else resolve_backends(config))
    if directions is None:
        directions = [text_direction(config.source_text, config.target_text, b) for b in backends]
    if rank_target is None:
        rank_target = config.target_text
    config_hash = config.config_hash()
    rng = make_rng(config.seed)
    pair = clone_pair(G_source)
    G = pair.trainable
    L = G.num_layers
    k = effective_k(config, L)
    selected = set(range(L))
    optimizer = make_optimizer(G, config)
    outside_weight = float(config.extra_losses.get("outside_mask_weight", 0.0))
    global_target = rank_target if config.objective == "global" else None

    run_log = None
    fixed = grid_codes(config, G.cfg.z_dim)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "grids").mkdir(parents=True, exist_ok=True)
        save_config(config, out / "config.json")
        run_log = open(out / "run.log", "w")

    snapshots: list[CheckpointSnapshot] = []
    last_good = snapshot(G, 0, config_hash)
    try:
        for it in range(1, config.iterations + 1):
            if k < L and (it - 1) % config.reselect_every == 0:
                ranking = rank_layers(G, rank_target, config.n_w, config.n_i, config.latent_lr,
                                      backends, rng, config.truncation_psi)
                selected = select_top_k(ranking, k)
            set_trainable_layers(G, selected)
            codes = training_codes(pair, config, rng)
            try:
                loss = training_step(pair, codes, directions, optimizer, backends, mask_fn,
                                     outside_weight, perceptual, global_target)
            except FloatingPointError as exc:
                where = last_good.path or f"in-memory snapshot at iteration {last_good.iteration}"
                raise TrainingError(f"iteration {it}: {exc}; last good checkpoint: {where}",
                                    it, last_good) from exc
            layers = ",".join(str(i) for i in sorted(selected))
            if run_log is not None:
                run_log.write(f"{it}\t{loss:.8f}\t{layers}\n")
                run_log.flush()
            log.debug("iter %d loss %.6f layers %s", it, loss, layers)
            if on_step is not None:
                on_step(it, loss, set(selected), pair)
            if it % config.snapshot_every == 0 or it == config.iterations:
                if out_dir is not None:
                    grid = snapshot_grid(G, fixed, out / "grids" / f"iter_{it:06d}.png",
                                         config.grid_cols, config.snapshot_psi)
                    snap = save_checkpoint(G, it, out / "checkpoints" / f"iter_{it:06d}.ckpt",
                                           config_hash, grid)
                else:
                    snap = snapshot(G, it, config_hash)
                snapshots.append(snap)
                last_good = snap
    finally:
        set_trainable_layers(G, ())
        if run_log is not None:
            run_log.close()
    return (snapshots, pair) if return_pair else snapshots

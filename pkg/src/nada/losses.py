"""Embedding-space training objectives.

Every loss is evaluated separately per backend and the per-backend values are
averaged with equal weight. Image batches are (N, 3, H, W) in [0, 1].
"""
from __future__ import annotations

from typing import Callable

import torch

from .embedding import (DegenerateDirectionError, DirectionVector, EmbeddingBackend,
                        as_backend_list, make_direction)
from .perceptual import PerceptualDistance

# clamp for |delta_I| when the trainable copy still equals the frozen one
DIRECTION_DENOM_EPS = 1e-6


def _directions_for(directions, n_backends: int) -> list[DirectionVector]:
    if isinstance(directions, DirectionVector):
        directions = [directions]
    directions = list(directions)
    if len(directions) != n_backends:
        raise ValueError(f"got {len(directions)} directions for {n_backends} backends")
    return directions


def _target_embeddings(target, backends: list[EmbeddingBackend]) -> list[torch.Tensor]:
    if isinstance(target, str):
        return [b.encode_text([target])[0] for b in backends]
    target = list(target) if not isinstance(target, torch.Tensor) else [target]
    if len(target) != len(backends):
        raise ValueError(f"got {len(target)} target embeddings for {len(backends)} backends")
    return target


def global_clip_loss(images: torch.Tensor, target, backends) -> torch.Tensor:
    """Mean cosine distance between image embeddings and a target.

    ``target`` is a prompt, or one embedding per backend.
    """
    backends = as_backend_list(backends)
    if images.shape[0] == 0:
        raise ValueError("empty image batch")
    total = 0.0
    for backend, t in zip(backends, _target_embeddings(target, backends)):
        emb = backend.encode_images(images)
        t = t.to(emb)
        cos = (emb @ t) / (emb.norm(dim=-1) * t.norm())
        total = total + (1.0 - cos).mean()
    return total / len(backends)


def directional_cosine(delta_i: torch.Tensor, delta_t: torch.Tensor) -> torch.Tensor:
    """Per-row cosine between image shifts and the text shift, with |delta_i| clamped."""
    delta_t = delta_t.to(delta_i)
    denom = delta_i.norm(dim=-1).clamp_min(DIRECTION_DENOM_EPS) * delta_t.norm()
    return (delta_i @ delta_t) / denom


def directional_clip_loss(train_images: torch.Tensor, frozen_images: torch.Tensor,
                          directions, backends) -> torch.Tensor:
    backends = as_backend_list(backends)
    directions = _directions_for(directions, len(backends))
    if train_images.shape != frozen_images.shape:
        raise ValueError(f"batch mismatch: {tuple(train_images.shape)} vs {tuple(frozen_images.shape)}")
    total = 0.0
    for backend, d in zip(backends, directions):
        if d.norm <= 1e-8:
            raise DegenerateDirectionError("text direction has (near) zero norm")
        delta_i = backend.encode_images(train_images) - backend.encode_images(frozen_images)
        total = total + (1.0 - directional_cosine(delta_i, d.values)).mean()
    return total / len(backends)


def fewshot_image_direction(real_images: torch.Tensor, source_samples: torch.Tensor,
                            backends) -> list[DirectionVector]:
    """Mean real-image embedding minus mean source-sample embedding, one per backend."""
    backends = as_backend_list(backends)
    if real_images.shape[0] < 1 or source_samples.shape[0] < 1:
        raise ValueError("few-shot direction needs at least one real image and one source sample")
    out = []
    with torch.no_grad():
        for backend in backends:
            values = (backend.encode_images(real_images).mean(dim=0)
                      - backend.encode_images(source_samples).mean(dim=0))
            out.append(make_direction(values, "source samples", "real images"))
    return out


def embedding_norm_loss(G, mapper: Callable[[torch.Tensor], torch.Tensor],
                        w_batch: torch.Tensor, backends) -> torch.Tensor:
    """Mean squared embedding distance between G(w) and G(mapper(w))."""
    from .generator import synthesize

    backends = as_backend_list(backends)
    original = synthesize(G, w_batch)
    edited = synthesize(G, mapper(w_batch))
    total = 0.0
    for backend in backends:
        diff = backend.encode_images(edited) - backend.encode_images(original)
        total = total + diff.pow(2).sum(dim=-1).mean()
    return total / len(backends)


def _mask_batch(masks: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    if masks.ndim == 3:
        masks = masks.unsqueeze(1)
    if masks.ndim != 4 or masks.shape[1] != 1 or masks.shape[0] != images.shape[0] \
            or masks.shape[-2:] != images.shape[-2:]:
        raise ValueError(f"masks of shape {tuple(masks.shape)} do not align with images {tuple(images.shape)}")
    return masks.to(torch.bool)


def masked_directional_loss(train_images, frozen_images, masks, directions, backends) -> torch.Tensor:
    """Directional loss after zeroing every pixel outside the per-image mask."""
    m = _mask_batch(masks, train_images)
    if not m.flatten(1).any(dim=1).all():
        raise ValueError("every mask needs at least one true pixel")
    m = m.to(train_images.dtype)
    return directional_clip_loss(train_images * m, frozen_images * m, directions, backends)


def outside_mask_consistency(train_images, frozen_images, masks,
                             perceptual: PerceptualDistance) -> torch.Tensor:
    """Pixel L2 plus perceptual distance on the region outside the mask."""
    if train_images.shape != frozen_images.shape:
        raise ValueError("batch mismatch")
    keep = (~_mask_batch(masks, train_images)).to(train_images.dtype)
    a, b = train_images * keep, frozen_images * keep
    l2 = (a - b).pow(2).flatten(1).mean(dim=1)
    return (l2 + perceptual(a, b)).mean()

"""Adaptive layer freezing: rank synthesis layers by how far their W+ row moves
under a few steps of latent optimization against the global loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import torch

from .generator import StyleGenerator, broadcast_w, make_rng, map_to_w, sample_z, synthesize
from .losses import global_clip_loss

log = logging.getLogger(__name__)

# k presets: all layers for texture changes, 2/3 of the layers for small shape
# changes (12 of 18 on FFHQ), 3 for animal changes
K_PRESETS = {"texture": None, "shape": "two_thirds", "animal": 3}


def preset_k(name: str, num_layers: int) -> int:
    value = K_PRESETS[name]
    if value is None:
        return num_layers
    if value == "two_thirds":
        return max(1, round(2 * num_layers / 3))
    return min(int(value), num_layers)


@dataclass
class LayerRanking:
    scores: list[float]
    batch_size: int
    opt_iters: int
    k: int | None = None
    degenerate: bool = False

    def __post_init__(self):
        if self.k is not None and self.k > len(self.scores):
            raise ValueError(f"k={self.k} exceeds the number of layers ({len(self.scores)})")


def rank_layers(G: StyleGenerator, target, n_w: int = 8, n_i: int = 1, latent_lr: float = 0.01,
                backends=(), rng: torch.Generator | int | None = None,
                psi: float = 1.0) -> LayerRanking:
    """Score each layer by the mean L2 displacement of its W+ row.

    ``n_w`` codes are sampled in W, replicated to W+, and moved by ``n_i``
    plain gradient-descent steps of size ``latent_lr`` on the global loss
    while the generator stays fixed. ``target`` is a prompt or one target
    embedding per backend. ``n_i=0`` is allowed and yields zero scores.
    """
    if n_w < 1 or n_i < 0:
        raise ValueError("n_w must be >= 1 and n_i >= 0")
    rng = make_rng(rng)
    with torch.no_grad():
        w0 = broadcast_w(map_to_w(G, sample_z(n_w, rng, G.cfg.z_dim), psi), G.num_layers)
    w = w0.clone().requires_grad_(True)
    for _ in range(n_i):
        loss = global_clip_loss(synthesize(G, w), target, backends)
        (grad,) = torch.autograd.grad(loss, w)
        with torch.no_grad():
            w -= latent_lr * grad
    disp = (w.detach() - w0).norm(dim=-1).mean(dim=0)
    scores = [float(s) for s in disp]
    degenerate = n_i > 0 and not any(scores)
    if degenerate:
        log.warning("layer ranking produced all-zero displacements")
    return LayerRanking(scores, n_w, n_i, degenerate=degenerate)


def select_top_k(ranking: LayerRanking | list[float], k: int,
                 always_frozen: Iterable[int] = ()) -> set[int]:
    """Indices of the k highest scores outside ``always_frozen``; ties go to the lower index."""
    scores = ranking.scores if isinstance(ranking, LayerRanking) else list(ranking)
    frozen = {i for i in always_frozen if 0 <= i < len(scores)}
    available = [i for i in range(len(scores)) if i not in frozen]
    if not 1 <= k <= len(available):
        raise ValueError(f"k={k} must lie in [1, {len(available)}]")
    order = sorted(available, key=lambda i: (-scores[i], i))
    return set(order[:k])

"""Image-guided adaptation, discriminator catch-up, and sample export."""
from __future__ import annotations

import logging
import math
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from ._io import CheckpointError, digest_arrays, load_archive, save_archive
from .embedding import as_backend_list
from .generator import (StyleGenerator, broadcast_w, make_rng, map_to_w, sample_z, state_arrays,
                        synthesize)
from .losses import fewshot_image_direction
from .trainer import AdaptationConfig, adapt, save_png, to_uint8

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def load_image_dir(path: str | os.PathLike, resolution: int) -> torch.Tensor:
    """Load every image in a directory, center-crop to square, resize to ``resolution``."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no images found in {os.fspath(path)!r}")
    out = []
    for f in files:
        img = Image.open(f).convert("RGB")
        side = min(img.size)
        left, top = (img.width - side) // 2, (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side)).resize((resolution, resolution), Image.BICUBIC)
        out.append(torch.from_numpy(np.asarray(img, dtype=np.float32) / 255.0).permute(2, 0, 1))
    return torch.stack(out)


def source_samples(G: StyleGenerator, n: int, seed: int, psi: float = 1.0) -> torch.Tensor:
    with torch.no_grad():
        w = map_to_w(G, sample_z(n, seed, G.cfg.z_dim), psi)
        return synthesize(G, broadcast_w(w, G.num_layers))


def adapt_with_images(G_source: StyleGenerator, real_images: torch.Tensor, config: AdaptationConfig,
                      backends=None, n_source: int = 16, **adapt_kwargs):
    """Adapt along the embedding direction from generated source samples to a small real set.

    The direction is computed once from ``n_source`` samples (seeded by
    ``config.seed``) and held fixed. Layer ranking, when enabled, targets the
    mean real-image embedding.
    """
    if real_images.ndim != 4 or real_images.shape[0] < 1:
        raise ValueError("real_images must be a non-empty (N, 3, H, W) batch")
    if backends is None:
        from .trainer import resolve_backends
        backends = resolve_backends(config)
    backends = as_backend_list(backends)
    if real_images.shape[-1] != G_source.resolution:
        real_images = F.interpolate(real_images, size=(G_source.resolution,) * 2, mode="bilinear",
                                    align_corners=False)
    samples = source_samples(G_source, n_source, config.seed, config.truncation_psi)
    directions = fewshot_image_direction(real_images, samples, backends)
    with torch.no_grad():
        rank_target = [b.encode_images(real_images).mean(dim=0) for b in backends]
    return adapt(G_source, config, backends=backends, directions=directions,
                 rank_target=rank_target, **adapt_kwargs)


# ---------------------------------------------------------------------------
# discriminator

class ToyDiscriminator(nn.Module):
    """Strided conv discriminator producing one logit per image."""

    def __init__(self, resolution: int = 32, channels: int = 32, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.resolution = resolution
        self.channels = channels
        self.seed = seed
        n_down = int(math.log2(resolution)) - 2
        if n_down < 0 or 2 ** (n_down + 2) != resolution:
            raise ValueError("resolution must be a power of two >= 4")
        convs = [nn.Conv2d(3, channels, 3, padding=1)]
        convs += [nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(n_down)]
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(channels * 16, 1)
        with torch.no_grad():
            for m in list(self.convs) + [self.head]:
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) / math.sqrt(fan_in))
                m.bias.zero_()

    def forward(self, images):
        if images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise ValueError(f"discriminator expects {self.resolution}px inputs, got {tuple(images.shape[-2:])}")
        x = images * 2 - 1
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.flatten(1)).squeeze(1)


def discriminator_catchup(G: StyleGenerator, D: ToyDiscriminator, real_images: torch.Tensor,
                          steps: int = 50, lr: float = 0.002, betas=(0.0, 0.99),
                          r1_weight: float = 10.0, batch_size: int = 8, seed: int = 0,
                          psi: float = 1.0) -> ToyDiscriminator:
    """Update only D for ``steps`` iterations: G's samples as fakes, ``real_images`` as reals.

    Loss is the non-saturating logistic loss plus an optional R1 penalty on
    the reals. D is updated in place and returned; G is never touched.
    """
    if D.resolution != G.resolution or real_images.shape[-1] != G.resolution:
        raise ValueError(f"resolution mismatch: G={G.resolution}, D={D.resolution}, "
                         f"real={real_images.shape[-1]}")
    if steps <= 0:
        return D
    rng = make_rng(seed)
    opt = torch.optim.Adam(D.parameters(), lr=lr, betas=betas)
    for step in range(steps):
        with torch.no_grad():
            w = map_to_w(G, sample_z(batch_size, rng, G.cfg.z_dim), psi)
            fakes = synthesize(G, broadcast_w(w, G.num_layers))
            idx = torch.randint(0, real_images.shape[0], (batch_size,), generator=rng)
        reals = real_images[idx].detach().requires_grad_(r1_weight > 0)
        real_logits = D(reals)
        loss = F.softplus(D(fakes)).mean() + F.softplus(-real_logits).mean()
        if r1_weight > 0:
            (grad,) = torch.autograd.grad(real_logits.sum(), reals, create_graph=True)
            loss = loss + 0.5 * r1_weight * grad.pow(2).flatten(1).sum(1).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return D


def save_discriminator(D: ToyDiscriminator, path) -> None:
    save_archive(path, {"kind": "discriminator", "resolution": D.resolution, "channels": D.channels},
                 state_arrays(D))


def load_discriminator(path) -> ToyDiscriminator:
    manifest, arrays = load_archive(path)
    if manifest.get("kind") != "discriminator":
        raise CheckpointError(f"{os.fspath(path)!r} is not a discriminator checkpoint")
    D = ToyDiscriminator(manifest["resolution"], manifest["channels"])
    D.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return D


# ---------------------------------------------------------------------------
# export

def write_manifest(path: Path, entries: dict) -> None:
    path.write_text("".join(f"{k}: {v}\n" for k, v in entries.items()))


def read_manifest(path: str | os.PathLike) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split(":", 1)
            out[k.strip()] = v.strip()
    return out


def synthesize_finetune_set(G: StyleGenerator, mapper, n: int, out_dir: str | os.PathLike,
                            seed: int = 0, psi: float = 1.0, batch_size: int = 32) -> dict:
    """Write ``n`` PNGs named img_%07d.png plus manifest.txt.

    Latents are drawn batch by batch from one seeded stream, so the file set
    is reproducible for a given (seed, batch_size). On an OS error the
    manifest records the partial count with ``status: error``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = make_rng(seed)
    entries = {"seed": seed, "count": 0, "requested": n, "psi": psi,
               "checkpoint_sha256": digest_arrays(state_arrays(G)),
               "mapper": "yes" if mapper is not None else "no", "status": "ok"}
    written = 0
    try:
        with torch.no_grad():
            for start in range(0, n, batch_size):
                m = min(batch_size, n - start)
                w = broadcast_w(map_to_w(G, sample_z(m, rng, G.cfg.z_dim), psi), G.num_layers)
                if mapper is not None:
                    w = mapper(w)
                for img in to_uint8(synthesize(G, w)):
                    save_png(img, out / f"img_{written:07d}.png")
                    written += 1
    except OSError as exc:
        entries["status"] = "error"
        entries["error"] = str(exc).replace("\n", " ")
        log.error("export stopped after %d of %d images: %s", written, n, exc)
    entries["count"] = written
    try:
        write_manifest(out / "manifest.txt", entries)
    except OSError as exc:
        log.error("could not write manifest: %s", exc)
    return entries


def export_samples(G: StyleGenerator, n: int = 5000, truncation_psi: float = 1.0,
                   out_dir: str | os.PathLike = "samples", seed: int = 0, batch_size: int = 32) -> dict:
    """Sample export for external FID tooling; no mapper."""
    return synthesize_finetune_set(G, None, n, out_dir, seed, truncation_psi, batch_size)

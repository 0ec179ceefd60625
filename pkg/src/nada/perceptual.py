"""Pluggable perceptual image distances.

A distance takes two aligned (N, 3, H, W) batches in [0, 1] and returns one
value per pair, shape (N,).
"""
from __future__ import annotations

import torch


class PerceptualDistance:
    name = "perceptual"

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def pairwise(self, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        """Symmetric (N, N) matrix with a zero diagonal."""
        n = images.shape[0]
        ii, jj = torch.triu_indices(n, n, offset=1)
        out = torch.zeros(n, n, dtype=torch.float64)
        with torch.no_grad():
            for s in range(0, ii.numel(), batch_size):
                a, b = ii[s:s + batch_size], jj[s:s + batch_size]
                d = self(images[a], images[b]).double()
                out[a, b] = d
                out[b, a] = d
        return out


class PixelL2(PerceptualDistance):
    """Mean squared pixel difference; the test stand-in for LPIPS."""

    name = "l2"

    def __call__(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        return (a - b).pow(2).flatten(1).mean(dim=1)


class LPIPS(PerceptualDistance):
    """Adapter for the ``lpips`` package (pretrained weights fetched by that package)."""

    name = "lpips"

    def __init__(self, net: str = "alex"):
        try:
            import lpips  # type: ignore
        except ImportError as exc:
            raise ImportError("LPIPS distance needs `pip install lpips`") from exc
        self.model = lpips.LPIPS(net=net, verbose=False).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    def __call__(self, a, b):
        # lpips expects [-1, 1]
        return self.model(a * 2 - 1, b * 2 - 1).flatten()


def resolve_perceptual(name: str) -> PerceptualDistance:
    if name == "l2":
        return PixelL2()
    if name == "lpips":
        return LPIPS()
    raise ValueError(f"unknown perceptual distance {name!r} (expected 'l2' or 'lpips')")

"""Joint text/image embedding backends and direction construction.

Images enter the backends as float tensors shaped (N, 3, H, W) with values in
[0, 1]. Every backend returns unit-norm rows in a shared space.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DIRECTION_EPS = 1e-8
_ZERO_NORM = 1e-12


class EmbeddingError(ValueError):
    pass


class DegenerateDirectionError(EmbeddingError):
    pass


@dataclass(frozen=True)
class DirectionVector:
    values: torch.Tensor
    source_label: str
    target_label: str

    @property
    def norm(self) -> float:
        return float(self.values.norm())

    def __neg__(self) -> "DirectionVector":
        return DirectionVector(-self.values, self.target_label, self.source_label)


class EmbeddingBackend:
    """Base class for encoders sharing a text/image space.

    Subclasses implement ``_encode_images`` on preprocessed batches and
    ``encode_text``. Instances are not mutated after construction.
    """

    name: str = "backend"
    dimension: int
    input_resolution: int
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        _check_batch(images)
        return self._encode_images(preprocess_image(images, self))

    def _encode_images(self, pixels: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r}, dimension={self.dimension})"


def _check_batch(images: torch.Tensor) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise EmbeddingError(f"expected a (N, 3, H, W) batch, got shape {tuple(images.shape)}")
    if not torch.isfinite(images).all():
        raise EmbeddingError("image contains NaN or Inf pixels")


def _normalize_rows(v: torch.Tensor, fallback: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    safe = v / norm.clamp_min(_ZERO_NORM)
    return torch.where(norm > _ZERO_NORM, safe, fallback.to(v).expand_as(v))


class MockBackend(EmbeddingBackend):
    """Deterministic stand-in for a pretrained encoder.

    Images are resized to ``input_resolution``, normalized, average-pooled to
    ``pool_size`` x ``pool_size``, flattened and multiplied by a fixed random
    projection. With ``pool_size=1`` the embedding is a projection of the mean
    colour. Text embeddings come from a registered table only.
    """

    def __init__(
        self,
        seed: int = 0,
        dimension: int = 16,
        text_table: Mapping[str, Sequence[float]] | None = None,
        input_resolution: int = 16,
        pool_size: int = 4,
        mean: Sequence[float] = (0.0, 0.0, 0.0),
        std: Sequence[float] = (1.0, 1.0, 1.0),
        projection: np.ndarray | torch.Tensor | None = None,
        fallback: Sequence[float] | None = None,
        name: str = "mock",
    ):
        if dimension < 1 or input_resolution < 1 or pool_size < 1:
            raise ValueError("dimension, input_resolution and pool_size must be positive")
        if pool_size > input_resolution:
            raise ValueError("pool_size cannot exceed input_resolution")
        self.name = name
        self.seed = seed
        self.dimension = dimension
        self.input_resolution = input_resolution
        self.pool_size = pool_size
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)

        gen = torch.Generator().manual_seed(seed)
        n_in = 3 * pool_size * pool_size
        if projection is None:
            proj = torch.randn(dimension, n_in, generator=gen, dtype=torch.float64) / math.sqrt(n_in)
        else:
            proj = torch.as_tensor(np.asarray(projection), dtype=torch.float64)
            if proj.shape != (dimension, n_in):
                raise ValueError(f"projection must have shape {(dimension, n_in)}, got {tuple(proj.shape)}")
        self.projection = proj

        if fallback is None:
            fb = torch.randn(dimension, generator=gen, dtype=torch.float64)
        else:
            fb = torch.as_tensor(np.asarray(fallback, dtype=np.float64))
        if fb.shape != (dimension,) or fb.norm() == 0:
            raise ValueError("fallback must be a nonzero vector of the backend dimension")
        self.fallback = fb / fb.norm()

        self._table: dict[str, torch.Tensor] = {}
        for prompt, vec in (text_table or {}).items():
            t = torch.as_tensor(np.asarray(vec, dtype=np.float64))
            if t.shape != (dimension,):
                raise ValueError(f"text vector for {prompt!r} has shape {tuple(t.shape)}")
            if t.norm() == 0:
                raise ValueError(f"text vector for {prompt!r} is zero")
            self._table[prompt] = t / t.norm()

    @property
    def prompts(self) -> list[str]:
        return list(self._table)

    def _encode_images(self, pixels: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(pixels, self.pool_size).flatten(1)
        v = pooled @ self.projection.to(pixels.dtype).T
        return _normalize_rows(v, self.fallback)

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        rows = []
        for p in prompts:
            if p not in self._table:
                raise KeyError(f"prompt {p!r} is not registered with mock backend {self.name!r}")
            rows.append(self._table[p])
        return torch.stack(rows)


CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ClipBackend(EmbeddingBackend):
    """Adapter around an externally installed CLIP checkpoint (``pip install clip``).

    The checkpoint is downloaded into ``$NADA_CACHE_DIR`` when that is set.
    """

    def __init__(self, model_name: str = "ViT-B/32", device: str | None = None):
        try:
            import clip  # type: ignore
        except ImportError as exc:
            raise ImportError(
                "ClipBackend needs the 'clip' package and its checkpoints; "
                "install it with `pip install git+https://github.com/openai/CLIP`"
            ) from exc
        self.device = device or ("cuda" if torch.cuda.is_available() else "cpu")
        model, _ = clip.load(model_name, device=self.device, jit=False,
                             download_root=os.environ.get("NADA_CACHE_DIR"))
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._clip = clip
        self.model = model
        self.name = model_name
        self.dimension = int(model.text_projection.shape[1])
        self.input_resolution = int(model.visual.input_resolution)
        self.mean, self.std = CLIP_MEAN, CLIP_STD

    def _encode_images(self, pixels: torch.Tensor) -> torch.Tensor:
        feats = self.model.encode_image(pixels.to(self.device)).float()
        return feats / feats.norm(dim=-1, keepdim=True)

    @torch.no_grad()
    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        tokens = self._clip.tokenize(list(prompts)).to(self.device)
        feats = self.model.encode_text(tokens).float()
        return feats / feats.norm(dim=-1, keepdim=True)


def preprocess_image(images: torch.Tensor, backend: EmbeddingBackend) -> torch.Tensor:
    """Resize to the encoder resolution (bilinear, differentiable) and normalize per channel."""
    _check_batch(images)
    r = backend.input_resolution
    if images.shape[-2:] != (r, r):
        images = F.interpolate(images, size=(r, r), mode="bilinear", align_corners=False)
    mean = torch.tensor(backend.mean, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
    std = torch.tensor(backend.std, dtype=images.dtype, device=images.device).view(1, 3, 1, 1)
    return (images - mean) / std


def _as_batch(image) -> torch.Tensor:
    x = torch.as_tensor(image)
    if not x.is_floating_point():
        raise EmbeddingError("image must be a float array in [0, 1]")
    if x.ndim == 3 and x.shape[-1] == 3:
        x = x.permute(2, 0, 1)
    if x.ndim != 3 or x.shape[0] != 3:
        raise EmbeddingError(f"expected an H x W x 3 image, got shape {tuple(x.shape)}")
    return x.unsqueeze(0)


def embed_image(image, backend: EmbeddingBackend) -> torch.Tensor:
    """Embed one H x W x 3 image (numpy or tensor)."""
    return backend.encode_images(_as_batch(image))[0]


def embed_text(prompt: str, backend: EmbeddingBackend) -> torch.Tensor:
    if not prompt:
        raise EmbeddingError("prompt must be non-empty")
    return backend.encode_text([prompt])[0]


def make_direction(values: torch.Tensor, source_label: str, target_label: str) -> DirectionVector:
    if not torch.isfinite(values).all() or float(values.norm()) < DIRECTION_EPS:
        raise DegenerateDirectionError(
            f"direction {source_label!r} -> {target_label!r} has norm below {DIRECTION_EPS:g}"
        )
    return DirectionVector(values, source_label, target_label)


def text_direction(source_text: str, target_text: str, backend: EmbeddingBackend) -> DirectionVector:
    if source_text == target_text:
        raise DegenerateDirectionError(f"source and target prompts are identical: {source_text!r}")
    values = embed_text(target_text, backend) - embed_text(source_text, backend)
    return make_direction(values, source_text, target_text)


def load_text_table(path: str | os.PathLike) -> dict[str, list[float]]:
    """Read ``prompt<TAB>v1,v2,...`` lines. Blank lines and ``#`` comments are skipped."""
    table: dict[str, list[float]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            prompt, values = line.split("\t", 1)
            table[prompt] = [float(v) for v in values.split(",")]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed text-table line") from exc
    return table


def save_text_table(table: Mapping[str, Sequence[float]], path: str | os.PathLike) -> None:
    lines = [f"{p}\t" + ",".join(repr(float(v)) for v in vec) for p, vec in table.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_backend(identifier: str, text_table: Mapping[str, Sequence[float]] | None = None,
                    seed: int = 0) -> EmbeddingBackend:
    """Build a backend from a config identifier.

    ``mock`` (optionally ``mock:<seed>``) builds a MockBackend whose dimension
    follows the text table; anything else is treated as a CLIP model name.
    """
    if identifier == "mock" or identifier.startswith("mock:"):
        if identifier.startswith("mock:"):
            seed = int(identifier.split(":", 1)[1])
        dim = 16
        if text_table:
            dim = len(next(iter(text_table.values())))
        return MockBackend(seed=seed, dimension=dim, text_table=text_table)
    return ClipBackend(identifier)


def as_backend_list(backends) -> list[EmbeddingBackend]:
    if isinstance(backends, EmbeddingBackend):
        return [backends]
    out = list(backends)
    if not out:
        raise ValueError("at least one embedding backend is required")
    return out

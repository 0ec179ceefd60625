"""Embedding-space inspection, diversity measurement and weight-interpolation sweeps."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .embedding import EmbeddingBackend, as_backend_list
from .generator import StyleGenerator, interpolate_weights, synthesize
from .perceptual import PerceptualDistance

log = logging.getLogger(__name__)


@dataclass
class EmbeddingRow:
    label: str
    kind: str  # "image" or "text"
    embedding: np.ndarray


def embed_corpus(images: torch.Tensor | Sequence, texts: Sequence[str], backend: EmbeddingBackend,
                 image_labels: Sequence[str] | None = None) -> list[EmbeddingRow]:
    n_images = 0 if images is None else len(images)
    if n_images == 0 and not texts:
        raise ValueError("nothing to embed")
    rows = []
    if n_images:
        batch = images if isinstance(images, torch.Tensor) else torch.stack(list(images))
        labels = list(image_labels) if image_labels is not None else [f"image_{i}" for i in range(n_images)]
        if len(labels) != n_images:
            raise ValueError("image_labels length does not match images")
        with torch.no_grad():
            emb = backend.encode_images(batch).double().numpy()
        rows += [EmbeddingRow(lab, "image", e) for lab, e in zip(labels, emb)]
    if texts:
        with torch.no_grad():
            emb = backend.encode_text(list(texts)).double().numpy()
        rows += [EmbeddingRow(t, "text", e) for t, e in zip(texts, emb)]
    return rows


@dataclass
class PCAResult:
    points: np.ndarray          # (n, n_components)
    basis: np.ndarray           # (n_components, dim), orthonormal rows
    variances: np.ndarray       # explained variance per component, non-increasing
    mean: np.ndarray
    zero_variance: np.ndarray   # bool flag per component

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis.T


def pca_project(embeddings, n_components: int = 2, tol: float = 1e-12) -> PCAResult:
    """Mean-centred projection onto the top principal components (sample variance, ddof=1)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a 2-D array")
    n, d = x.shape
    if n_components < 1 or n < n_components or d < n_components:
        raise ValueError(f"cannot extract {n_components} components from a {n}x{d} matrix")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    variances = s ** 2 / max(n - 1, 1)
    basis = vt[:n_components]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(basis[np.arange(n_components), np.abs(basis).argmax(axis=1)])
    basis = basis * signs[:, None]
    var = np.zeros(n_components)
    var[: min(n_components, len(variances))] = variances[:n_components]
    flags = var <= tol * max(var.max(), 1.0)
    if flags.any():
        log.warning("PCA: %d requested components have zero variance", int(flags.sum()))
    return PCAResult(xc @ basis.T, basis, var, mean, flags)


# ---------------------------------------------------------------------------
# K-Medoids (PAM)

class KMedoidsResult(NamedTuple):
    medoids: np.ndarray
    labels: np.ndarray
    cost: float
    history: list[float]


def distance_matrix(points, distance: str | Callable = "euclidean") -> np.ndarray:
    if distance == "precomputed":
        d = np.asarray(points, dtype=np.float64)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("precomputed distances must be a square matrix")
        return d
    x = np.asarray(points, dtype=np.float64)
    if distance == "euclidean":
        diff = x[:, None, :] - x[None, :, :]
        return np.sqrt((diff ** 2).sum(-1))
    n = len(x)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = distance(x[i], x[j])
    return d


def _assign(d: np.ndarray, medoids: np.ndarray):
    sub = d[:, medoids]
    labels = sub.argmin(axis=1)
    return labels, float(sub[np.arange(len(d)), labels].sum())


def kmedoids(points, k: int, distance: str | Callable = "euclidean", seed: int = 0,
             max_iter: int = 100) -> KMedoidsResult:
    """PAM: greedy BUILD initialisation followed by best-improvement SWAP until no swap helps.

    The seed only breaks ties (candidate visiting order), so results are
    reproducible per seed.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    d = distance_matrix(points, distance)
    n = len(d)
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    order = np.random.default_rng(seed).permutation(n)

    medoids: list[int] = []
    nearest = np.full(n, np.inf)
    for _ in range(k):
        best, best_cost = -1, np.inf
        for c in order:
            if c in medoids:
                continue
            cost = np.minimum(nearest, d[:, c]).sum()
            if cost < best_cost - 1e-12:
                best, best_cost = c, cost
        medoids.append(int(best))
        nearest = np.minimum(nearest, d[:, best])

    med = np.array(medoids)
    labels, cost = _assign(d, med)
    history = [cost]
    for _ in range(max_iter):
        best_swap, best_cost = None, cost
        for mi in range(k):
            for c in order:
                if c in med:
                    continue
                trial = med.copy()
                trial[mi] = c
                _, tc = _assign(d, trial)
                if tc < best_cost - 1e-12:
                    best_swap, best_cost = (mi, c), tc
        if best_swap is None:
            break
        med[best_swap[0]] = best_swap[1]
        labels, cost = _assign(d, med)
        history.append(cost)
    return KMedoidsResult(med, labels, cost, history)


# ---------------------------------------------------------------------------

@dataclass
class DiversityResult:
    score: float
    clusters: list[dict]   # per cluster: medoid, size, pairs, mean_distance


def diversity_score(images: torch.Tensor, k: int = 10, perceptual: PerceptualDistance | None = None,
                    seed: int = 0, distances: np.ndarray | None = None) -> DiversityResult:
    """Cluster with K-Medoids under the perceptual distance and average all
    intra-cluster pairwise distances (each pair weighted equally)."""
    n = images.shape[0] if distances is None else len(distances)
    if n < 2:
        raise ValueError("diversity needs at least two images")
    if distances is None:
        if perceptual is None:
            raise ValueError("a perceptual distance is required")
        distances = perceptual.pairwise(images).numpy()
    k = min(k, n)
    res = kmedoids(distances, k, "precomputed", seed)
    total, pairs, table = 0.0, 0, []
    for c, m in enumerate(res.medoids):
        members = np.flatnonzero(res.labels == c)
        iu = np.triu_indices(len(members), 1)
        dists = distances[np.ix_(members, members)][iu]
        total += float(dists.sum())
        pairs += len(dists)
        table.append({"cluster": c, "medoid": int(m), "size": int(len(members)), "pairs": int(len(dists)),
                      "mean_distance": float(dists.mean()) if len(dists) else float("nan")})
    if pairs == 0:
        warnings.warn("every cluster is a singleton; diversity defined as 0", RuntimeWarning)
        return DiversityResult(0.0, table)
    return DiversityResult(total / pairs, table)


def interpolation_sweep(G_a: StyleGenerator, G_b: StyleGenerator, code: torch.Tensor,
                        steps: int) -> list[torch.Tensor]:
    """Images of one W+ code through generators blended at t = i / (steps - 1)."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if code.ndim == 2:
        code = code.unsqueeze(0)
    frames = []
    with torch.no_grad():
        for i in range(steps):
            G_t = interpolate_weights(G_a, G_b, i / (steps - 1))
            frames.append(synthesize(G_t, code)[0])
    return frames


@dataclass
class CollapseReport:
    target_spread: float
    source_spread: float
    indicator: float


def _mean_pairwise(e: torch.Tensor) -> float:
    return float(torch.pdist(e.double()).mean())


def collapse_report(train_images: torch.Tensor, frozen_images: torch.Tensor, backend) -> CollapseReport:
    """Spread of adapted embeddings relative to the spread of their source embeddings.

    Values near 0 mean the adapted images collapsed onto one region."""
    if train_images.shape != frozen_images.shape:
        raise ValueError("batches must be aligned")
    if train_images.shape[0] < 2:
        raise ValueError("collapse report needs at least two images")
    backends = as_backend_list(backend)
    with torch.no_grad():
        tgt = np.mean([_mean_pairwise(b.encode_images(train_images)) for b in backends])
        src = np.mean([_mean_pairwise(b.encode_images(frozen_images)) for b in backends])
    return CollapseReport(float(tgt), float(src), float(tgt / src) if src > 0 else float("inf"))

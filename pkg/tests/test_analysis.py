import itertools

import numpy as np
import pytest
import torch

from nada.analysis import (collapse_report, distance_matrix, diversity_score, embed_corpus,
                           interpolation_sweep, kmedoids, pca_project)
from nada.embedding import MockBackend
from nada.generator import StyleGenerator, synthesize
from nada.perceptual import PixelL2

from helpers import eval_codes


def exhaustive_cost(d, k):
    n = len(d)
    return min(d[:, list(c)].min(axis=1).sum() for c in itertools.combinations(range(n), k))


def test_pca_matches_eigh():
    x = np.random.default_rng(0).normal(size=(40, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
    res = pca_project(x, 3)
    vals, vecs = np.linalg.eigh(np.cov(x, rowvar=False, ddof=1))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    assert np.abs(res.variances - vals[:3]).max() < 1e-8
    for i in range(3):
        assert abs(abs(res.basis[i] @ vecs[:, i]) - 1) < 1e-8
    np.testing.assert_allclose(res.points, (x - x.mean(0)) @ res.basis.T)
    np.testing.assert_allclose(res.transform(x), res.points)


def test_pca_zero_variance_flag(caplog):
    x = np.zeros((5, 3))
    x[:, 0] = np.arange(5)
    res = pca_project(x, 2)
    assert res.zero_variance.tolist() == [False, True]
    assert "zero variance" in caplog.text


def test_pca_bad_request():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 3)), 2)


def test_kmedoids_small_hand_case():
    pts = np.array([[0.0], [1.0], [10.0], [11.0], [12.0]])
    res = kmedoids(pts, 2)
    assert sorted(res.medoids.tolist()) in ([0, 3], [1, 3])
    assert res.cost == pytest.approx(3.0)
    assert res.labels[0] == res.labels[1] != res.labels[3]


def test_kmedoids_never_beats_exhaustive_and_usually_matches():
    rng = np.random.default_rng(1)
    gaps = []
    for t in range(150):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, min(3, n) + 1))
        d = distance_matrix(rng.normal(size=(n, 2)))
        opt = exhaustive_cost(d, k)
        res = kmedoids(d, k, "precomputed", seed=t)
        assert res.cost >= opt - 1e-9
        gaps.append(res.cost - opt)
    assert np.mean(np.array(gaps) < 1e-9) >= 0.9


def test_kmedoids_history_monotone_and_seeded():
    x = np.random.default_rng(2).normal(size=(30, 3))
    a, b = kmedoids(x, 4, seed=5), kmedoids(x, 4, seed=5)
    assert np.array_equal(a.medoids, b.medoids) and a.cost == b.cost
    assert all(h2 < h1 for h1, h2 in zip(a.history, a.history[1:]))


def test_kmedoids_custom_metric_and_errors():
    x = np.array([[0.0, 0], [1, 1], [5, 5]])
    d = distance_matrix(x, lambda a, b: np.abs(a - b).sum())
    assert d[0, 1] == 2 and d[1, 2] == 8
    with pytest.raises(ValueError):
        kmedoids(x, 4)
    with pytest.raises(ValueError):
        kmedoids(x, 0)


def test_diversity_hand_computed():
    # two tight pairs far apart: clusters {0,1}, {2,3}
    d = np.array([[0, 1, 9, 9], [1, 0, 9, 9], [9, 9, 0, 3], [9, 9, 3, 0]], dtype=float)
    res = diversity_score(None, k=2, distances=d)
    assert res.score == pytest.approx(2.0)
    assert sorted(c["size"] for c in res.clusters) == [2, 2]


def test_diversity_pair_weighted():
    # clusters {0,1,2} (pairs 1,1,2) and {3,4} (pair 4): pooled mean (1+1+2+4)/4
    d = np.full((5, 5), 50.0)
    np.fill_diagonal(d, 0)
    d[0, 1] = d[1, 0] = 1
    d[0, 2] = d[2, 0] = 1
    d[1, 2] = d[2, 1] = 2
    d[3, 4] = d[4, 3] = 4
    assert diversity_score(None, k=2, distances=d).score == pytest.approx(2.0)


def test_diversity_singletons_warn():
    d = np.array([[0, 1.0], [1.0, 0]])
    with pytest.warns(RuntimeWarning):
        assert diversity_score(None, k=2, distances=d).score == 0.0


def test_diversity_with_perceptual_distance():
    imgs = torch.rand(6, 3, 4, 4, generator=torch.Generator().manual_seed(0))
    p = PixelL2()
    d = p.pairwise(imgs).numpy()
    assert d[1, 4] == pytest.approx(((imgs[1] - imgs[4]) ** 2).mean().item())
    assert diversity_score(imgs, k=2, perceptual=p).score == diversity_score(None, k=2, distances=d).score


def test_interpolation_sweep_endpoints(G):
    G_b = StyleGenerator(G.cfg, seed=7)
    code = eval_codes(G, 1)
    frames = interpolation_sweep(G, G_b, code, 5)
    with torch.no_grad():
        assert torch.equal(frames[0], synthesize(G, code)[0])
        assert torch.equal(frames[-1], synthesize(G_b, code)[0])
    same = interpolation_sweep(G, G, code[0], 3)
    assert all(torch.equal(f, frames[0]) for f in same)


def test_embed_corpus(mock):
    imgs = torch.rand(2, 3, 8, 8)
    rows = embed_corpus(imgs, ["Dog", "Cat"], mock, image_labels=["x", "y"])
    assert [(r.label, r.kind) for r in rows] == [("x", "image"), ("y", "image"), ("Dog", "text"), ("Cat", "text")]
    assert np.allclose(rows[2].embedding, mock.encode_text(["Dog"])[0].numpy())
    with pytest.raises(ValueError):
        embed_corpus(None, [], mock)


def test_collapse_report():
    b = MockBackend(dimension=8, seed=0)
    frozen = torch.rand(6, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    collapsed = frozen[:1].expand(6, -1, -1, -1)
    assert collapse_report(collapsed, frozen, b).indicator == 0.0
    assert collapse_report(frozen, frozen, b).indicator == pytest.approx(1.0)

import numpy as np
import pytest
import torch

from nada.layer_selection import LayerRanking, K_PRESETS, preset_k, rank_layers, select_top_k

from helpers import color_task, single_layer_toy


def test_top_k_basic():
    assert select_top_k([3.0, 1.0, 2.0], 2) == {0, 2}
    assert select_top_k(LayerRanking([3.0, 1.0, 2.0], 8, 1), 1) == {0}


def test_top_k_ties_prefer_lower_index():
    assert select_top_k([1.0, 2.0, 2.0, 2.0], 2) == {1, 2}
    assert select_top_k([0.0, 0.0, 0.0], 1) == {0}


def test_top_k_bounds():
    with pytest.raises(ValueError):
        select_top_k([1.0, 2.0], 0)
    with pytest.raises(ValueError):
        select_top_k([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        select_top_k([1.0, 2.0, 3.0], 3, always_frozen=[0])


def test_top_k_always_frozen():
    assert select_top_k([5.0, 4.0, 1.0, 3.0], 2, always_frozen=[0]) == {1, 3}


def test_top_k_nested_in_k():
    rng = np.random.default_rng(1)
    for _ in range(50):
        scores = list(rng.integers(0, 4, size=9).astype(float))
        prev = set()
        for k in range(1, 10):
            cur = select_top_k(scores, k)
            assert len(cur) == k and prev <= cur
            prev = cur


def test_preset_k():
    assert preset_k("texture", 18) == 18
    assert preset_k("shape", 18) == 12
    assert preset_k("animal", 18) == 3
    assert preset_k("animal", 2) == 2
    assert set(K_PRESETS) == {"texture", "shape", "animal"}


def test_rank_zero_iterations_gives_zero_scores(G):
    r = rank_layers(G, "target", n_i=0, backends=color_task(G), rng=0)
    assert r.scores == [0.0] * G.num_layers and not r.degenerate
    assert (r.batch_size, r.opt_iters) == (8, 0)


def test_rank_scores_match_manual_step(G):
    from nada.generator import broadcast_w, map_to_w, sample_z, synthesize
    from nada.losses import global_clip_loss

    backend = color_task(G)
    r = rank_layers(G, "target", n_w=4, n_i=1, latent_lr=0.01, backends=backend, rng=7)
    w0 = broadcast_w(map_to_w(G, sample_z(4, 7, G.cfg.z_dim)), G.num_layers).requires_grad_(True)
    (g,) = torch.autograd.grad(global_clip_loss(synthesize(G, w0), "target", backend), w0)
    expected = (0.01 * g).norm(dim=-1).mean(0)
    # float32 subtraction w - lr*g loses a few ulps of the small step
    np.testing.assert_allclose(r.scores, expected.numpy(), rtol=1e-3)


def test_rank_leaves_generator_untouched(G):
    from helpers import state_bytes
    before = state_bytes(G)
    rank_layers(G, "target", n_i=2, backends=color_task(G), rng=0)
    assert state_bytes(G) == before
    assert not any(p.grad is not None for p in G.parameters())


def test_single_influential_layer_ranks_first():
    G = single_layer_toy(1, seed=0)
    r = rank_layers(G, "target", backends=color_task(G), rng=0)
    assert int(np.argmax(r.scores)) == 1
    assert all(s == 0.0 for i, s in enumerate(r.scores) if i != 1)


def test_degenerate_flag(G, caplog):
    # constant output: every layer's affine projection zeroed
    with torch.no_grad():
        for i in range(G.num_layers):
            G.synthesis.layers[i].affine.weight.zero_()
            G.synthesis.to_rgb[i].affine.weight.zero_()
    r = rank_layers(G, "target", backends=color_task(G), rng=0)
    assert r.degenerate and "all-zero" in caplog.text

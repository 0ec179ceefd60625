import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from nada.embedding import (DegenerateDirectionError, EmbeddingError, MockBackend, embed_image,
                            embed_text, load_text_table, preprocess_image, resolve_backend,
                            save_text_table, text_direction)

from helpers import central_difference, rel_err


def test_embed_text_is_table_lookup():
    e1 = np.eye(4)[0]
    b = MockBackend(dimension=4, text_table={"Dog": e1})
    assert torch.equal(embed_text("Dog", b), torch.tensor(e1))


def test_unknown_prompt_raises(mock):
    with pytest.raises(KeyError, match="not registered"):
        embed_text("Giraffe", mock)


def test_empty_prompt_raises(mock):
    with pytest.raises(EmbeddingError):
        embed_text("", mock)


def test_text_table_vectors_are_normalized():
    b = MockBackend(dimension=3, text_table={"x": [3.0, 0.0, 4.0]})
    assert embed_text("x", b).norm().item() == pytest.approx(1.0, abs=1e-12)


def test_text_embedding_deterministic(mock):
    assert embed_text("Cat", mock).numpy().tobytes() == embed_text("Cat", mock).numpy().tobytes()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.sampled_from([8, 16, 24]))
def test_image_embeddings_unit_norm(seed, size):
    b = MockBackend(seed=seed % 7, dimension=12)
    img = torch.rand(size, size, 3, generator=torch.Generator().manual_seed(seed))
    assert abs(embed_image(img, b).norm().item() - 1.0) < 1e-4


def test_zero_image_returns_fallback(mock):
    e = embed_image(torch.zeros(16, 16, 3), mock)
    assert torch.equal(e, mock.fallback.float())
    assert e.norm().item() == pytest.approx(1.0, abs=1e-6)


def test_identical_images_identical_embeddings(mock):
    img = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(0))
    assert torch.equal(embed_image(img, mock), embed_image(img.clone(), mock))


def test_numpy_image_accepted(mock):
    img = np.random.default_rng(0).random((20, 20, 3))
    assert embed_image(img, mock).shape == (16,)


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_non_finite_pixels_rejected(mock, bad):
    img = torch.rand(16, 16, 3)
    img[3, 4, 1] = bad
    with pytest.raises(EmbeddingError):
        embed_image(img, mock)


def test_bad_shape_rejected(mock):
    with pytest.raises(EmbeddingError):
        embed_image(torch.rand(16, 16), mock)


def test_image_gradient_matches_finite_difference():
    b = MockBackend(seed=2, dimension=6, input_resolution=8, pool_size=2)
    img = torch.rand(1, 3, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    proj = torch.randn(6, generator=torch.Generator().manual_seed(2), dtype=torch.float64)

    def f(x):
        return b.encode_images(x)[0] @ proj

    x = img.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    # single pixel, rel 1e-4
    pix = (0, 1, 3, 5)
    h = 1e-6
    xp, xm = img.clone(), img.clone()
    xp[pix] += h
    xm[pix] -= h
    fd = (f(xp) - f(xm)) / (2 * h)
    assert abs(g[pix].item() - fd.item()) <= 1e-4 * abs(fd.item())
    # whole image
    assert rel_err(g, central_difference(f, img.clone())) < 1e-4


def test_text_direction_difference_and_antisymmetry():
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    b = MockBackend(dimension=3, text_table={"A": e1, "B": e2})
    d = text_direction("A", "B", b)
    assert torch.equal(d.values, torch.tensor(e2 - e1))
    assert torch.equal(d.values + text_direction("B", "A", b).values, torch.zeros(3, dtype=torch.float64))
    assert (d.source_label, d.target_label) == ("A", "B")


def test_text_direction_degenerate():
    b = MockBackend(dimension=3, text_table={"Dog": [1, 0, 0], "Hound": [2, 0, 0]})
    with pytest.raises(DegenerateDirectionError):
        text_direction("Dog", "Dog", b)
    with pytest.raises(DegenerateDirectionError):
        text_direction("Dog", "Hound", b)  # same unit vector


def test_preprocess_constant_mean_image_is_zero():
    b = MockBackend(dimension=4, mean=(0.2, 0.5, 0.7), std=(0.3, 0.3, 0.3), input_resolution=8)
    img = torch.tensor([0.2, 0.5, 0.7]).view(1, 3, 1, 1).expand(1, 3, 8, 8)
    assert torch.count_nonzero(preprocess_image(img, b)) == 0


def test_preprocess_identity_at_native_resolution():
    b = MockBackend(dimension=4, input_resolution=8)
    img = torch.rand(2, 3, 8, 8)
    assert torch.equal(preprocess_image(img, b), img)


def test_preprocess_resize_gradient_matches_finite_difference():
    b = MockBackend(dimension=4, input_resolution=5, mean=(0.1, 0.2, 0.3), std=(0.5, 0.6, 0.7))
    img = torch.rand(1, 3, 7, 7, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    wts = torch.rand(1, 3, 5, 5, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

    def f(x):
        return (preprocess_image(x, b) * wts).sum()

    x = img.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    assert rel_err(g, central_difference(f, img.clone())) < 1e-3


def test_text_table_file_round_trip(tmp_path):
    table = {"a photo": [0.1, 0.2, 0.3], "a sketch, rough": [1.0, -2.0, 0.5]}
    path = tmp_path / "table.tsv"
    save_text_table(table, path)
    assert load_text_table(path) == table
    b = resolve_backend("mock", text_table=load_text_table(path))
    assert b.dimension == 3 and set(b.prompts) == set(table)


def test_text_table_malformed(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("no tab here\n")
    with pytest.raises(ValueError, match="bad.tsv:1"):
        load_text_table(path)

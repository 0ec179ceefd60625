"""Shared constructions for the toy tasks used across test modules."""
import torch

from nada.embedding import MockBackend
from nada.generator import (GeneratorConfig, StyleGenerator, broadcast_w, map_to_w, sample_z,
                            synthesize)

# filled by test_acceptance, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []

# centred normalisation makes every colour direction reachable by the toy generator
CENTERED = dict(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))


def central_difference(f, x, h=1e-6):
    """Numerical gradient of scalar f at float64 tensor x."""
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def color_task(G, seed=3, dimension=8, pool_size=1, direction_seed=5):
    """Mean-colour mock task: 'source' is the embedding of the generator's mean
    output, 'target' a unit vector orthogonal to it."""
    probe = MockBackend(seed=seed, dimension=dimension, pool_size=pool_size, **CENTERED)
    with torch.no_grad():
        imgs = synthesize(G, broadcast_w(map_to_w(G, sample_z(256, 123, G.cfg.z_dim)), G.num_layers))
        s = probe.encode_images(imgs).mean(0).double()
    s = s / s.norm()
    if pool_size == 1:
        # stay inside the 3-d span of the colour projection
        t = probe.projection @ torch.tensor([1.0, -1.0, 0.0], dtype=torch.float64)
    else:
        t = torch.randn(dimension, generator=torch.Generator().manual_seed(direction_seed), dtype=torch.float64)
    t = t - (t @ s) * s
    t = t / t.norm()
    return MockBackend(seed=seed, dimension=dimension, pool_size=pool_size,
                       text_table={"source": s.numpy(), "target": t.numpy()}, **CENTERED)


def eval_codes(G, n=64, seed=999):
    with torch.no_grad():
        return broadcast_w(map_to_w(G, sample_z(n, seed, G.cfg.z_dim)), G.num_layers)


def single_layer_toy(layer, seed=0, cfg=GeneratorConfig()):
    """Toy generator where only ``layer``'s style row can change the output:
    every other layer's affine style projection is zeroed (constant style)."""
    G = StyleGenerator(cfg, seed=seed)
    with torch.no_grad():
        for i in range(cfg.num_layers):
            if i != layer:
                G.synthesis.layers[i].affine.weight.zero_()
                G.synthesis.to_rgb[i].affine.weight.zero_()
    return G


def state_bytes(module):
    return {k: v.detach().cpu().numpy().tobytes() for k, v in module.state_dict().items()}

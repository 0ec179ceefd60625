"""Style-based generator, the frozen/trainable pair, and checkpoint persistence.

The shipped architecture is a small StyleGAN2-like network: a mapping MLP
z -> w, a learned constant, one modulated 3x3 convolution per synthesis
layer (each layer doubles resolution after the first), and skip-connected
toRGB heads. W+ codes are tensors shaped (N, L, w_dim), one row per
synthesis layer. Images are (N, 3, H, W) in [0, 1].

Only the synthesis layers' convolution weights, biases, noise strengths and
the learned constant can ever be trained. The mapping network, per-layer
affine style projections and toRGB heads are permanently frozen.
"""
from __future__ import annotations

import copy
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._io import CheckpointError, digest_arrays, load_archive, save_archive


class ArchitectureMismatch(ValueError):
    pass


def make_rng(rng: torch.Generator | int | None) -> torch.Generator:
    if isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(0 if rng is None else int(rng))


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    num_layers: int = 4
    channels: int = 32
    resolution: int = 32
    mapping_layers: int = 2
    w_avg_samples: int = 10_000

    @property
    def start_resolution(self) -> int:
        return self.resolution // 2 ** (self.num_layers - 1)

    def validate(self) -> None:
        if self.num_layers < 1 or self.mapping_layers < 1:
            raise ValueError("num_layers and mapping_layers must be >= 1")
        if self.start_resolution < 1 or self.start_resolution * 2 ** (self.num_layers - 1) != self.resolution:
            raise ValueError(f"resolution {self.resolution} is not reachable with {self.num_layers} layers")


class EqualLinear(nn.Module):
    """Linear layer with runtime weight scaling 1/sqrt(fan_in)."""

    def __init__(self, in_dim: int, out_dim: int, gen: torch.Generator, bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim, generator=gen))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init)))
        self.scale = 1.0 / math.sqrt(in_dim)

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class MappingNetwork(nn.Module):
    def __init__(self, cfg: GeneratorConfig, gen: torch.Generator):
        super().__init__()
        dims = [cfg.z_dim] + [cfg.w_dim] * cfg.mapping_layers
        self.layers = nn.ModuleList(EqualLinear(a, b, gen) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


def modulated_conv2d(x, weight, styles, demodulate=True):
    n, c, h, w = x.shape
    out_ch, _, k, _ = weight.shape
    wt = weight.unsqueeze(0) * styles[:, None, :, None, None]
    if demodulate:
        wt = wt * torch.rsqrt(wt.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
    y = F.conv2d(x.reshape(1, n * c, h, w), wt.reshape(n * out_ch, c, k, k),
                 padding=k // 2, groups=n)
    return y.reshape(n, out_ch, h, w)


def upsample2x(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class SynthesisLayer(nn.Module):
    def __init__(self, cfg: GeneratorConfig, index: int, gen: torch.Generator):
        super().__init__()
        c = cfg.channels
        self.index = index
        self.upsample = index > 0
        res = cfg.start_resolution * 2 ** index
        if index == 0:
            self.const = nn.Parameter(torch.randn(1, c, res, res, generator=gen))
        self.affine = EqualLinear(cfg.w_dim, c, gen, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(c, c, 3, 3, generator=gen))
        self.bias = nn.Parameter(torch.zeros(c))
        self.noise_strength = nn.Parameter(torch.zeros(()))
        # per-layer noise is a stored constant so both generators see identical inputs
        self.register_buffer("noise", torch.randn(1, 1, res, res, generator=gen))

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = [self.weight, self.bias, self.noise_strength]
        if self.index == 0:
            params.insert(0, self.const)
        return params

    def forward(self, x, w):
        if self.index == 0:
            x = self.const.expand(w.shape[0], -1, -1, -1)
        elif self.upsample:
            x = upsample2x(x)
        x = modulated_conv2d(x, self.weight, self.affine(w))
        x = x + self.noise_strength * self.noise + self.bias.view(1, -1, 1, 1)
        return F.leaky_relu(x, 0.2)


class ToRGB(nn.Module):
    def __init__(self, cfg: GeneratorConfig, gen: torch.Generator):
        super().__init__()
        self.affine = EqualLinear(cfg.w_dim, cfg.channels, gen, bias_init=1.0)
        self.weight = nn.Parameter(torch.randn(3, cfg.channels, 1, 1, generator=gen))
        self.bias = nn.Parameter(torch.zeros(3))
        self.scale = 1.0 / math.sqrt(cfg.channels)

    def forward(self, x, w):
        y = modulated_conv2d(x, self.weight * self.scale, self.affine(w), demodulate=False)
        return y + self.bias.view(1, -1, 1, 1)


class SynthesisNetwork(nn.Module):
    def __init__(self, cfg: GeneratorConfig, gen: torch.Generator):
        super().__init__()
        self.layers = nn.ModuleList(SynthesisLayer(cfg, i, gen) for i in range(cfg.num_layers))
        self.to_rgb = nn.ModuleList(ToRGB(cfg, gen) for _ in range(cfg.num_layers))

    def forward(self, wplus):
        x = rgb = None
        for i, (layer, head) in enumerate(zip(self.layers, self.to_rgb)):
            w = wplus[:, i]
            x = layer(x, w)
            y = head(x, w)
            rgb = y if rgb is None else upsample2x(rgb) + y
        return 0.5 * (torch.tanh(rgb) + 1.0)


class StyleGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0, estimate_w_avg: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.mapping = MappingNetwork(cfg, gen)
        self.synthesis = SynthesisNetwork(cfg, gen)
        self.register_buffer("w_avg", torch.zeros(cfg.w_dim))
        self.is_frozen = False
        self.trainable_mask = [False] * cfg.num_layers
        for p in self.parameters():
            p.requires_grad_(False)
        if estimate_w_avg:
            with torch.no_grad():
                z = torch.randn(cfg.w_avg_samples, cfg.z_dim, generator=gen)
                self.w_avg.copy_(self.mapping(z).mean(dim=0))

    @property
    def num_layers(self) -> int:
        return self.cfg.num_layers

    @property
    def resolution(self) -> int:
        return self.cfg.resolution

    def layer_parameters(self, index: int) -> list[nn.Parameter]:
        return self.synthesis.layers[index].trainable_parameters()

    def synthesis_parameters(self) -> list[nn.Parameter]:
        return [p for i in range(self.num_layers) for p in self.layer_parameters(i)]

    def forward(self, wplus: torch.Tensor) -> torch.Tensor:
        return synthesize(self, wplus)


def layer_of_parameter(name: str) -> int | None:
    """Synthesis-layer index owning a trainable parameter name, else None."""
    parts = name.split(".")
    if len(parts) == 4 and parts[:2] == ["synthesis", "layers"] and parts[3] != "affine":
        return int(parts[2])
    return None


# ---------------------------------------------------------------------------
# latent codes

def sample_z(n: int, rng: torch.Generator | int | None, z_dim: int = 64) -> torch.Tensor:
    if n < 1:
        raise ValueError("n must be >= 1")
    return torch.randn(n, z_dim, generator=make_rng(rng))


def map_to_w(G: StyleGenerator, z: torch.Tensor, psi: float = 1.0) -> torch.Tensor:
    if not 0.0 <= psi <= 1.0:
        raise ValueError(f"truncation psi must lie in [0, 1], got {psi}")
    w = G.mapping(z)
    if psi == 1.0:
        return w
    avg = G.w_avg.to(w)
    if psi == 0.0:
        return avg.expand_as(w).clone()
    return avg + psi * (w - avg)


def broadcast_w(w: torch.Tensor, num_layers: int) -> torch.Tensor:
    """(N, D) -> (N, L, D); a single (D,) code becomes (L, D)."""
    if w.ndim == 1:
        return w.unsqueeze(0).repeat(num_layers, 1)
    return w.unsqueeze(1).repeat(1, num_layers, 1)


def synthesize(G: StyleGenerator, wplus: torch.Tensor) -> torch.Tensor:
    if wplus.ndim != 3 or wplus.shape[1] != G.num_layers or wplus.shape[2] != G.cfg.w_dim:
        raise ValueError(f"expected W+ codes of shape (N, {G.num_layers}, {G.cfg.w_dim}), "
                         f"got {tuple(wplus.shape)}")
    return G.synthesis(wplus)


def synthesize_from_w(G: StyleGenerator, w: torch.Tensor) -> torch.Tensor:
    return synthesize(G, broadcast_w(w, G.num_layers))


def mixed_codes(w_a: torch.Tensor, w_b: torch.Tensor, mixing_prob: float,
                rng: torch.Generator | int | None, num_layers: int) -> torch.Tensor:
    """Per-sample style mixing: rows [0, c) from w_a and [c, L) from w_b with
    probability ``mixing_prob``, c uniform in [1, L)."""
    if not 0.0 <= mixing_prob <= 1.0:
        raise ValueError("mixing_prob must lie in [0, 1]")
    rng = make_rng(rng)
    n = w_a.shape[0]
    mix = torch.rand(n, generator=rng) < mixing_prob
    if num_layers > 1:
        cut = torch.randint(1, num_layers, (n,), generator=rng)
    else:
        cut = torch.full((n,), num_layers)
    rows = torch.arange(num_layers).unsqueeze(0)
    take_b = (rows >= cut.unsqueeze(1)) & mix.unsqueeze(1)
    return torch.where(take_b.unsqueeze(-1), broadcast_w(w_b, num_layers), broadcast_w(w_a, num_layers))


# ---------------------------------------------------------------------------
# pair and layer masks

@dataclass
class GeneratorPair:
    frozen: StyleGenerator
    trainable: StyleGenerator

    @property
    def shared_mapping(self) -> MappingNetwork:
        return self.frozen.mapping


def freeze(G: StyleGenerator) -> StyleGenerator:
    for p in G.parameters():
        p.requires_grad_(False)
    G.trainable_mask = [False] * G.num_layers
    G.is_frozen = True
    return G


def clone_pair(G: StyleGenerator) -> GeneratorPair:
    """Copy G twice; both copies route latents through one mapping network.

    G itself is left untouched.
    """
    frozen = freeze(copy.deepcopy(G))
    trainable = copy.deepcopy(G)
    trainable.mapping = frozen.mapping
    trainable.is_frozen = False
    set_trainable_layers(trainable, ())
    return GeneratorPair(frozen, trainable)


def set_trainable_layers(G: StyleGenerator, indices: Iterable[int]) -> None:
    indices = set(int(i) for i in indices)
    bad = [i for i in indices if not 0 <= i < G.num_layers]
    if bad:
        raise IndexError(f"layer indices {sorted(bad)} outside [0, {G.num_layers})")
    if G.is_frozen and indices:
        raise RuntimeError("cannot unfreeze layers of a frozen generator")
    for p in G.parameters():
        p.requires_grad_(False)
    for i in range(G.num_layers):
        for p in G.layer_parameters(i):
            p.requires_grad_(i in indices)
    G.trainable_mask = [i in indices for i in range(G.num_layers)]


def _check_same_architecture(G_a: StyleGenerator, G_b: StyleGenerator):
    if G_a.cfg != G_b.cfg:
        raise ArchitectureMismatch(f"generator configs differ: {G_a.cfg} vs {G_b.cfg}")
    sa, sb = G_a.state_dict(), G_b.state_dict()
    if sa.keys() != sb.keys() or any(sa[k].shape != sb[k].shape for k in sa):
        raise ArchitectureMismatch("generator state layouts differ")
    return sa, sb


def interpolate_weights(G_a: StyleGenerator, G_b: StyleGenerator, t: float) -> StyleGenerator:
    """Parameter-wise blend (1 - t) * G_a + t * G_b; endpoints are exact copies."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    sa, sb = _check_same_architecture(G_a, G_b)
    out = copy.deepcopy(G_a)
    blended = {k: torch.lerp(sa[k], sb[k], t) if sa[k].is_floating_point() else sa[k].clone()
               for k in sa}
    out.load_state_dict(blended)
    return freeze(out)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class CheckpointSnapshot:
    iteration: int
    weights: dict[str, np.ndarray]
    config_hash: str = ""
    grid_path: str | None = None
    path: str | None = None

    @property
    def weights_hash(self) -> str:
        return digest_arrays(self.weights)


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def snapshot(G: StyleGenerator, iteration: int, config_hash: str = "") -> CheckpointSnapshot:
    return CheckpointSnapshot(iteration, state_arrays(G), config_hash)


def generator_from_arrays(cfg: GeneratorConfig, arrays: Mapping[str, np.ndarray]) -> StyleGenerator:
    G = StyleGenerator(cfg, estimate_w_avg=False)
    expected = G.state_dict()
    missing = sorted(set(expected) - set(arrays))
    unexpected = sorted(set(arrays) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing={missing} unexpected={unexpected}")
    state = {}
    for k, ref in expected.items():
        a = arrays[k]
        if tuple(a.shape) != tuple(ref.shape):
            raise CheckpointError(f"{k}: shape {a.shape} != expected {tuple(ref.shape)}")
        state[k] = torch.from_numpy(np.array(a, dtype=np.float32))
    G.load_state_dict(state)
    return G


def save_checkpoint(G: StyleGenerator, iteration: int, path: str | os.PathLike,
                    config_hash: str = "", grid_path: str | None = None) -> CheckpointSnapshot:
    arrays = state_arrays(G)
    manifest = {"kind": "generator", "architecture": asdict(G.cfg), "iteration": int(iteration),
                "config_hash": config_hash, "weights_sha256": digest_arrays(arrays)}
    save_archive(path, manifest, arrays)
    return CheckpointSnapshot(int(iteration), arrays, config_hash, grid_path, os.fspath(path))


def load_snapshot(path: str | os.PathLike, expected_config_hash: str | None = None) -> tuple[CheckpointSnapshot, GeneratorConfig]:
    manifest, arrays = load_archive(path)
    if manifest.get("kind") != "generator":
        raise CheckpointError(f"{os.fspath(path)!r} holds a {manifest.get('kind')!r}, not a generator")
    if digest_arrays(arrays) != manifest.get("weights_sha256"):
        raise CheckpointError(f"{os.fspath(path)!r}: weight digest does not match manifest")
    if expected_config_hash is not None and manifest.get("config_hash") != expected_config_hash:
        raise CheckpointError(f"{os.fspath(path)!r}: config_hash {manifest.get('config_hash')!r} "
                              f"does not match expected {expected_config_hash!r}")
    cfg = GeneratorConfig(**manifest["architecture"])
    snap = CheckpointSnapshot(manifest["iteration"], arrays, manifest.get("config_hash", ""),
                              path=os.fspath(path))
    return snap, cfg


def load_checkpoint(path: str | os.PathLike, expected_config_hash: str | None = None) -> StyleGenerator:
    snap, cfg = load_snapshot(path, expected_config_hash)
    G = generator_from_arrays(cfg, snap.weights)
    G.checkpoint_iteration = snap.iteration
    return G


def load_external_state_dict(G: StyleGenerator, external: Mapping[str, "torch.Tensor | np.ndarray"],
                             key_map: Mapping[str, str]) -> StyleGenerator:
    """Load weights published under another naming scheme.

    ``key_map`` maps external names to this generator's ``state_dict`` names.
    Every external tensor must be mapped and every internal entry must be
    covered; any gap aborts the load.
    """
    unmapped = sorted(k for k in external if k not in key_map)
    if unmapped:
        raise CheckpointError(f"unmapped external parameters: {unmapped[:10]}"
                              + (" ..." if len(unmapped) > 10 else ""))
    own = G.state_dict()
    targets = {key_map[k]: k for k in external}
    missing = sorted(set(own) - set(targets))
    if missing:
        raise CheckpointError(f"parameters not provided by the external checkpoint: {missing}")
    state = {}
    for name, ext in targets.items():
        if name not in own:
            raise CheckpointError(f"{ext!r} maps to unknown parameter {name!r}")
        t = torch.as_tensor(np.asarray(external[ext]), dtype=own[name].dtype)
        if t.shape != own[name].shape:
            raise CheckpointError(f"{ext!r}: shape {tuple(t.shape)} != {tuple(own[name].shape)}")
        state[name] = t
    G.load_state_dict(state)
    return G

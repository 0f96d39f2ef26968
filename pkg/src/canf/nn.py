"""Parameter containers and the plain (static) layers."""
from __future__ import annotations

import zlib

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor, layer_norm, matmul, take_rows


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Deterministic per-parameter stream keyed by name.

    Keying on the layer name (not draw order) keeps static weights identical
    across model variants that add or drop conditioning modules.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def normal_init(rng, shape, dtype=DEFAULT_DTYPE, std: float = 0.02) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter container; submodules register as attributes."""

    def named_parameters(self):
        """Yield (hierarchical-name, Tensor) pairs, each parameter once.

        Shared parameters (e.g. one weight generator attached to several
        layers) are reported under the first path that reaches them.
        """
        seen = set()
        yield from self._walk("", seen)

    def _walk(self, prefix, seen):
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield from value._walk(name + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item._walk(f"{name}.{i}.", seen)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x @ W + b with W stored (in_dim, out_dim)."""

    def __init__(self, in_dim, out_dim, rng, bias=True, dtype=DEFAULT_DTYPE, std=0.02):
        self.weight = normal_init(rng, (in_dim, out_dim), dtype, std)
        self.bias = zeros_param((out_dim,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = matmul(x.reshape(-1, x.shape[-1]), self.weight).reshape(*lead, self.weight.shape[1])
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim, dtype=DEFAULT_DTYPE, eps=1e-5):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = zeros_param((dim,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, n_rows, dim, rng, dtype=DEFAULT_DTYPE, std=0.02):
        self.table = normal_init(rng, (n_rows, dim), dtype, std)

    def __call__(self, idx) -> Tensor:
        return take_rows(self.table, idx)

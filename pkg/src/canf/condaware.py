"""Condition-aware layers: per-sample generated weights and their batch execution.

A condition-aware layer keeps a static weight W and derives a per-sample
conditional weight W_c from the condition embedding c. (W + W_c[i]) applied to
x[i] equals W x[i] + W_c[i] x[i], so the two weights fuse into one kernel call
per sample. Running those per-sample calls one by one is slow; the batch path
folds the batch into channels and runs a single grouped convolution with one
group per sample (for linear layers, one batched matmul).
"""
from __future__ import annotations

import numpy as np

from .nn import Module, normal_init, zeros_param
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, cat, conv2d, matmul, softmax, take_rows

COND_KINDS = ("dw-conv", "patch-embed", "out-proj", "qkv-proj", "mlp", "head")


# -- condition embedding --------------------------------------------------------


def timestep_sinusoid(t, dim: int, dtype=DEFAULT_DTYPE, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal code for integer timesteps: [sin | cos] halves."""
    if dim % 2:
        raise ValueError(f"sinusoidal dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class ConditionEmbedder(Module):
    """Builds c from the class label and/or the diffusion timestep.

    The label part comes from a learned table whose last row is the null
    class used by classifier-free guidance. The timestep part is a sinusoidal
    code pushed through a learned two-layer projection. Included parts are
    summed, so d stays fixed across source subsets.
    """

    def __init__(self, d, n_classes, max_timestep, sources=("class", "timestep"),
                 rng_class=None, rng_time=None, dtype=DEFAULT_DTYPE):
        unknown = set(sources) - {"class", "timestep"}
        if unknown:
            raise ValueError(f"unknown condition sources: {sorted(unknown)}")
        self.d = d
        self.n_classes = n_classes
        self.max_timestep = max_timestep
        self.sources = frozenset(sources)
        self.dtype = dtype
        self.class_table = normal_init(rng_class, (n_classes + 1, d), dtype)
        self.t_in = normal_init(rng_time, (d, d), dtype)
        self.t_in_bias = zeros_param((d,), dtype)
        self.t_out = normal_init(rng_time, (d, d), dtype)
        self.t_out_bias = zeros_param((d,), dtype)

    @property
    def null_class(self) -> int:
        return self.n_classes

    def __call__(self, labels, timesteps) -> Tensor:
        labels = np.asarray(labels)
        timesteps = np.asarray(timesteps)
        if labels.min(initial=0) < 0 or labels.max(initial=0) > self.n_classes:
            raise ValueError(f"class label outside [0, {self.n_classes}] (last index is the null class)")
        if timesteps.min(initial=0) < 0 or timesteps.max(initial=0) >= self.max_timestep:
            raise ValueError(f"timestep outside [0, {self.max_timestep})")
        n = max(labels.size, timesteps.size)
        c = Tensor(np.zeros((n, self.d), dtype=self.dtype))
        if "class" in self.sources:
            c = c + take_rows(self.class_table, labels)
        if "timestep" in self.sources:
            sin = Tensor(timestep_sinusoid(timesteps, self.d, self.dtype))
            h = (matmul(sin, self.t_in) + self.t_in_bias).gelu()
            c = c + (matmul(h, self.t_out) + self.t_out_bias)
        return c


# -- per-sample weight adapters ---------------------------------------------------


class WeightGenerator(Module):
    """One bias-free linear map from c to a flattened weight delta.

    Holds exactly prod(target_shape) * d parameters. Zero-initialized, so a
    fresh condition-aware model computes exactly what its static twin does.
    ``out_scale`` rescales the emitted delta; with a step-size-normalizing
    optimizer it acts as the conditional path's effective learning rate
    without changing what the map can express.
    """

    def __init__(self, target_shape, d, dtype=DEFAULT_DTYPE, shared=False, out_scale=1.0):
        self.target_shape = tuple(target_shape)
        self.d = d
        self.shared = shared
        self.out_scale = out_scale
        p = int(np.prod(self.target_shape))
        self.map_weights = zeros_param((p, d), dtype)

    def param_count(self) -> int:
        return self.map_weights.size

    def per_sample_weight(self, static_weight: Tensor, c: Tensor) -> Tensor:
        """Stack of fused kernels: out[i] = static_weight + map(c[i])."""
        delta = self.generate(c)
        return static_weight.reshape(1, *self.target_shape).broadcast_to(delta.shape) + delta

    def generate(self, c: Tensor) -> Tensor:
        """Conditional weights alone: (B, d) -> (B, *target_shape); linear in c."""
        if c.ndim != 2 or c.shape[1] != self.d:
            raise ShapeError(f"generator expects (B, {self.d}) conditions, got {c.shape}")
        flat = matmul(c, self.map_weights.transpose(1, 0))
        if self.out_scale != 1.0:
            flat = flat * self.out_scale
        return flat.reshape(c.shape[0], *self.target_shape)


class AdaptiveKernelBank(Module):
    """Baseline adapter: softmax-mix K static base kernels per sample.

    The base kernels start as copies of the layer's static weight, so the
    mixture reproduces the static layer at init (coefficients sum to 1).
    """

    def __init__(self, target_shape, d, k, rng, static_weight=None, dtype=DEFAULT_DTYPE, shared=False):
        if k < 1:
            raise ValueError(f"bank needs K >= 1, got {k}")
        self.target_shape = tuple(target_shape)
        self.d = d
        self.k = k
        self.shared = shared
        if static_weight is not None:
            base = np.repeat(static_weight.data[None], k, axis=0).astype(dtype)
            self.base_kernels = Tensor(base, requires_grad=True)
        else:
            self.base_kernels = normal_init(rng, (k, *self.target_shape), dtype)
        self.router_weights = normal_init(rng, (k, d), dtype)

    def param_count(self) -> int:
        return self.base_kernels.size + self.router_weights.size

    def coefficients(self, c: Tensor) -> Tensor:
        """(B, K) routing weights; each row sums to 1."""
        if c.ndim != 2 or c.shape[1] != self.d:
            raise ShapeError(f"bank expects (B, {self.d}) conditions, got {c.shape}")
        return softmax(matmul(c, self.router_weights.transpose(1, 0)))

    def per_sample_weight(self, static_weight: Tensor, c: Tensor) -> Tensor:
        """Mixture kernels (the static weight is absorbed into the bank)."""
        coeff = self.coefficients(c)
        p = int(np.prod(self.target_shape))
        mixed = matmul(coeff, self.base_kernels.reshape(self.k, p))
        return mixed.reshape(c.shape[0], *self.target_shape)


def budget_matched_k(target_shape, d: int) -> int:
    """Largest K with K*(P + d) <= P*d, i.e. bank params <= generator params."""
    p = int(np.prod(target_shape))
    return max(1, (p * d) // (p + d))


# -- execution paths ----------------------------------------------------------------


def conditional_conv_reference(x: Tensor, static_w: Tensor, w_c: Tensor,
                               stride=1, padding=0, groups=1) -> Tensor:
    """Per-sample loop: convolve each x[i] with its own fused kernel.

    Correctness oracle for the grouped batch path below (and the "naive"
    strategy timed by the benchmark).
    """
    b = x.shape[0]
    outs = []
    for i in range(b):
        kernel = static_w + w_c[i]
        outs.append(conv2d(x[i : i + 1], kernel, stride, padding, groups))
    return cat(outs, axis=0)


def fused_conditional_conv(x: Tensor, static_w: Tensor, w_c: Tensor,
                           stride=1, padding=0, groups=1) -> Tensor:
    """Batch the per-sample convolutions as one grouped convolution.

    The batch folds into channels ((B,C,H,W) -> (1,B*C,H,W)), the per-sample
    fused kernels stack along the output-channel axis, and one call with
    B * groups channel groups preserves per-sample locality. The output folds
    back to (B, C', H', W').
    """
    b, c, h, w = x.shape
    cout = static_w.shape[0]
    kernels = static_w.reshape(1, *static_w.shape).broadcast_to((b, *static_w.shape)) + w_c
    stacked = kernels.reshape(b * cout, *static_w.shape[1:])
    folded = x.reshape(1, b * c, h, w)
    out = conv2d(folded, stacked, stride, padding, groups=b * groups)
    _, _, ho, wo = out.shape
    return out.reshape(b, cout, ho, wo)


def conditional_linear_reference(x: Tensor, static_w: Tensor, w_c: Tensor) -> Tensor:
    """Per-sample loop for linear layers: out[i] = x[i] @ (W + W_c[i])."""
    outs = []
    for i in range(x.shape[0]):
        xi = x[i : i + 1]
        lead = xi.shape
        yi = matmul(xi.reshape(-1, x.shape[-1]), static_w + w_c[i])
        outs.append(yi.reshape(*lead[:-1], static_w.shape[1]))
    return cat(outs, axis=0)


def fused_conditional_linear(x: Tensor, static_w: Tensor, w_c: Tensor) -> Tensor:
    """One batched matmul against the stack of per-sample fused weights."""
    b = x.shape[0]
    weights = static_w.reshape(1, *static_w.shape).broadcast_to(w_c.shape) + w_c
    x3 = x if x.ndim == 3 else x.reshape(b, 1, x.shape[-1])
    y = matmul(x3, weights)
    return y if x.ndim == 3 else y.reshape(b, static_w.shape[1])


# -- condition-aware layers ------------------------------------------------------------


class CondLinear(Module):
    """Linear layer whose weight can be adapted per sample; bias stays static."""

    def __init__(self, in_dim, out_dim, rng, kind, bias=True, dtype=DEFAULT_DTYPE, std=0.02):
        if kind not in COND_KINDS:
            raise ValueError(f"unknown layer kind '{kind}'")
        self.kind = kind
        self.weight = normal_init(rng, (in_dim, out_dim), dtype, std)
        self.bias = zeros_param((out_dim,), dtype) if bias else None
        self.adapter = None

    def __call__(self, x: Tensor, c: Tensor | None = None) -> Tensor:
        if self.adapter is None or c is None:
            lead = x.shape[:-1]
            y = matmul(x.reshape(-1, x.shape[-1]), self.weight).reshape(*lead, self.weight.shape[1])
        else:
            w_full = self.adapter.per_sample_weight(self.weight, c)
            x3 = x if x.ndim == 3 else x.reshape(x.shape[0], 1, x.shape[-1])
            y = matmul(x3, w_full)
            if x.ndim == 2:
                y = y.reshape(x.shape[0], self.weight.shape[1])
        if self.bias is not None:
            y = y + self.bias
        return y

    def reference(self, x: Tensor, c: Tensor) -> Tensor:
        """Per-sample-loop twin of __call__ with an adapter attached."""
        w_full = self.adapter.per_sample_weight(self.weight, c)
        w_c = w_full - self.weight.reshape(1, *self.weight.shape).broadcast_to(w_full.shape)
        y = conditional_linear_reference(x, self.weight, w_c)
        if self.bias is not None:
            y = y + self.bias
        return y


class CondConv2d(Module):
    """Convolution whose kernel can be adapted per sample; bias stays static."""

    def __init__(self, in_channels, out_channels, kernel_size, rng, kind,
                 stride=1, padding=0, groups=1, bias=True, dtype=DEFAULT_DTYPE, std=0.02):
        if kind not in COND_KINDS:
            raise ValueError(f"unknown layer kind '{kind}'")
        self.kind = kind
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = normal_init(
            rng, (out_channels, in_channels // groups, kernel_size, kernel_size), dtype, std
        )
        self.bias = zeros_param((out_channels,), dtype) if bias else None
        self.adapter = None

    def _add_bias(self, y: Tensor) -> Tensor:
        if self.bias is None:
            return y
        b, c, h, w = y.shape
        return y + self.bias.reshape(1, c, 1, 1).broadcast_to(y.shape)

    def __call__(self, x: Tensor, c: Tensor | None = None) -> Tensor:
        if self.adapter is None or c is None:
            y = conv2d(x, self.weight, self.stride, self.padding, self.groups)
        else:
            w_full = self.adapter.per_sample_weight(self.weight, c)
            stacked = w_full.reshape(x.shape[0] * self.weight.shape[0], *self.weight.shape[1:])
            folded = x.reshape(1, x.shape[0] * x.shape[1], x.shape[2], x.shape[3])
            out = conv2d(folded, stacked, self.stride, self.padding, groups=x.shape[0] * self.groups)
            y = out.reshape(x.shape[0], self.weight.shape[0], out.shape[2], out.shape[3])
        return self._add_bias(y)

    def reference(self, x: Tensor, c: Tensor) -> Tensor:
        """Per-sample-loop twin of __call__ with an adapter attached."""
        w_full = self.adapter.per_sample_weight(self.weight, c)
        outs = []
        for i in range(x.shape[0]):
            outs.append(conv2d(x[i : i + 1], w_full[i], self.stride, self.padding, self.groups))
        return self._add_bias(cat(outs, axis=0))

"""Toy diffusion transformer with selectable conditioning mechanisms.

The backbone is fixed across all conditioning variants: patch embedding,
transformer blocks whose FFN carries a 3x3 depthwise convolution in the
middle, optional long skip connections, and a linear head back to patches.
Conditioning attaches on top of that skeleton: per-sample weight adaptation
on a configurable set of modules, adaptive normalization, and/or a prepended
condition token. Static weights are initialized from per-layer named streams
so every variant starts from the same backbone.
"""
from __future__ import annotations

import numpy as np

from .condaware import (
    AdaptiveKernelBank,
    CondConv2d,
    CondLinear,
    ConditionEmbedder,
    WeightGenerator,
    budget_matched_k,
)
from .config import ModelConfig
from .nn import LayerNorm, Linear, Module, normal_init, param_rng
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, cat, matmul, softmax


def patchify(x: Tensor, patch: int) -> Tensor:
    """(B, C, H, W) -> (B, N, C*p*p) with N = (H/p)*(W/p)."""
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = x.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return t.reshape(b, gh * gw, c * patch * patch)


def unpatchify(tokens: Tensor, channels: int, image_size: int, patch: int) -> Tensor:
    """Inverse of patchify: (B, N, C*p*p) -> (B, C, H, W)."""
    b, n, pd = tokens.shape
    g = image_size // patch
    if n != g * g or pd != channels * patch * patch:
        raise ShapeError(f"token grid {tokens.shape} does not match image {image_size} / patch {patch}")
    t = tokens.reshape(b, g, g, channels, patch, patch).transpose(0, 3, 1, 4, 2, 5)
    return t.reshape(b, channels, image_size, image_size)


class Attention(Module):
    def __init__(self, cfg: ModelConfig, block_name: str, seed: int, dtype):
        self.heads = cfg.heads
        self.width = cfg.width
        self.qkv = CondLinear(cfg.width, 3 * cfg.width, param_rng(seed, f"{block_name}.qkv"),
                              "qkv-proj", dtype=dtype)
        self.proj = CondLinear(cfg.width, cfg.width, param_rng(seed, f"{block_name}.proj"),
                               "out-proj", dtype=dtype)

    def __call__(self, x: Tensor, c) -> Tensor:
        b, n, w = x.shape
        dh = w // self.heads
        qkv = self.qkv(x, c)
        q = qkv[:, :, :w].reshape(b, n, self.heads, dh).transpose(0, 2, 1, 3)
        k = qkv[:, :, w : 2 * w].reshape(b, n, self.heads, dh).transpose(0, 2, 1, 3)
        v = qkv[:, :, 2 * w :].reshape(b, n, self.heads, dh).transpose(0, 2, 1, 3)
        att = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)))
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, w)
        return self.proj(out, c)


class Block(Module):
    """Pre-norm attention + FFN with a mid depthwise convolution."""

    def __init__(self, cfg: ModelConfig, idx: int, seed: int, dtype):
        name = f"blocks.{idx}"
        self.width = cfg.width
        self.attn = Attention(cfg, name, seed, dtype)
        self.ln1 = LayerNorm(cfg.width, dtype)
        self.ln2 = LayerNorm(cfg.width, dtype)
        self.fc1 = CondLinear(cfg.width, cfg.hidden, param_rng(seed, f"{name}.fc1"), "mlp", dtype=dtype)
        self.dw = CondConv2d(cfg.hidden, cfg.hidden, 3, param_rng(seed, f"{name}.dw"), "dw-conv",
                             padding=1, groups=cfg.hidden, dtype=dtype)
        self.fc2 = CondLinear(cfg.hidden, cfg.width, param_rng(seed, f"{name}.fc2"), "mlp", dtype=dtype)
        # zero-init modulation: (scale, shift) start at (0, 0), i.e. plain layer norm
        self.mod = (Linear(cfg.d, 4 * cfg.width, param_rng(seed, f"{name}.mod"), dtype=dtype, std=0.0)
                    if "AdaNorm" in cfg.control_method else None)

    def _modulate(self, h: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
        b, n, w = h.shape
        s = scale.reshape(b, 1, w).broadcast_to(h.shape)
        t = shift.reshape(b, 1, w).broadcast_to(h.shape)
        return h * (s + 1.0) + t

    def __call__(self, x: Tensor, c, n_img: int) -> Tensor:
        w = self.width
        mods = None
        if self.mod is not None and c is not None:
            m = self.mod(c)
            mods = (m[:, :w], m[:, w : 2 * w], m[:, 2 * w : 3 * w], m[:, 3 * w :])

        h = self.ln1(x)
        if mods is not None:
            h = self._modulate(h, mods[0], mods[1])
        x = x + self.attn(h, c)

        h = self.ln2(x)
        if mods is not None:
            h = self._modulate(h, mods[2], mods[3])
        h = self.fc1(h, c)
        # depthwise conv runs on the spatial grid; a prepended condition token
        # (if any) bypasses it and rejoins after
        extra = h.shape[1] - n_img
        if extra:
            lead, h_img = h[:, :extra, :], h[:, extra:, :]
        else:
            lead, h_img = None, h
        g = int(np.sqrt(n_img))
        b, _, hid = h_img.shape
        spatial = h_img.transpose(0, 2, 1).reshape(b, hid, g, g)
        spatial = self.dw(spatial, c)
        h_img = spatial.reshape(b, hid, n_img).transpose(0, 2, 1)
        h = h_img if lead is None else cat([lead, h_img], axis=1)
        h = self.fc2(h.gelu(), c)
        return x + h


class ToyDiffusionTransformer(Module):
    """Noise predictor over (image, class label, timestep)."""

    def __init__(self, cfg: ModelConfig, seed: int, max_timestep: int, dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        patch_dim = 1 * cfg.patch_size * cfg.patch_size
        self.patch_embed = CondLinear(patch_dim, cfg.width, param_rng(seed, "patch_embed"),
                                      "patch-embed", dtype=dtype)
        self.pos = normal_init(param_rng(seed, "pos"), (cfg.tokens, cfg.width), dtype)
        self.embedder = (ConditionEmbedder(cfg.d, cfg.n_classes, max_timestep,
                                           sources=cfg.condition_sources,
                                           rng_class=param_rng(seed, "embedder.class"),
                                           rng_time=param_rng(seed, "embedder.time"),
                                           dtype=dtype)
                         if cfg.control_method else None)
        self.cond_token = (Linear(cfg.d, cfg.width, param_rng(seed, "cond_token"), dtype=dtype)
                           if "CondTokens" in cfg.control_method else None)
        self.blocks = [Block(cfg, i, seed, dtype) for i in range(cfg.depth)]
        self.skips = ([Linear(2 * cfg.width, cfg.width, param_rng(seed, f"skips.{i}"), dtype=dtype)
                       for i in range(cfg.depth // 2)] if cfg.skip_connections else [])
        self.ln_f = LayerNorm(cfg.width, dtype)
        self.head = CondLinear(cfg.width, patch_dim, param_rng(seed, "head"), "head", dtype=dtype)
        _attach_adapters(self, cfg, seed, dtype)

    # -- forward ------------------------------------------------------------

    def __call__(self, x, labels, timesteps) -> Tensor:
        cfg = self.cfg
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeError(f"expected (B, 1, {cfg.image_size}, {cfg.image_size}) input, got {x.shape}")
        b = x.shape[0]
        c = self.embedder(labels, timesteps) if self.embedder is not None else None
        can = "CAN" in cfg.control_method

        tokens = self.patch_embed(patchify(x, cfg.patch_size), c if can else None)
        tokens = tokens + self.pos.reshape(1, cfg.tokens, cfg.width).broadcast_to(tokens.shape)
        if self.cond_token is not None:
            tok = self.cond_token(c).reshape(b, 1, cfg.width)
            tokens = cat([tok, tokens], axis=1)

        layer_c = c if (can or "AdaNorm" in cfg.control_method) else None
        stash = []
        n_out = len(self.skips)
        for i, block in enumerate(self.blocks):
            if i >= cfg.depth - n_out and stash:
                tokens = self.skips[i - (cfg.depth - n_out)](cat([tokens, stash.pop()], axis=-1))
            tokens = block(tokens, layer_c, cfg.tokens)
            if i < n_out:
                stash.append(tokens)

        if self.cond_token is not None:
            tokens = tokens[:, 1:, :]
        tokens = self.head(self.ln_f(tokens), c if can else None)
        return unpatchify(tokens, 1, cfg.image_size, cfg.patch_size)

    # -- accounting -----------------------------------------------------------

    def adapters(self):
        """(layer-path, adapter) pairs, shared adapters listed once."""
        seen, out = set(), []
        for path, layer in self._cond_layers():
            a = layer.adapter
            if a is not None and id(a) not in seen:
                seen.add(id(a))
                out.append((path, a))
        return out

    def _cond_layers(self):
        yield "patch_embed", self.patch_embed
        for i, blk in enumerate(self.blocks):
            yield f"blocks.{i}.attn.qkv", blk.attn.qkv
            yield f"blocks.{i}.attn.proj", blk.attn.proj
            yield f"blocks.{i}.fc1", blk.fc1
            yield f"blocks.{i}.dw", blk.dw
            yield f"blocks.{i}.fc2", blk.fc2
        yield "head", self.head


def _attach_adapters(model: ToyDiffusionTransformer, cfg: ModelConfig, seed: int, dtype):
    if "CAN" not in cfg.control_method or not cfg.cond_aware_set:
        return

    def make(layer, path, shared=False):
        shape = layer.weight.shape
        if cfg.weight_adapter == "generator":
            return WeightGenerator(shape, cfg.d, dtype, shared=shared,
                                   out_scale=cfg.gen_out_scale)
        k = cfg.bank_size or _global_bank_k(model, cfg)
        return AdaptiveKernelBank(shape, cfg.d, k, param_rng(seed, f"{path}.bank"),
                                  static_weight=layer.weight, dtype=dtype, shared=shared)

    if "patch-embed" in cfg.cond_aware_set:
        model.patch_embed.adapter = make(model.patch_embed, "patch_embed")
    if "head" in cfg.cond_aware_set:
        model.head.adapter = make(model.head, "head")
    shared_proj = None
    for i, blk in enumerate(model.blocks):
        if "dw-conv" in cfg.cond_aware_set:
            blk.dw.adapter = make(blk.dw, f"blocks.{i}.dw")
        if "qkv-proj" in cfg.cond_aware_set:
            blk.attn.qkv.adapter = make(blk.attn.qkv, f"blocks.{i}.attn.qkv")
        if "mlp" in cfg.cond_aware_set:
            blk.fc1.adapter = make(blk.fc1, f"blocks.{i}.fc1")
            blk.fc2.adapter = make(blk.fc2, f"blocks.{i}.fc2")
        if "out-proj" in cfg.cond_aware_set:
            # one generation module serves every output projection; the layers
            # keep their own static weights
            if shared_proj is None:
                shared_proj = make(blk.attn.proj, "blocks.0.attn.proj", shared=True)
            blk.attn.proj.adapter = shared_proj


def _aware_weight_shapes(cfg: ModelConfig):
    """Weight shapes of the layers cond_aware_set selects (shared ones once)."""
    patch_dim = cfg.patch_size * cfg.patch_size
    shapes = []
    if "patch-embed" in cfg.cond_aware_set:
        shapes.append(("patch-embed", (patch_dim, cfg.width)))
    if "head" in cfg.cond_aware_set:
        shapes.append(("head", (cfg.width, patch_dim)))
    if "out-proj" in cfg.cond_aware_set:
        shapes.append(("out-proj", (cfg.width, cfg.width)))
    for kind, shape, per_block in (
        ("dw-conv", (cfg.hidden, 1, 3, 3), 1),
        ("qkv-proj", (cfg.width, 3 * cfg.width), 1),
        ("mlp", (cfg.width, cfg.hidden), 1),
    ):
        if kind in cfg.cond_aware_set:
            for _ in range(cfg.depth * per_block):
                shapes.append((kind, shape))
                if kind == "mlp":
                    shapes.append((kind, (cfg.hidden, cfg.width)))
    return shapes


def _global_bank_k(model: ToyDiffusionTransformer, cfg: ModelConfig) -> int:
    ks = [budget_matched_k(shape, cfg.d) for _, shape in _aware_weight_shapes(cfg)]
    return min(ks) if ks else 1


def build_model(cfg: ModelConfig, seed: int, max_timestep: int = 1000,
                dtype=DEFAULT_DTYPE) -> ToyDiffusionTransformer:
    return ToyDiffusionTransformer(cfg, seed, max_timestep, dtype)


def count_parameters(model: ToyDiffusionTransformer) -> dict:
    """Exact per-group parameter counts: {static, generators, total}."""
    generators = sum(adapter.param_count() for _, adapter in model.adapters())
    total = sum(p.size for _, p in model.named_parameters())
    return {"static": total - generators, "generators": generators, "total": total}

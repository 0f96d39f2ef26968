"""Property suites: fusion equivalence, distributivity, baseline reduction, gradients.

These are the correctness arguments for the batch execution path, run both
from the test suite and from `canf verify`.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .condaware import (
    conditional_conv_reference,
    fused_conditional_conv,
    fused_conditional_linear,
)
from .config import ModelConfig
from .gradcheck import grad_check
from .model import build_model
from .tensor import Tensor, no_grad

FUSION_BATCHES = (1, 2, 4, 8, 32)
FUSION_CHANNELS = (4, 8, 64)
FUSION_KERNELS = (1, 3)


@dataclass
class SuiteResult:
    name: str
    passed: int
    total: int
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.passed == self.total

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{self.name}: {self.passed}/{self.total} {status}{extra}"


def fusion_equivalence(n_configs: int = 50, seed: int = 0,
                       tol32: float = 1e-5, tol64: float = 1e-10) -> SuiteResult:
    """Randomized grouped-batch vs per-sample-loop agreement, fp32 and fp64."""
    rng = np.random.default_rng(seed)
    passed = 0
    worst32 = worst64 = 0.0
    for _ in range(n_configs):
        b = int(rng.choice(FUSION_BATCHES))
        c = int(rng.choice(FUSION_CHANNELS))
        k = int(rng.choice(FUSION_KERNELS))
        depthwise = bool(rng.integers(2))
        groups = c if depthwise else 1
        spatial = int(rng.choice((5, 8)))
        pad = k // 2
        ok = True
        for dtype, tol in ((np.float32, tol32), (np.float64, tol64)):
            x = Tensor(rng.standard_normal((b, c, spatial, spatial)).astype(dtype))
            w = Tensor(rng.standard_normal((c, c // groups, k, k)).astype(dtype))
            w_c = Tensor(rng.standard_normal((b, c, c // groups, k, k)).astype(dtype))
            with no_grad():
                ref = conditional_conv_reference(x, w, w_c, padding=pad, groups=groups).numpy()
                fused = fused_conditional_conv(x, w, w_c, padding=pad, groups=groups).numpy()
            err = float(np.abs(ref - fused).max())
            if dtype == np.float32:
                worst32 = max(worst32, err)
            else:
                worst64 = max(worst64, err)
            ok = ok and err <= tol
        passed += ok
    return SuiteResult("fusion-equivalence", passed, n_configs,
                       f"max err fp32 {worst32:.2e}, fp64 {worst64:.2e}")


def distributivity(n_instances: int = 20, seed: int = 1, tol: float = 1e-6) -> SuiteResult:
    """(W + W_c) x against W x + W_c x for conv and linear layers.

    Weights are drawn at trained-layer scale (std 0.02, unit-norm features);
    the identity is exact in real arithmetic and the tolerance only absorbs
    fp32 rounding, which needs realistic operand magnitudes to stay below it.
    """
    rng = np.random.default_rng(seed)
    w_scale, x_scale = 0.02, 0.5
    passed = 0
    worst = 0.0
    for i in range(n_instances):
        with no_grad():
            if i % 2 == 0:
                b, c, s = 4, 6, 6
                x = Tensor((x_scale * rng.standard_normal((b, c, s, s))).astype(np.float32))
                w = Tensor((w_scale * rng.standard_normal((c, c, 3, 3))).astype(np.float32))
                w_c = Tensor((w_scale * rng.standard_normal((b, c, c, 3, 3))).astype(np.float32))
                summed = fused_conditional_conv(x, w, w_c, padding=1).numpy()
                zero = Tensor(np.zeros_like(w.data))
                split = (fused_conditional_conv(x, w, Tensor(np.zeros_like(w_c.data)), padding=1).numpy()
                         + fused_conditional_conv(x, zero, w_c, padding=1).numpy())
            else:
                b, n, din, dout = 4, 5, 12, 8
                x = Tensor((x_scale * rng.standard_normal((b, n, din))).astype(np.float32))
                w = Tensor((w_scale * rng.standard_normal((din, dout))).astype(np.float32))
                w_c = Tensor((w_scale * rng.standard_normal((b, din, dout))).astype(np.float32))
                summed = fused_conditional_linear(x, w, w_c).numpy()
                zero = Tensor(np.zeros_like(w.data))
                split = (fused_conditional_linear(x, w, Tensor(np.zeros_like(w_c.data))).numpy()
                         + fused_conditional_linear(x, zero, w_c).numpy())
        err = float(np.abs(summed - split).max())
        worst = max(worst, err)
        passed += err <= tol
    return SuiteResult("distributivity", passed, n_instances, f"max err {worst:.2e}")


BASELINE_VARIANTS = (
    ("can:dw", dict(control_method=frozenset({"CAN"}), cond_aware_set=frozenset({"dw-conv"}))),
    ("can:patch", dict(control_method=frozenset({"CAN"}), cond_aware_set=frozenset({"patch-embed"}))),
    ("can:outproj", dict(control_method=frozenset({"CAN"}), cond_aware_set=frozenset({"out-proj"}))),
    ("can:qkv", dict(control_method=frozenset({"CAN"}), cond_aware_set=frozenset({"qkv-proj"}))),
    ("can:mlp", dict(control_method=frozenset({"CAN"}), cond_aware_set=frozenset({"mlp"}))),
    ("can:head", dict(control_method=frozenset({"CAN"}), cond_aware_set=frozenset({"head"}))),
    ("can:default", dict(control_method=frozenset({"CAN"}),
                         cond_aware_set=frozenset({"dw-conv", "patch-embed", "out-proj"}))),
    ("can:all", dict(control_method=frozenset({"CAN"}),
                     cond_aware_set=frozenset({"dw-conv", "patch-embed", "out-proj",
                                               "qkv-proj", "mlp", "head"}))),
    ("adanorm", dict(control_method=frozenset({"AdaNorm"}), cond_aware_set=frozenset())),
    ("can+adanorm", dict(control_method=frozenset({"CAN", "AdaNorm"}),
                         cond_aware_set=frozenset({"dw-conv", "patch-embed", "out-proj"}))),
)


def baseline_reduction(n_inputs: int = 10, seed: int = 2, batch: int = 4) -> SuiteResult:
    """Zero-init conditioning must reproduce the static forward pass exactly.

    Condition tokens are excluded: prepending a token changes the attention
    pattern structurally and has no zero-init neutral point.
    """
    base_cfg = ModelConfig(control_method=frozenset(), cond_aware_set=frozenset())
    static = build_model(base_cfg, seed=7, max_timestep=100)
    rng = np.random.default_rng(seed)
    inputs = [rng.standard_normal((batch, 1, base_cfg.image_size, base_cfg.image_size)).astype(np.float32)
              for _ in range(n_inputs)]
    labels = rng.integers(0, base_cfg.n_classes, size=batch)
    ts = rng.integers(0, 100, size=batch)
    with no_grad():
        expected = [static(x, labels, ts).numpy() for x in inputs]

    passed = 0
    total = len(BASELINE_VARIANTS)
    failures = []
    for name, kw in BASELINE_VARIANTS:
        cfg = replace(base_cfg, **kw)
        model = build_model(cfg, seed=7, max_timestep=100)
        with no_grad():
            same = all((model(x, labels, ts).numpy() == want).all()
                       for x, want in zip(inputs, expected))
        if same:
            passed += 1
        else:
            failures.append(name)
    detail = f"variants x {n_inputs} inputs" + (f"; mismatched: {failures}" if failures else "")
    return SuiteResult("baseline-reduction", passed, total, detail)


def gradcheck_config() -> ModelConfig:
    """Smallest config that still exercises every differentiable path."""
    return ModelConfig(
        image_size=4, patch_size=2, width=8, depth=2, heads=2, d=4, n_classes=2,
        mlp_ratio=2, cond_aware_set=frozenset({"dw-conv", "patch-embed", "out-proj"}),
        control_method=frozenset({"CAN", "AdaNorm", "CondTokens"}),
        skip_connections=True,
    )


def gradient_suite(tol: float = 1e-6, h: float = 3e-6, seed: int = 3) -> SuiteResult:
    """fp64 central differences over every parameter of a tiny full model."""
    cfg = gradcheck_config()
    model = build_model(cfg, seed=11, max_timestep=50, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # zero is a valid but degenerate point for the conditioning heads; nudge
    # them so the fused path's weight coupling is exercised
    for _, adapter in model.adapters():
        adapter.map_weights.data += 0.01 * rng.standard_normal(adapter.map_weights.shape)
    for blk in model.blocks:
        blk.mod.weight.data += 0.01 * rng.standard_normal(blk.mod.weight.shape)

    b = 3
    x_t = rng.standard_normal((b, 1, cfg.image_size, cfg.image_size))
    eps = rng.standard_normal(x_t.shape)
    labels = rng.integers(0, cfg.n_classes + 1, size=b)  # include the null class
    ts = rng.integers(0, 50, size=b)
    target = Tensor(eps, dtype=np.float64)

    def loss():
        return ((model(x_t, labels, ts) - target) ** 2).mean()

    params = list(model.named_parameters())
    worst, report = grad_check(loss, params, h=h)
    n_params = sum(p.size for _, p in params)
    bad = sum(1 for err in report.values() if err > tol)
    return SuiteResult("gradient-check", len(report) - bad, len(report),
                       f"{n_params} scalars, max rel err {worst:.2e}")


def run_all(fast: bool = False):
    """Every suite; `fast` trims counts for smoke testing."""
    n = 12 if fast else 50
    results = [
        fusion_equivalence(n_configs=n),
        distributivity(),
        baseline_reduction(n_inputs=3 if fast else 10),
        gradient_suite(),
    ]
    return results

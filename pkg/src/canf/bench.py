"""Wall-clock comparison of the per-sample loop vs the fused grouped path.

Timings are only reported after the strategies are shown to agree on the
exact tensors being timed; a disagreement aborts the row.
"""
from __future__ import annotations

import io
import time
from dataclasses import dataclass

import numpy as np

from .condaware import conditional_conv_reference, fused_conditional_conv
from .tensor import Tensor, conv2d, no_grad


class StrategyMismatch(RuntimeError):
    """Fused and per-sample outputs disagree; timings are withheld."""


@dataclass(frozen=True)
class BenchShape:
    channels: int
    kernel: int
    depthwise: bool
    spatial: int

    @property
    def label(self) -> str:
        mode = "dw" if self.depthwise else "dense"
        return f"{mode} {self.kernel}x{self.kernel} C={self.channels} {self.spatial}x{self.spatial}"


DEFAULT_SHAPES = (
    BenchShape(64, 3, True, 8),
    BenchShape(128, 3, True, 4),
    BenchShape(64, 1, False, 8),
    BenchShape(8, 3, False, 8),
)
DEFAULT_BATCHES = (1, 8, 32)


@dataclass
class BenchRow:
    shape: BenchShape
    batch: int
    loop_ms: float
    fused_ms: float
    static_ms: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.loop_ms / self.fused_ms

    @property
    def overhead_pct(self) -> float:
        return (self.fused_ms - self.static_ms) / self.static_ms * 100.0


def _paired_medians_ms(fns, repeats: int, warmup: int = 3):
    """Interleave the strategies each round so machine drift hits all equally."""
    for _ in range(warmup):
        for fn in fns:
            fn()
    times = [[] for _ in fns]
    for _ in range(repeats):
        for slot, fn in zip(times, fns):
            t0 = time.perf_counter()
            fn()
            slot.append(time.perf_counter() - t0)
    return [float(np.median(slot)) * 1e3 for slot in times]


def bench_row(shape: BenchShape, batch: int, repeats: int = 7, rng=None,
              agreement_tol: float = 1e-5) -> BenchRow:
    rng = rng or np.random.default_rng(0)
    c, k, s = shape.channels, shape.kernel, shape.spatial
    groups = c if shape.depthwise else 1
    pad = k // 2
    x = Tensor(rng.standard_normal((batch, c, s, s)).astype(np.float32))
    w = Tensor(rng.standard_normal((c, c // groups, k, k)).astype(np.float32) * 0.1)
    w_c = Tensor(rng.standard_normal((batch, c, c // groups, k, k)).astype(np.float32) * 0.1)

    def loop():
        return conditional_conv_reference(x, w, w_c, padding=pad, groups=groups)

    def fused():
        return fused_conditional_conv(x, w, w_c, padding=pad, groups=groups)

    def static():
        return conv2d(x, w, padding=pad, groups=groups)

    with no_grad():
        diff = float(np.abs(loop().numpy() - fused().numpy()).max())
        if diff > agreement_tol:
            raise StrategyMismatch(
                f"fused and per-sample outputs differ by {diff:.3e} (> {agreement_tol:.0e}) "
                f"for {shape.label} B={batch}; refusing to time")
        loop_ms, fused_ms, static_ms = _paired_medians_ms((loop, fused, static), repeats)
    return BenchRow(shape, batch, loop_ms=loop_ms, fused_ms=fused_ms,
                    static_ms=static_ms, max_abs_diff=diff)


def run_bench(shapes=DEFAULT_SHAPES, batch_sizes=DEFAULT_BATCHES, repeats: int = 7,
              seed: int = 0) -> list[BenchRow]:
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    return [bench_row(shape, b, repeats, rng) for shape in shapes for b in batch_sizes]


def bench_table(rows) -> str:
    buf = io.StringIO()
    buf.write(f"{'shape':<24} {'B':>3} {'loop ms':>9} {'fused ms':>9} {'static ms':>10} "
              f"{'speedup':>8} {'overhead%':>10} {'max|diff|':>10}\n")
    for r in rows:
        buf.write(f"{r.shape.label:<24} {r.batch:>3} {r.loop_ms:>9.3f} {r.fused_ms:>9.3f} "
                  f"{r.static_ms:>10.3f} {r.speedup:>8.2f} {r.overhead_pct:>10.1f} "
                  f"{r.max_abs_diff:>10.2e}\n")
    return buf.getvalue()

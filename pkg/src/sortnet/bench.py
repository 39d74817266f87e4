"""Wall-time comparison of a SORT block against its linear-sum twin."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from sortnet.autodiff import Tape, Tensor
from sortnet.fusion import BRANCH_SORT, LINEAR_SUM, FusionSpec, residual_spec
from sortnet.model import _build
from sortnet.netbuild import LayerSpec, branch_transform, conv, residual_block

Block = Literal["residual", "branch"]


@dataclass
class BenchResult:
    block: str
    channels: int
    size: int
    batch: int
    reps: int
    sort_median: float
    base_median: float
    sort_times: list[float]
    base_times: list[float]

    @property
    def ratio(self) -> float:
        return self.sort_median / self.base_median

    def lines(self) -> list[str]:
        return [
            f"block={self.block} channels={self.channels} size={self.size}x{self.size} batch={self.batch} reps={self.reps}",
            f"base median = {self.base_median * 1e3:.2f} ms",
            f"sort median = {self.sort_median * 1e3:.2f} ms",
            f"sort/base = {self.ratio:.3f}",
        ]


def block_layer(block: Block, channels: int, fusion: FusionSpec) -> LayerSpec:
    if block == "residual":
        return residual_block(channels, channels, 1, fusion)
    if block == "branch":
        return branch_transform(conv(channels, channels, 5), fusion)
    raise ValueError(f"unknown block {block!r}; expected 'residual' or 'branch'")


class _BlockRunner:
    """A single block outside any classifier, with its parameters."""

    def __init__(self, layer: LayerSpec, seed: int):
        self.body = _build((layer,), np.random.default_rng(seed), "bench")
        self.params = list(self.body.params())

    def step(self, x: np.ndarray, upstream: np.ndarray) -> float:
        for p in self.params:
            p.zero_grad()
        xt = Tensor(x)
        t0 = time.perf_counter()
        with Tape() as tape:
            out = self.body(xt, True)
        tape.backward(out, upstream)
        return time.perf_counter() - t0


def bench_block(
    block: Block = "residual",
    channels: int = 64,
    size: int = 32,
    batch: int = 100,
    reps: int = 30,
    warmup: int = 2,
    seed: int = 0,
    sort: Optional[FusionSpec] = None,
    base: Optional[FusionSpec] = None,
) -> BenchResult:
    """Median forward+backward time of the SORT block and of the same block with plain-sum fusion.

    Both networks share initial weights and input. Runs alternate between the
    two so slow drifts in machine load affect both equally.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    sort = sort or (residual_spec() if block == "residual" else BRANCH_SORT)
    base = base or LINEAR_SUM
    run_s = _BlockRunner(block_layer(block, channels, sort), seed)
    run_b = _BlockRunner(block_layer(block, channels, base), seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, channels, size, size))
    g = rng.standard_normal(x.shape)
    for _ in range(warmup):
        run_s.step(x, g)
        run_b.step(x, g)
    ts, tb = [], []
    for i in range(reps):
        pair = [(run_s, ts), (run_b, tb)]
        for run, acc in pair if i % 2 == 0 else pair[::-1]:
            acc.append(run.step(x, g))
    return BenchResult(block, channels, size, batch, reps, float(np.median(ts)), float(np.median(tb)), ts, tb)


def self_bench(block: Block = "residual", channels: int = 16, size: int = 16, batch: int = 20, reps: int = 30) -> BenchResult:
    """Bench a block against an identical copy of itself; the ratio measures timing noise."""
    spec = residual_spec() if block == "residual" else BRANCH_SORT
    return bench_block(block, channels, size, batch, reps, sort=spec, base=spec)


__all__ = ["BenchResult", "bench_block", "block_layer", "self_bench"]

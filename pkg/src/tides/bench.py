"""Wall-clock forward+backward timing across sequence lengths."""

from __future__ import annotations

import statistics
import time
from typing import Sequence

import numpy as np

from .autodiff import rng_stream, value_and_grad
from .block import ModelConfig, SequenceModel, cross_entropy, model_param_count

BENCH_CONFIG = ModelConfig(d_input=4, H=48, layers=4, ssm_mult=16, bc_rank=4, n_out=2)
DOUBLING_BAND = (1.3, 3.0)


def bench_param_count() -> int:
    return model_param_count(BENCH_CONFIG)


def time_length(model: SequenceModel, L: int, batch: int, repeats: int, seed: int = 0) -> float:
    """Median milliseconds of one forward+backward pass at length ``L``."""
    if L < 64:
        raise ValueError(f"benchmark lengths must be at least 64, got {L}")
    rng = rng_stream(seed, "bench", L)
    u = rng.normal(size=(batch, L, model.cfg.d_input))
    delta = rng.uniform(0.5, 1.5, (batch, L))
    labels = rng.integers(0, model.cfg.n_out, batch)

    def loss(p):
        return cross_entropy(model(p, u, delta, train=True), labels)

    value_and_grad(loss, model.params)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        value_and_grad(loss, model.params)
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


def run_bench(lengths: Sequence[int], batch: int = 8, repeats: int = 5, seed: int = 0) -> list[tuple[int, float]]:
    model = SequenceModel(BENCH_CONFIG, rng_stream(seed, "bench", "init"))
    return [(int(L), time_length(model, int(L), batch, repeats, seed)) for L in lengths]


def doubling_ratios(rows: Sequence[tuple[int, float]]) -> dict[tuple[int, int], float]:
    """time(2L)/time(L) for every consecutive pair whose lengths double."""
    by_len = dict(rows)
    return {(L, 2 * L): by_len[2 * L] / by_len[L] for L in sorted(by_len) if 2 * L in by_len}

"""Wall-clock sampling benchmark."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .accounting import count_costs
from .diffusion import CountingGenerator, DiffusionSchedule, SamplerConfig, sample
from .networks import Generator
from .rng import RngStream

CSV_HEADER = ["config", "resolution", "steps", "params", "flops", "mem", "t_mean_s", "t_p50_s", "t_p95_s"]
DEFAULT_WARMUP = 1


@dataclass
class BenchResult:
    batch: int
    trials: int
    warmup: int
    steps: int
    times: np.ndarray  # seconds per batch, one per timed trial
    generator_calls: int  # generator forwards per batch (identical for every trial)

    def stats(self, per_image: bool = False) -> dict[str, float]:
        t = self.times / (self.batch if per_image else 1)
        return {"mean": float(t.mean()), "p50": float(np.percentile(t, 50)), "p95": float(np.percentile(t, 95))}


def bench_sampling(G: Generator, schedule: DiffusionSchedule, batch: int = 1, trials: int = 10,
                   warmup: int = DEFAULT_WARMUP, seed: int = 0) -> BenchResult:
    """Time ``trials`` full sampling passes of ``batch`` images after ``warmup`` untimed passes."""
    if trials < 1 or batch < 1 or warmup < 0:
        raise ValueError("trials and batch must be >= 1, warmup >= 0")
    counter = CountingGenerator(G)
    cfg = SamplerConfig(steps=schedule.T, latent_dim=G.spec.latent_dim, seed=seed)
    rng = RngStream(seed, "bench")
    shape = G.spec.input_shape()
    calls = set()
    times = []
    for i in range(warmup + trials):
        before = counter.calls
        start = time.perf_counter()
        sample(counter, schedule, cfg, rng, batch, shape)
        elapsed = time.perf_counter() - start
        calls.add(counter.calls - before)
        if i >= warmup:
            times.append(elapsed)
    if len(calls) != 1:
        raise RuntimeError(f"generator call count varied between trials: {sorted(calls)}")
    return BenchResult(batch, trials, warmup, schedule.T, np.array(times), calls.pop())


def csv_row(name: str, G: Generator, result: BenchResult) -> list:
    """One row of the bench CSV.  ``flops`` is per image for a full T-step pass."""
    rep = count_costs(G.spec)
    s = result.stats()
    return [name, G.spec.resolution, result.steps, rep.params, rep.flops * result.steps,
            rep.activation_mem, s["mean"], s["p50"], s["p95"]]


def write_csv(path: str, rows: list[list]) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(CSV_HEADER)
        w.writerows(rows)

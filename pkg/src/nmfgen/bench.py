"""Per-iteration runtime of the update sweeps."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Iterable, List

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .factorize import (
    init_factors,
    update_convex_negbin,
    update_convex_normal,
    update_convex_poisson,
    update_convex_tweedie,
    update_traditional_negbin,
    update_traditional_normal,
    update_traditional_poisson,
    update_traditional_tweedie,
)
from .model import CostModel, Family, ModelSpec, Variant
from .synth import planted_factors, sample


@dataclass(frozen=True)
class BenchRecord:
    variant: str
    family: str
    n: int
    m: int
    k: int
    seconds: float
    reps: int
    threads: int

    def to_dict(self) -> dict:
        return asdict(self)


FIELDS = ("variant", "family", "n", "m", "k", "seconds", "reps", "threads")


def _sweep(variant: Variant, cost: CostModel):
    fam = cost.family
    if variant is Variant.TRADITIONAL:
        return {
            Family.NORMAL: lambda A, B, V: update_traditional_normal(A, B, V),
            Family.POISSON: lambda A, B, V: update_traditional_poisson(A, B, V),
            Family.TWEEDIE: lambda A, B, V: update_traditional_tweedie(A, B, V, cost.p),
            Family.NEGBIN: lambda A, B, V: update_traditional_negbin(A, B, V, cost.alpha),
        }[fam]
    return {
        Family.NORMAL: lambda A, B, V: update_convex_normal(A, B, V),
        Family.POISSON: lambda A, B, V: update_convex_poisson(A, B, V),
        Family.TWEEDIE: lambda A, B, V: update_convex_tweedie(A, B, V, cost.p),
        Family.NEGBIN: lambda A, B, V: update_convex_negbin(A, B, V, cost.alpha),
    }[fam]


def _cost_for(spec: ModelSpec) -> CostModel:
    if spec.family is Family.NORMAL:
        return CostModel.normal()
    if spec.family is Family.POISSON:
        return CostModel.poisson()
    if spec.family is Family.TWEEDIE:
        return CostModel.tweedie(1.5 if spec.family_param is None else spec.family_param)
    return CostModel.negbin(45.21 if spec.family_param is None else spec.family_param)


def time_sweep(spec: ModelSpec, n: int, m: int, k: int, reps: int = 10, seed: int = 0,
               threads: int = 1) -> BenchRecord:
    """Mean wall time of one full update sweep (both factors), init excluded."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cost = _cost_for(spec)
    rng = np.random.default_rng(seed)
    W, H = planted_factors(n, m, k, 10.0, rng)
    V = sample(W @ H, "poisson", rng) + (1.0 if cost.p >= 2 else 0.0)
    fac = init_factors(V, k, spec.variant, seed)
    A, B = (fac.W, fac.H) if spec.variant is Variant.TRADITIONAL else (fac.E, fac.D)
    step = _sweep(spec.variant, cost)
    with threadpool_limits(limits=threads):
        A, B = step(A, B, V)  # warm-up
        t0 = time.perf_counter()
        for _ in range(reps):
            A, B = step(A, B, V)
        elapsed = time.perf_counter() - t0
    fam = spec.family.value + (f"_{spec.family_param:g}" if spec.family_param is not None else "")
    return BenchRecord(spec.variant.value, fam, n, m, k, elapsed / reps, reps, threads)


def run_bench(specs: Iterable[ModelSpec], sizes: Iterable[int], m: int, k: int, reps: int = 10,
              seed: int = 0, threads: int = 1) -> List[BenchRecord]:
    return [time_sweep(s, n, m, k, reps, seed, threads) for s in specs for n in sizes]


def blas_threads() -> int:
    return max((d.get("num_threads", 1) for d in threadpool_info()), default=1)

"""Synthetic data drawn from the NMF models with planted factors."""

from __future__ import annotations

from typing import Tuple

import numpy as np

FAMILIES = ("normal", "poisson", "negbin", "cpoisson")


def planted_factors(n: int, m: int, k: int, mean: float, rng: np.random.Generator):
    """Uniform W (N x K) and H (K x M), scaled so that ``mean(W @ H) == mean``."""
    W = rng.uniform(size=(n, k))
    H = rng.uniform(size=(k, m))
    c = np.sqrt(mean / (W @ H).mean())
    return W * c, H * c


def sample(mu: np.ndarray, family: str, rng: np.random.Generator, *, alpha: float = None,
           p: float = None, sigma2: float = 1.0) -> np.ndarray:
    """Draw one observation per cell with mean ``mu``."""
    if family == "poisson":
        return rng.poisson(mu).astype(float)
    if family == "negbin":
        if alpha is None or alpha <= 0:
            raise ValueError("negbin sampling needs alpha > 0")
        return rng.negative_binomial(alpha, alpha / (alpha + mu)).astype(float)
    if family == "normal":
        sd = np.sqrt(sigma2)
        out = rng.normal(mu, sd)
        for _ in range(10_000):
            bad = out < 0
            if not bad.any():
                return out
            out[bad] = rng.normal(mu[bad], sd)
        raise RuntimeError("truncated normal resampling did not terminate")
    if family == "cpoisson":
        if p is None or not 1 < p < 2:
            raise ValueError("compound Poisson sampling needs 1 < p < 2")
        # Poisson number of Gamma jumps; a sum of j jumps is Gamma(j * shape)
        lam = mu ** (2 - p) / (sigma2 * (2 - p))
        shape = (2 - p) / (p - 1)
        scale = sigma2 * (p - 1) * mu ** (p - 1)
        counts = rng.poisson(lam)
        out = np.zeros_like(mu, dtype=float)
        pos = counts > 0
        out[pos] = rng.gamma(counts[pos] * shape, scale[pos])
        return out
    raise ValueError(f"unsupported family {family!r}; expected one of {FAMILIES}")


def synth(n: int, m: int, k: int, family: str, seed: int = 0, mean: float = 10.0,
          **params) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(V, W, H)`` with ``V`` drawn entrywise at mean ``W @ H``."""
    if family not in FAMILIES:
        raise ValueError(f"unsupported family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng(seed)
    W, H = planted_factors(n, m, k, mean, rng)
    return sample(W @ H, family, rng, **params), W, H

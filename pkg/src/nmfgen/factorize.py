"""Multiplicative MM updates for traditional and convex NMF, and the fit driver.

Traditional NMF models ``V ~ W H`` (W: N x K weights, H: K x M features).
Convex NMF models ``V^T ~ V^T E D`` (E: N x K, D: K x N); its weights are
``D^T`` and its features ``(V^T E)^T``, so in both cases the fitted means are
``weights @ features``.

Every update is an elementwise product of the current factor with a ratio of
non-negative matrices, raised to ``gamma(p)`` for Tweedie costs
(``gamma(0) = 1``, ``gamma(p) = 1/p`` for ``p >= 1``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from . import deviance
from .model import CostModel, DataMatrix, Family, ModelSpec, Variant, as_data_matrix

log = logging.getLogger(__name__)

EPS_DEN = 1e-16
EPS_FACTOR = 1e-16
# convex updates stream over blocks of data columns of at most this many cells
BLOCK_CELLS = 1 << 21


class NonFiniteUpdateError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """``tol=None`` means 1e-6 times the divergence after the first iteration."""

    tol: Optional[float] = None
    max_iter: int = 10_000
    restarts: int = 5
    seed: int = 0
    init_scale: Optional[float] = None

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.init_scale is not None and not self.init_scale > 0:
            raise ValueError("init_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "max_iter": self.max_iter,
            "restarts": self.restarts,
            "seed": self.seed,
            "init_scale": self.init_scale,
        }


@dataclass
class Factorization:
    variant: Variant
    W: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    vte: Optional[np.ndarray] = None  # V^T E, M x K (convex only)
    divergence_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    seed: int = 0
    normalized: bool = False
    cost: Optional[CostModel] = None

    @property
    def rank(self) -> int:
        return self.weights.shape[1]

    @property
    def weights(self) -> np.ndarray:
        """N x K: ``W`` or ``D^T``."""
        return self.W if self.variant is Variant.TRADITIONAL else self.D.T

    @property
    def features(self) -> np.ndarray:
        """K x M: ``H`` or ``(V^T E)^T``."""
        return self.H if self.variant is Variant.TRADITIONAL else self.vte.T

    @property
    def fitted_values(self) -> np.ndarray:
        return self.weights @ self.features

    @property
    def final_divergence(self) -> float:
        return self.divergence_trace[-1] if self.divergence_trace else float("nan")

    @property
    def monotone(self) -> bool:
        t = np.asarray(self.divergence_trace)
        return bool(np.all(np.diff(t) <= 1e-12 * np.maximum(1.0, np.abs(t[:-1]))))


def gamma_exponent(p: float) -> float:
    if p == 0:
        return 1.0
    if p >= 1:
        return 1.0 / p
    raise ValueError(f"Tweedie power p={p} not in {{0}} U [1, inf)")


def _apply(factor, num, den, gamma=1.0):
    ratio = num / np.maximum(den, EPS_DEN)
    if gamma != 1.0:
        ratio = ratio ** gamma
    out = factor * ratio
    if not np.all(np.isfinite(out)):
        raise NonFiniteUpdateError("non-finite value in multiplicative update (support violation?)")
    return np.maximum(out, EPS_FACTOR)


def _dense(V) -> np.ndarray:
    if isinstance(V, DataMatrix):
        V = V.values
    return V.toarray() if sp.issparse(V) else np.asarray(V, dtype=float)


def _recon(W, H):
    return np.maximum(W @ H, EPS_DEN)


def _row_alpha(alpha, n):
    """Alpha as a scalar or an (N, 1) column for V-oriented matrices."""
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 0:
        return float(a)
    if a.shape != (n,):
        raise ValueError(f"per-row alpha must have length {n}")
    return a[:, None]


# -- traditional half-steps --------------------------------------------------

def normal_step_h(V, W, H):
    return _apply(H, W.T @ V, (W.T @ W) @ H)


def normal_step_w(V, W, H):
    return _apply(W, V @ H.T, W @ (H @ H.T))


def poisson_step_h(V, W, H):
    return _apply(H, W.T @ (V / _recon(W, H)), W.sum(axis=0)[:, None])


def poisson_step_w(V, W, H):
    return _apply(W, (V / _recon(W, H)) @ H.T, H.sum(axis=1)[None, :])


def tweedie_step_h(V, W, H, p):
    R = _recon(W, H)
    return _apply(H, W.T @ (V * R ** (-p)), W.T @ R ** (1 - p), gamma_exponent(p))


def tweedie_step_w(V, W, H, p):
    R = _recon(W, H)
    return _apply(W, (V * R ** (-p)) @ H.T, R ** (1 - p) @ H.T, gamma_exponent(p))


def negbin_step_h(V, W, H, alpha):
    R = _recon(W, H)
    a = _row_alpha(alpha, V.shape[0])
    return _apply(H, W.T @ (V / R), W.T @ ((V + a) / (R + a)))


def negbin_step_w(V, W, H, alpha):
    R = _recon(W, H)
    a = _row_alpha(alpha, V.shape[0])
    return _apply(W, (V / R) @ H.T, ((V + a) / (R + a)) @ H.T)


def update_traditional_normal(W, H, V):
    V = _dense(V)
    H = normal_step_h(V, W, H)
    return normal_step_w(V, W, H), H


def update_traditional_poisson(W, H, V):
    V = _dense(V)
    H = poisson_step_h(V, W, H)
    return poisson_step_w(V, W, H), H


def update_traditional_tweedie(W, H, V, p):
    V = _dense(V)
    H = tweedie_step_h(V, W, H, p)
    return tweedie_step_w(V, W, H, p), H


def update_traditional_negbin(W, H, V, alpha):
    V = _dense(V)
    H = negbin_step_h(V, W, H, alpha)
    return negbin_step_w(V, W, H, alpha), H


# -- convex half-steps ---------------------------------------------------------
#
# Ratio terms are built on V^T-oriented blocks (rows = data columns m).
# ``terms(vt, r)`` returns (top, bottom); ``bottom is None`` stands for the
# all-ones matrix J, whose products have closed forms.


def _blocks(V):
    n, m = V.shape
    step = max(1, BLOCK_CELLS // max(n, 1))
    for start in range(0, m, step):
        stop = min(m, start + step)
        vb = V[:, start:stop]
        vtb = vb.T.toarray() if sp.issparse(vb) else vb.T
        yield vb, vtb


def _normal_terms(vt, r):
    return vt, r


def _poisson_terms(vt, r):
    return vt / r, None


def _tweedie_terms(p):
    def terms(vt, r):
        return vt * r ** (-p), r ** (1 - p)
    return terms


def _negbin_terms(alpha, n):
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 1 and a.shape != (n,):
        raise ValueError(f"per-row alpha must have length {n}")
    a = a if a.ndim == 0 else a[None, :]

    def terms(vt, r):
        return vt / r, (vt + a) / (r + a)
    return terms


def _convex_e_step(V, E, D, terms, gamma=1.0):
    n, k = E.shape
    num = np.zeros((n, k))
    den = np.zeros((n, k))
    ones_den = False
    for vb, vtb in _blocks(V):
        r = np.maximum((vtb @ E) @ D, EPS_DEN)
        top, bot = terms(vtb, r)
        num += vb @ (top @ D.T)
        if bot is None:
            ones_den = True
        else:
            den += vb @ (bot @ D.T)
    if ones_den:
        # V J D^T = rowsum(V) outer rowsum(D)
        den = np.outer(np.asarray(V.sum(axis=1)).ravel(), D.sum(axis=1))
    return _apply(E, num, den, gamma)


def _convex_d_step(V, E, D, terms, gamma=1.0):
    k, n = D.shape
    num = np.zeros((k, n))
    den = np.zeros((k, n))
    ones_den = False
    colsum_x = np.zeros(k)
    for vb, vtb in _blocks(V):
        x = vtb @ E
        r = np.maximum(x @ D, EPS_DEN)
        top, bot = terms(vtb, r)
        num += x.T @ top
        if bot is None:
            ones_den = True
            colsum_x += x.sum(axis=0)
        else:
            den += x.T @ bot
    if ones_den:
        den = np.repeat(colsum_x[:, None], n, axis=1)
    return _apply(D, num, den, gamma)


def _convex_input(V):
    if isinstance(V, DataMatrix):
        V = V.values
    return V.tocsc() if sp.issparse(V) else np.asarray(V, dtype=float)


def _convex_update(E, D, V, terms, gamma=1.0):
    V = _convex_input(V)
    E = _convex_e_step(V, E, D, terms, gamma)
    D = _convex_d_step(V, E, D, terms, gamma)
    return E, D


def update_convex_normal(E, D, V):
    return _convex_update(E, D, V, _normal_terms)


def update_convex_poisson(E, D, V):
    return _convex_update(E, D, V, _poisson_terms)


def update_convex_tweedie(E, D, V, p):
    return _convex_update(E, D, V, _tweedie_terms(p), gamma_exponent(p))


def update_convex_negbin(E, D, V, alpha):
    V = _convex_input(V)
    return _convex_update(E, D, V, _negbin_terms(alpha, V.shape[0]))


def convex_step_e(V, E, D, cost: CostModel):
    V = _convex_input(V)
    terms, gamma = _convex_terms_for(cost, V.shape[0])
    return _convex_e_step(V, E, D, terms, gamma)


def convex_step_d(V, E, D, cost: CostModel):
    V = _convex_input(V)
    terms, gamma = _convex_terms_for(cost, V.shape[0])
    return _convex_d_step(V, E, D, terms, gamma)


def _convex_terms_for(cost: CostModel, n: int):
    if cost.family is Family.NORMAL:
        return _normal_terms, 1.0
    if cost.family is Family.POISSON:
        return _poisson_terms, 1.0
    if cost.family is Family.TWEEDIE:
        return _tweedie_terms(cost.p), gamma_exponent(cost.p)
    return _negbin_terms(cost.alpha, n), 1.0


def convex_reconstruction(V, E, D) -> np.ndarray:
    """``(V^T E D)^T``, N x M."""
    V = _convex_input(V)
    return D.T @ np.asarray(V.T @ E).T


def convex_divergence(V, E, D, cost: CostModel) -> float:
    V = _convex_input(V)
    total = 0.0
    for _, vtb in _blocks(V):
        r = np.maximum((vtb @ E) @ D, EPS_DEN)
        total += deviance.divergence(vtb.T, r.T, cost)
    return total


# -- normalization -------------------------------------------------------------

def normalize_convex(E, D, V):
    """Scale columns of E so the columns of ``V^T E`` sum to one; D compensates."""
    V = _convex_input(V)
    c = np.asarray(V.sum(axis=1)).ravel() @ E
    if np.any(c <= 0):
        raise ValueError("V^T E has a zero column; cannot normalize")
    return E / c, D * c[:, None]


def normalize_traditional(W, H):
    """Scale rows of H to sum to one; W compensates."""
    c = H.sum(axis=1)
    if np.any(c <= 0):
        raise ValueError("H has a zero row; cannot normalize")
    return W * c, H / c[:, None]


# -- driver ----------------------------------------------------------------------

def init_factors(v, k: int, variant: Variant, seed: int, init_scale: Optional[float] = None) -> Factorization:
    """Random strictly positive starting factors.

    Traditional: W, H ~ U(0, s] with ``s = sqrt(mean(V)/K)``. Convex:
    E ~ U(0, 2/N] and D ~ U(0, 2/K], so that ``V^T E D`` has mean close to
    ``mean(V)``; ``init_scale`` replaces the upper bound of D.
    """
    v = as_data_matrix(v)
    n, m = v.shape
    if k < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    if variant is Variant.TRADITIONAL:
        mean = float(v.values.sum()) / (n * m)
        s = init_scale if init_scale is not None else np.sqrt(max(mean, EPS_FACTOR) / k)
        W = s * (1.0 - rng.random((n, k)))
        H = s * (1.0 - rng.random((k, m)))
        return Factorization(variant, W=W, H=H, seed=seed)
    s_d = init_scale if init_scale is not None else 2.0 / k
    E = (2.0 / n) * (1.0 - rng.random((n, k)))
    D = s_d * (1.0 - rng.random((k, n)))
    V = _convex_input(v.values)
    return Factorization(variant, E=E, D=D, vte=np.asarray(V.T @ E), seed=seed)


def check_support(v: DataMatrix, cost: CostModel) -> None:
    data = v.values.data if v.is_sparse else v.values
    if cost.family is Family.TWEEDIE and cost.p >= 2:
        if v.sparsity > 0 or np.any(data <= 0):
            raise deviance.SupportError(f"p={cost.p} requires strictly positive data")


def _single_fit(v: DataMatrix, k: int, variant: Variant, cost: CostModel, config: FitConfig, seed: int) -> Factorization:
    fac = init_factors(v, k, variant, seed, config.init_scale)
    if variant is Variant.TRADITIONAL:
        V = v.dense()
        A, B = fac.W, fac.H
        div = lambda A, B: deviance.divergence(V, A @ B, cost)
        if cost.family is Family.NORMAL:
            step = lambda A, B: update_traditional_normal(A, B, V)
        elif cost.family is Family.POISSON:
            step = lambda A, B: update_traditional_poisson(A, B, V)
        elif cost.family is Family.TWEEDIE:
            step = lambda A, B: update_traditional_tweedie(A, B, V, cost.p)
        else:
            step = lambda A, B: update_traditional_negbin(A, B, V, cost.alpha)
    else:
        V = _convex_input(v.values)
        A, B = fac.E, fac.D
        terms, gamma = _convex_terms_for(cost, V.shape[0])
        div = lambda A, B: convex_divergence(V, A, B, cost)
        step = lambda A, B: _convex_update(A, B, V, terms, gamma)

    d_prev = div(A, B)
    trace = [d_prev]
    tol = config.tol
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        A, B = step(A, B)
        d = div(A, B)
        if not np.isfinite(d):
            raise NonFiniteUpdateError(f"divergence became {d} at iteration {it}")
        trace.append(d)
        if tol is None:
            tol = max(1e-6 * d, np.finfo(float).tiny)
        if abs(d_prev - d) < tol:
            converged = True
            break
        d_prev = d

    if variant is Variant.TRADITIONAL:
        return Factorization(variant, W=A, H=B, divergence_trace=trace, iterations=it,
                             converged=converged, seed=seed, cost=cost)
    return Factorization(variant, E=A, D=B, vte=np.asarray(V.T @ A), divergence_trace=trace,
                         iterations=it, converged=converged, seed=seed, cost=cost)


def fit(v, spec: ModelSpec, cost: CostModel, config: FitConfig = FitConfig()) -> Factorization:
    """Fit ``spec`` with resolved ``cost``; best of ``config.restarts`` seeds.

    Restart ``r`` uses seed ``config.seed + r``. The winner has the lowest
    final divergence (ties go to the lower seed). Results that hit
    ``max_iter`` are returned with ``converged=False``.
    """
    v = as_data_matrix(v)
    if spec.rank is None:
        raise ValueError("model spec has no rank")
    check_support(v, cost)
    best = None
    for r in range(config.restarts):
        f = _single_fit(v, spec.rank, spec.variant, cost, config, config.seed + r)
        log.debug("restart %d (seed %d): divergence %.6g after %d iterations",
                  r, f.seed, f.final_divergence, f.iterations)
        if best is None or f.final_divergence < best.final_divergence:
            best = f
    if not best.converged:
        log.warning("fit did not converge within %d iterations", config.max_iter)
    if not best.monotone:
        log.warning("divergence trace is not monotone for %s", spec)

    if best.variant is Variant.CONVEX:
        V = _convex_input(v.values)
        best.E, best.D = normalize_convex(best.E, best.D, V)
        best.vte = np.asarray(V.T @ best.E)
    else:
        best.W, best.H = normalize_traditional(best.W, best.H)
    best.normalized = True
    return best

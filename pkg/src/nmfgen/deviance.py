"""Unit deviances, matrix divergences and log-likelihoods.

Tweedie unit deviance ``d_p(x; mu)`` for ``p = 0`` or ``p >= 1``::

    d_p = 2 [ x^(2-p) / ((1-p)(2-p)) - x mu^(1-p) / (1-p) + mu^(2-p) / (2-p) ]

with the limits ``2 [x log(x/mu) - x + mu]`` at ``p = 1`` and
``2 [x/mu - log(x/mu) - 1]`` at ``p = 2``. ``0 log 0`` is taken as 0.

Densities are available for ``p in {0, 1, 2, 3}`` (closed forms) and for
``1 < p < 2`` (compound Poisson-Gamma), where the normalizer is summed as a
series (Dunn and Smyth 2005).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln, xlogy

from .model import CostModel, DataMatrix, Family

SERIES_RTOL = 1e-14
SERIES_MAX_TERMS = 100_000
_CHUNK = 32


class SupportError(ValueError):
    """An observation or mean lies outside the support of the family."""


class UnsupportedDensityError(ValueError):
    pass


class SeriesConvergenceError(ArithmeticError):
    pass


def _check_power(p: float) -> None:
    if not np.isfinite(p) or p < 0 or 0 < p < 1:
        raise ValueError(f"Tweedie power p={p} not in {{0}} U [1, inf)")


def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx) if idx.size else ()


def _as_dense(v) -> np.ndarray:
    if isinstance(v, DataMatrix):
        v = v.values
    if sp.issparse(v):
        return v.toarray()
    return np.asarray(v, dtype=float)


def _check_tweedie_support(x: np.ndarray, mu: np.ndarray, p: float) -> None:
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(mu))):
        raise SupportError("non-finite observation or mean")
    if p == 0:
        return
    if np.any(mu <= 0):
        raise SupportError(f"mean must be positive for p={p} (first at {_first_bad(np.broadcast_to(mu, np.broadcast(x, mu).shape) <= 0)})")
    if p < 2:
        bad = x < 0
        what = "x >= 0"
    else:
        bad = x <= 0
        what = "x > 0"
    if np.any(bad):
        raise SupportError(f"p={p} requires {what} (first violation at {_first_bad(np.broadcast_to(bad, np.broadcast(x, mu).shape))})")


def _unit_deviance(x: np.ndarray, mu: np.ndarray, p: float) -> np.ndarray:
    """Deviance without support checks; inputs already broadcast."""
    if p == 0:
        return (x - mu) ** 2
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        pos = x > 0
        xs = np.where(pos, x, 1.0)
        lr = _log_ratio(xs, mu)
        if p == 1:
            d = np.where(pos, 2.0 * (xs * lr - x + mu), 2.0 * mu)
        elif p == 2:
            d = 2.0 * (np.exp(lr) - lr - 1.0)
        else:
            # expm1 form keeps precision for p near 1 and 2; far from x == mu
            # there is no cancellation and the plain form avoids overflow
            t1 = xs * mu ** (1 - p) * np.expm1((1 - p) * lr) / (1 - p)
            t2 = mu ** (2 - p) * np.expm1((2 - p) * lr) / (2 - p)
            near = 2.0 * (t1 - t2)
            far = 2.0 * (xs ** (2 - p) / ((1 - p) * (2 - p)) - xs * mu ** (1 - p) / (1 - p)
                         + mu ** (2 - p) / (2 - p))
            big = np.abs(lr) * max(abs(1 - p), abs(2 - p)) > 700
            d = np.where(pos, np.where(big, far, near), 2.0 * mu ** (2 - p) / (2 - p))
    return np.maximum(d, 0.0)


def _log_ratio(x: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """``log(x / mu)``, falling back to a difference of logs if the ratio under- or overflows."""
    r = x / mu
    ok = (r > 0) & np.isfinite(r)
    return np.where(ok, np.log(np.where(ok, r, 1.0)), np.log(x) - np.log(mu))


def unit_deviance(x, mu, p: float):
    """Tweedie unit deviance ``d_p(x; mu)``; broadcasts over arrays."""
    _check_power(p)
    x_arr = np.asarray(x, dtype=float)
    mu_arr = np.asarray(mu, dtype=float)
    _check_tweedie_support(x_arr, mu_arr, p)
    x_arr, mu_arr = np.broadcast_arrays(x_arr, mu_arr)
    d = _unit_deviance(x_arr, mu_arr, p)
    return float(d) if d.ndim == 0 else d


def _shapes(v, vhat):
    x = _as_dense(v)
    mu = np.asarray(vhat, dtype=float)
    if x.shape != mu.shape:
        raise ValueError(f"shape mismatch: data {x.shape} vs fitted {mu.shape}")
    return x, mu


def tweedie_divergence(v, vhat, p: float) -> float:
    """Sum of unit deviances between data ``v`` and reconstruction ``vhat``."""
    x, mu = _shapes(v, vhat)
    _check_power(p)
    _check_tweedie_support(x, mu, p)
    return float(np.sum(_unit_deviance(x, mu, p)))


def _alpha_like(alpha, shape) -> np.ndarray:
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 1:
        if a.shape[0] != shape[0]:
            raise ValueError(f"per-row alpha has length {a.shape[0]}, expected {shape[0]}")
        a = a[:, None]
    if np.any(a <= 0) or not np.all(np.isfinite(a)):
        raise ValueError("alpha must be positive and finite")
    return a


def negbin_divergence(v, vhat, alpha) -> float:
    """NB divergence: sum of ``x log(x/mu) - (a+x) log((a+x)/(a+mu))``."""
    x, mu = _shapes(v, vhat)
    if np.any(mu <= 0):
        raise SupportError(f"fitted values must be positive (first at {_first_bad(mu <= 0)})")
    a = _alpha_like(alpha, x.shape)
    return float(np.sum(_negbin_terms(x, mu, a)))


def _negbin_terms(x, mu, a):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = xlogy(x, x / mu)
    t2 = (a + x) * np.log1p((x - mu) / (a + mu))
    return t1 - t2


def _check_counts(x: np.ndarray) -> None:
    if np.any(x < 0) or np.any(x != np.round(x)):
        bad = (x < 0) | (x != np.round(x))
        raise SupportError(f"count data required: non-negative integers (first violation at {_first_bad(bad)})")


def _log_rising(x: np.ndarray, a) -> np.ndarray:
    """``lgamma(x + a) - lgamma(a)`` for integer x."""
    if np.ndim(a) == 0 and x.size and x.max() <= 1_000_000:
        n = int(x.max())
        table = np.concatenate(([0.0], np.cumsum(np.log(a + np.arange(n)))))
        return table[x.astype(np.int64)]
    return gammaln(x + a) - gammaln(a)


def negbin_logpmf(x, mu, alpha) -> np.ndarray:
    """Entrywise NB log-pmf with mean ``mu`` and dispersion ``alpha``."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    _check_counts(x)
    a = alpha if np.ndim(alpha) == 0 else np.asarray(alpha, dtype=float)
    return (
        _log_rising(x, a)
        - gammaln(x + 1)
        + xlogy(x, mu) - xlogy(x, a + mu)
        - a * np.log1p(mu / a)
    )


def negbin_log_likelihood(v, vhat, alpha) -> float:
    x, mu = _shapes(v, vhat)
    if np.any(mu <= 0):
        raise SupportError(f"fitted values must be positive (first at {_first_bad(mu <= 0)})")
    a = _alpha_like(alpha, x.shape)
    if a.ndim == 0:
        a = float(a)
    return float(np.sum(negbin_logpmf(x, mu, a)))


# -- compound Poisson series -------------------------------------------------

def _log_w_terms(j, logz, a):
    return j * logz - gammaln(1.0 + j) - gammaln(-a * j)


def _log_series_w(x: np.ndarray, p: float, phi: float) -> np.ndarray:
    """``log W(x, phi, p)`` for x > 0, summed outward from the largest term."""
    a = (2.0 - p) / (1.0 - p)
    logz = -a * np.log(x) + a * np.log(p - 1.0) - (1.0 - a) * np.log(phi) - np.log(2.0 - p)
    jmax = x ** (2.0 - p) / ((2.0 - p) * phi)
    j0 = np.maximum(1.0, np.round(jmax))
    logw0 = _log_w_terms(j0, logz, a)
    total = np.ones_like(x)
    counts = np.ones_like(x)

    offsets = np.arange(1, _CHUNK + 1, dtype=float)
    for direction in (1.0, -1.0):
        active = np.ones(x.shape, dtype=bool)
        if direction < 0:
            active &= j0 > 1
        start = np.zeros_like(x)
        while np.any(active):
            idx = np.flatnonzero(active)
            js = j0[idx, None] + direction * (start[idx, None] + offsets)
            valid = js >= 1
            terms = np.where(
                valid,
                np.exp(_log_w_terms(np.maximum(js, 1.0), logz[idx, None], a) - logw0[idx, None]),
                0.0,
            )
            total[idx] += terms.sum(axis=1)
            counts[idx] += valid.sum(axis=1)
            start[idx] += _CHUNK
            last = terms[:, -1]
            done = (last < SERIES_RTOL * total[idx]) | ~valid[:, -1]
            active[idx[done]] = False
            if np.any(counts > SERIES_MAX_TERMS):
                raise SeriesConvergenceError(
                    f"compound Poisson series did not converge within {SERIES_MAX_TERMS} terms"
                )
    if not np.all(np.isfinite(total)):
        raise SeriesConvergenceError("compound Poisson series overflowed")
    return logw0 + np.log(total)


def _cp_log_density(x: np.ndarray, mu: np.ndarray, p: float, phi: float) -> np.ndarray:
    out = np.empty(np.broadcast(x, mu).shape)
    x, mu = np.broadcast_arrays(x, mu)
    zero = x == 0
    out[zero] = -mu[zero] ** (2.0 - p) / (phi * (2.0 - p))
    pos = ~zero
    if np.any(pos):
        xp, mp = x[pos], mu[pos]
        # W depends on x only, so evaluate once per distinct value
        ux, inv = np.unique(xp, return_inverse=True)
        logw = _log_series_w(ux, p, phi)[inv]
        theta = mp ** (1.0 - p) / (1.0 - p)
        kappa = mp ** (2.0 - p) / (2.0 - p)
        out[pos] = logw - np.log(xp) + (xp * theta - kappa) / phi
    return out


def tweedie_log_density(x, mu, p: float, sigma2: float):
    """Log density of ``Tw_p(mu, sigma2)`` at ``x``; broadcasts over arrays.

    At ``p = 1`` the density is the (scaled) Poisson pmf, so ``x / sigma2``
    must be a non-negative integer.
    """
    _check_power(p)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    if not (p in (0, 1, 2, 3) or 1 < p < 2):
        raise UnsupportedDensityError(f"no density evaluator for p={p}")
    x_arr = np.asarray(x, dtype=float)
    mu_arr = np.asarray(mu, dtype=float)
    _check_tweedie_support(x_arr, mu_arr, p)
    x_arr, mu_arr = np.broadcast_arrays(x_arr, mu_arr)
    if p == 0:
        out = -0.5 * np.log(2 * np.pi * sigma2) - (x_arr - mu_arr) ** 2 / (2 * sigma2)
    elif p == 1:
        y = x_arr / sigma2
        if np.any(np.abs(y - np.round(y)) > 1e-9 * np.maximum(1.0, y)):
            raise SupportError(f"p=1 requires x/sigma2 integer (first violation at {_first_bad(y != np.round(y))})")
        y = np.round(y)
        out = xlogy(y, mu_arr / sigma2) - mu_arr / sigma2 - gammaln(y + 1)
    elif p == 2:
        k = 1.0 / sigma2
        out = k * np.log(k) - gammaln(k) - np.log(x_arr) - _unit_deviance(x_arr, mu_arr, 2.0) / (2 * sigma2) - k
    elif p == 3:
        out = -0.5 * np.log(2 * np.pi * x_arr ** 3 * sigma2) - _unit_deviance(x_arr, mu_arr, 3.0) / (2 * sigma2)
    else:
        out = _cp_log_density(x_arr, mu_arr, p, sigma2)
    return float(out) if out.ndim == 0 else out


def poisson_log_likelihood(v, vhat) -> float:
    x, mu = _shapes(v, vhat)
    return float(np.sum(tweedie_log_density(x, mu, 1.0, 1.0)))


def log_likelihood(v, vhat, cost: CostModel) -> float:
    """Full log-likelihood (normalizers included) of ``v`` given means ``vhat``."""
    x, mu = _shapes(v, vhat)
    if cost.family is Family.NEGBIN:
        return negbin_log_likelihood(x, mu, cost.alpha)
    return float(np.sum(tweedie_log_density(x, mu, cost.p, cost.sigma2)))


def divergence(v, vhat, cost: CostModel) -> float:
    """The divergence minimized by the update rules for ``cost``."""
    if cost.family is Family.NEGBIN:
        return negbin_divergence(v, vhat, cost.alpha)
    return tweedie_divergence(v, vhat, cost.p)

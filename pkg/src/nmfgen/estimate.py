"""Estimation of family parameters: NB dispersion, Tweedie power and dispersion."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import polygamma, psi

from . import deviance
from .factorize import Factorization, FitConfig, fit
from .model import CostModel, DataMatrix, Family, ModelSpec, as_data_matrix, free_parameter_count

log = logging.getLogger(__name__)

ALPHA_MAX = 1e8
ALPHA_MIN = 1e-8
NEWTON_MAX_STEPS = 100


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProfileResult:
    grid: Tuple[float, ...]
    loglik: Tuple[float, ...]
    argmax: float
    argmax_loglik: float
    sigma2: Optional[Tuple[float, ...]] = None
    skipped: Tuple[Tuple[float, str], ...] = ()

    def to_rows(self) -> List[dict]:
        rows = []
        for i, (g, ll) in enumerate(zip(self.grid, self.loglik)):
            row = {"param": g, "loglik": ll}
            if self.sigma2 is not None:
                row["sigma2"] = self.sigma2[i]
            rows.append(row)
        return rows


def _profile(grid, loglik, sigma2=None, skipped=()) -> ProfileResult:
    if not grid:
        raise EstimationError("no admissible grid point could be evaluated")
    i = int(np.argmax(loglik))
    return ProfileResult(tuple(grid), tuple(loglik), grid[i], loglik[i],
                         tuple(sigma2) if sigma2 is not None else None, tuple(skipped))


def _counts(v, vhat):
    x = deviance._as_dense(v)
    mu = np.asarray(vhat, dtype=float)
    if x.shape != mu.shape:
        raise ValueError(f"shape mismatch: data {x.shape} vs fitted {mu.shape}")
    deviance._check_counts(x)
    if not np.any(x):
        raise EstimationError("cannot estimate dispersion from an all-zero matrix")
    if np.any(mu <= 0):
        raise deviance.SupportError("fitted values must be positive")
    return x.ravel(), mu.ravel()


class _AlphaScore:
    """Score and curvature of the NB log-likelihood in alpha, means held fixed."""

    def __init__(self, x, mu):
        self.x, self.mu = x, mu
        self.values, self.freq = np.unique(x.astype(np.int64), return_counts=True)
        self.use_table = self.values[-1] <= 1_000_000

    def _rising_sums(self, a):
        # sum_i [psi(x_i + a) - psi(a)] and sum_i [psi'(x_i + a) - psi'(a)]
        if self.use_table:
            j = a + np.arange(self.values[-1])
            s1 = np.concatenate(([0.0], np.cumsum(1.0 / j)))
            s2 = np.concatenate(([0.0], np.cumsum(1.0 / j ** 2)))
            return self.freq @ s1[self.values], -(self.freq @ s2[self.values])
        xv = self.values.astype(float)
        return (self.freq @ (psi(xv + a) - psi(a)),
                self.freq @ (polygamma(1, xv + a) - polygamma(1, a)))

    def __call__(self, a):
        x, mu = self.x, self.mu
        r1, r2 = self._rising_sums(a)
        score = r1 + np.sum((mu - x) / (a + mu) - np.log1p(mu / a))
        curv = r2 + np.sum(mu / (a * (a + mu)) + (x - mu) / (a + mu) ** 2)
        return score, curv


def _alpha_loglik(x, mu, a) -> float:
    return float(np.sum(deviance.negbin_logpmf(x, mu, a)))


def _golden_alpha(x, mu) -> float:
    res = minimize_scalar(lambda t: -_alpha_loglik(x, mu, np.exp(t)),
                          bounds=(np.log(ALPHA_MIN), np.log(ALPHA_MAX)),
                          method="bounded", options={"xatol": 1e-10})
    return float(np.exp(res.x))


def estimate_alpha(v, vhat) -> float:
    """NB dispersion MLE with the means fixed at ``vhat``.

    Newton-Raphson on ``log(alpha)`` from the method-of-moments start; the
    result is capped at ``ALPHA_MAX`` (Poisson-equivalent). Falls back to a
    bounded 1-D search if Newton fails to settle in 100 steps.
    """
    x, mu = _counts(v, vhat)
    score = _AlphaScore(x, mu)
    excess = np.sum((x - mu) ** 2 - mu)
    a0 = np.sum(mu ** 2) / excess if excess > 0 else ALPHA_MAX
    theta = float(np.log(np.clip(a0, ALPHA_MIN, ALPHA_MAX)))
    lo, hi = np.log(ALPHA_MIN), np.log(ALPHA_MAX)

    for _ in range(NEWTON_MAX_STEPS):
        a = np.exp(theta)
        s, c = score(a)
        g = a * s
        h = a * s + a * a * c
        if theta >= hi and g >= 0:
            return ALPHA_MAX
        if theta <= lo and g <= 0:
            return ALPHA_MIN
        step = -g / h if h < 0 else np.sign(g)
        step = float(np.clip(step, -2.0, 2.0))
        new = float(np.clip(theta + step, lo, hi))
        if abs(new - theta) < 1e-10:
            return float(np.exp(new))
        theta = new
    log.warning("Newton iteration for alpha did not converge; using bounded 1-D search")
    return _golden_alpha(x, mu)


def alpha_profile(v, vhat, grid: Sequence[float]) -> ProfileResult:
    grid = [float(g) for g in grid]
    if not grid:
        raise ValueError("empty alpha grid")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] <= 0:
        raise ValueError("alpha grid must be positive and increasing")
    x, mu = _counts(v, vhat)
    return _profile(grid, [_alpha_loglik(x, mu, a) for a in grid])


def pearson_dispersion(v, vhat, p: float, n_params: int = 0) -> float:
    """``sum((V - Vhat)^2 / Vhat^p) / (N*M - n_params)``; dense data only."""
    v = as_data_matrix(v)
    if v.sparsity > 0:
        raise ValueError("Pearson dispersion is not defined for sparse data (zeros present)")
    x, mu = deviance._shapes(v, vhat)
    if np.any(mu <= 0):
        raise deviance.SupportError("fitted values must be positive")
    dof = x.size - n_params
    if dof <= 0:
        raise ValueError(f"non-positive residual degrees of freedom ({dof})")
    s2 = float(np.sum((x - mu) ** 2 / mu ** p) / dof)
    if s2 == 0:
        log.warning("zero Pearson dispersion: the fit reproduces the data exactly")
    return s2


def profile_sigma2(v, vhat, p: float) -> float:
    """Dispersion maximizing the Tweedie log-likelihood at power ``p``."""
    x, mu = deviance._shapes(v, vhat)
    if p == 1:
        return 1.0
    if p == 0:
        return float(np.mean((x - mu) ** 2))
    s0 = max(float(np.mean((x - mu) ** 2 / mu ** p)), 1e-12)
    obj = lambda t: -float(np.sum(deviance.tweedie_log_density(x, mu, p, np.exp(t))))
    res = minimize_scalar(obj, bounds=(np.log(s0) - 8, np.log(s0) + 8), method="bounded",
                          options={"xatol": 1e-8})
    return float(np.exp(res.x))


def fit_sigma2(v: DataMatrix, vhat, p: float, spec: ModelSpec) -> float:
    """Pearson dispersion on dense data, profile likelihood on sparse data."""
    if p == 1:
        return 1.0
    if v.sparsity == 0:
        return pearson_dispersion(v, vhat, p, free_parameter_count(spec, *v.shape))
    return profile_sigma2(v, vhat, p)


def power_grid(sparse: bool, step: float = 0.05, upper: float = 2.0) -> List[float]:
    n = int(round((upper - 1.0) / step))
    grid = [0.0] + [round(1.0 + i * step, 10) for i in range(n + 1)]
    if sparse:
        grid = [g for g in grid if g < upper]
    return grid


@dataclass
class _PowerRun:
    profile: ProfileResult
    fits: Dict[float, Factorization] = field(default_factory=dict)


def _power_profile(v: DataMatrix, spec: ModelSpec, config: FitConfig, grid) -> _PowerRun:
    ok_grid, lls, s2s, skipped, fits = [], [], [], [], {}
    for p in grid:
        try:
            fac = fit(v, spec.with_param(p), CostModel.tweedie(p), config)
            vhat = fac.fitted_values
            s2 = fit_sigma2(v, vhat, p, spec)
            ll = float(np.sum(deviance.tweedie_log_density(v.dense(), vhat, p, s2)))
        except (ValueError, ArithmeticError) as exc:
            log.info("power grid point p=%g skipped: %s", p, exc)
            skipped.append((p, str(exc)))
            continue
        if not np.isfinite(ll):
            skipped.append((p, f"log-likelihood {ll}"))
            continue
        ok_grid.append(p)
        lls.append(ll)
        s2s.append(s2)
        fits[p] = fac
    return _PowerRun(_profile(ok_grid, lls, s2s, skipped), fits)


def estimate_power(v, spec: ModelSpec, config: FitConfig = FitConfig(), step: float = 0.05,
                   refine: bool = False) -> Tuple[float, float, ProfileResult]:
    """Tweedie power by profile log-likelihood over ``{0} U [1, 2]``.

    The upper end 2 is dropped when the data contain zeros. With
    ``refine=True`` a second pass at step 0.01 brackets the coarse optimum.
    """
    run = _estimate_power_run(as_data_matrix(v), spec, config, step, refine)
    prof = run.profile
    return prof.argmax, prof.sigma2[prof.grid.index(prof.argmax)], prof


def _estimate_power_run(v: DataMatrix, spec: ModelSpec, config: FitConfig, step=0.05,
                        refine=False) -> _PowerRun:
    if spec.family is not Family.TWEEDIE:
        raise ValueError("estimate_power needs a Tweedie model spec")
    sparse = v.sparsity > 0
    run = _power_profile(v, spec, config, power_grid(sparse, step))
    best = run.profile.argmax
    if refine and best >= 1:
        fine = [round(best + d, 10) for d in np.arange(-step + 0.01, step - 0.005, 0.01)]
        fine = [p for p in fine if p >= 1 and (p < 2 if sparse else p <= 2) and p not in run.fits]
        extra = _power_profile(v, spec, config, fine) if fine else None
        if extra is not None and extra.profile.grid:
            merged = sorted(
                list(zip(run.profile.grid, run.profile.loglik, run.profile.sigma2))
                + list(zip(extra.profile.grid, extra.profile.loglik, extra.profile.sigma2))
            )
            g, ll, s2 = (list(t) for t in zip(*merged))
            run = _PowerRun(_profile(g, ll, s2, run.profile.skipped + extra.profile.skipped),
                            {**run.fits, **extra.fits})
    return run


@dataclass
class ResolvedFit:
    """Final fit with its cost, the spec carrying fitted parameters, and any profile.

    ``timings`` holds wall seconds spent estimating family parameters and in
    the final fit. A Tweedie power profile reuses its grid fit, so its final
    fit costs nothing extra.
    """

    fit: Factorization
    cost: CostModel
    spec: ModelSpec
    profile: Optional[ProfileResult] = None
    prefit: Optional[Factorization] = None
    timings: Dict[str, float] = field(default_factory=dict)


def fit_model(v, spec: ModelSpec, config: FitConfig = FitConfig()) -> ResolvedFit:
    """Resolve missing parameters, then fit; reuses intermediate fits where possible."""
    v = as_data_matrix(v)
    fam = spec.family
    clock = time.perf_counter
    t0 = clock()
    if fam is Family.POISSON:
        fac = fit(v, spec, CostModel.poisson(), config)
        return ResolvedFit(fac, CostModel.poisson(), spec, timings={"estimate": 0.0, "fit": clock() - t0})
    if fam is Family.NORMAL:
        fac = fit(v, spec, CostModel.normal(), config)
        t1 = clock()
        s2 = fit_sigma2(v, fac.fitted_values, 0.0, spec)
        return ResolvedFit(fac, CostModel.normal(s2), spec,
                           timings={"estimate": clock() - t1, "fit": t1 - t0})
    if fam is Family.NEGBIN:
        if spec.family_param is not None:
            cost = CostModel.negbin(spec.family_param)
            fac = fit(v, spec, cost, config)
            return ResolvedFit(fac, cost, spec, timings={"estimate": 0.0, "fit": clock() - t0})
        pre_spec = ModelSpec(spec.variant, Family.POISSON, None, spec.rank)
        pre = fit(v, pre_spec, CostModel.poisson(), config)
        alpha = estimate_alpha(v, pre.fitted_values)
        cost = CostModel.negbin(alpha)
        t1 = clock()
        fac = fit(v, spec, cost, config)
        return ResolvedFit(fac, cost, spec.with_param(alpha), prefit=pre,
                           timings={"estimate": t1 - t0, "fit": clock() - t1})
    # Tweedie
    if spec.family_param is not None:
        p = spec.family_param
        fac = fit(v, spec, CostModel.tweedie(p), config)
        t1 = clock()
        try:
            s2 = fit_sigma2(v, fac.fitted_values, p, spec)
        except (ValueError, ArithmeticError) as exc:
            log.warning("dispersion for p=%g not estimated (%s); using 1", p, exc)
            s2 = 1.0
        return ResolvedFit(fac, CostModel.tweedie(p, s2), spec,
                           timings={"estimate": clock() - t1, "fit": t1 - t0})
    run = _estimate_power_run(v, spec, config)
    p = run.profile.argmax
    s2 = run.profile.sigma2[run.profile.grid.index(p)]
    return ResolvedFit(run.fits[p], CostModel.tweedie(p, s2), spec.with_param(p), run.profile,
                       timings={"estimate": clock() - t0, "fit": 0.0})


def resolve_cost(v, spec: ModelSpec, config: FitConfig = FitConfig()) -> CostModel:
    """Fill in parameters the spec leaves open.

    NB: Poisson pre-fit of the same variant, then :func:`estimate_alpha`.
    Tweedie: :func:`estimate_power`. Normal: variance from a fit. Poisson:
    ``(p, sigma2) = (1, 1)``. An explicit NB dispersion passes through
    without any fitting.
    """
    if spec.family is Family.POISSON:
        return CostModel.poisson()
    if spec.family is Family.NEGBIN and spec.family_param is not None:
        return CostModel.negbin(spec.family_param)
    return fit_model(v, spec, config).cost

"""Goodness-of-fit and factor-comparison diagnostics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import deviance
from .factorize import Factorization
from .model import CostModel, Family, ModelSpec, as_data_matrix, format_model_spec, free_parameter_count


def model_variance(cost: CostModel, mean) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    if cost.family is Family.NORMAL:
        return np.full_like(mean, cost.sigma2)
    if cost.family is Family.POISSON:
        return mean.copy()
    if cost.family is Family.TWEEDIE:
        return cost.sigma2 * mean ** cost.p
    a = np.asarray(cost.alpha, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    return mean * (1.0 + mean / a)


@dataclass
class ResidualTable:
    fitted: np.ndarray
    residual: np.ndarray
    band: np.ndarray
    model: CostModel
    downsample_seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.fitted)

    @property
    def coverage(self) -> float:
        """Fraction of residuals within the two-SD band."""
        return float(np.mean(np.abs(self.residual) <= self.band))

    def to_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fitted", "residual", "band"])
        for row in zip(self.fitted, self.residual, self.band):
            w.writerow([repr(float(x)) for x in row])


def residual_table(v, fit: Factorization, cost: CostModel, max_rows: Optional[int] = None,
                   seed: int = 0) -> ResidualTable:
    """Raw residuals ``V - Vhat`` with model two-SD bands at each fitted value.

    With ``max_rows`` set and exceeded, cells are sampled uniformly without
    replacement using ``seed``.
    """
    x = deviance._as_dense(v)
    vhat = fit.fitted_values
    if x.shape != vhat.shape:
        raise ValueError(f"shape mismatch: data {x.shape} vs fitted {vhat.shape}")
    band = 2.0 * np.sqrt(model_variance(cost, vhat))
    fitted, resid, band = vhat.ravel(), (x - vhat).ravel(), np.broadcast_to(band, vhat.shape).ravel()
    used_seed = None
    if max_rows is not None and fitted.size > max_rows:
        idx = np.sort(np.random.default_rng(seed).choice(fitted.size, max_rows, replace=False))
        fitted, resid, band = fitted[idx], resid[idx], band[idx]
        used_seed = seed
    return ResidualTable(fitted.copy(), resid.copy(), band.copy(), cost, used_seed)


def bic(v, fit: Factorization, cost: CostModel, spec: ModelSpec) -> float:
    """``n_params * ln(N*M) - 2 * loglik`` with one observation per cell."""
    v = as_data_matrix(v)
    n, m = v.shape
    ll = deviance.log_likelihood(v, fit.fitted_values, cost)
    return free_parameter_count(spec, n, m) * np.log(n * m) - 2.0 * ll


def meanvar_curve(cost: CostModel, mean_grid: Sequence[float]) -> List[Tuple[float, float]]:
    g = np.asarray(mean_grid, dtype=float)
    if np.any(g <= 0) or np.any(np.diff(g) <= 0):
        raise ValueError("mean grid must be positive and increasing")
    if cost.family is Family.NEGBIN and np.ndim(cost.alpha) != 0:
        raise ValueError("mean-variance curve needs a scalar alpha")
    return list(zip(g.tolist(), model_variance(cost, g).tolist()))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine similarity of a zero vector is undefined")
    return np.clip((A @ B.T) / np.outer(na, nb), -1.0, 1.0)


@dataclass
class Matching:
    pairs: List[Tuple[int, Optional[int], float]]

    @property
    def similarities(self) -> np.ndarray:
        return np.array([s for _, _, s in self.pairs])

    @property
    def total(self) -> float:
        return float(self.similarities.sum())

    @property
    def mean(self) -> float:
        return float(self.similarities.mean())

    @property
    def min(self) -> float:
        return float(self.similarities.min())


def match_features(A, B) -> Matching:
    """One-to-one matching of rows of A to rows of B maximizing total cosine similarity.

    Rows of A left over when A has more rows than B are paired with ``None``
    at similarity 0.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise ValueError(f"feature matrices must share their column dimension: {A.shape} vs {B.shape}")
    S = cosine_matrix(A, B)
    rows, cols = linear_sum_assignment(S, maximize=True)
    assigned = dict(zip(rows.tolist(), cols.tolist()))
    pairs = []
    for i in range(A.shape[0]):
        j = assigned.get(i)
        pairs.append((i, j, float(S[i, j]) if j is not None else 0.0))
    return Matching(pairs)


def top_entries(features, labels: Sequence[str], topk: int) -> List[List[Tuple[str, float]]]:
    """Largest ``topk`` entries per feature row after normalizing each row to sum 1.

    Ties keep column order.
    """
    F = np.asarray(features, dtype=float)
    if len(labels) != F.shape[1]:
        raise ValueError(f"{len(labels)} labels for {F.shape[1]} columns")
    if not 1 <= topk <= F.shape[1]:
        raise ValueError("topk must be between 1 and the number of columns")
    out = []
    for row in F:
        total = row.sum()
        w = row / total if total > 0 else row
        order = np.argsort(-w, kind="stable")[:topk]
        out.append([(labels[j], float(w[j])) for j in order])
    return out


@dataclass
class FitReport:
    spec: str
    loglik: Optional[float]
    n_params: int
    bic: Optional[float]
    coverage_2sd: Optional[float]
    meanvar_curve: List[Tuple[float, float]] = field(default_factory=list)
    cost: dict = field(default_factory=dict)
    divergence: Optional[float] = None
    error: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["meanvar_curve"] = [list(t) for t in self.meanvar_curve]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def default_mean_grid(vhat, points: int = 50) -> np.ndarray:
    vhat = np.asarray(vhat)
    lo = max(float(vhat.min()), 1e-3)
    hi = max(float(vhat.max()), lo * 10)
    return np.geomspace(lo, hi, points)


def fit_report(v, fit: Factorization, cost: CostModel, spec: ModelSpec,
               mean_grid: Optional[Sequence[float]] = None) -> FitReport:
    """Assemble log-likelihood, BIC, band coverage and the mean-variance curve.

    A family whose density cannot be evaluated at the fitted power leaves
    ``loglik`` and ``bic`` as ``None`` with the reason in ``error``.
    """
    v = as_data_matrix(v)
    n, m = v.shape
    n_params = free_parameter_count(spec, n, m)
    err = None
    try:
        ll = deviance.log_likelihood(v, fit.fitted_values, cost)
        b = n_params * np.log(n * m) - 2.0 * ll
    except (ValueError, ArithmeticError) as exc:
        ll = b = None
        err = str(exc)
    table = residual_table(v, fit, cost)
    grid = default_mean_grid(fit.fitted_values) if mean_grid is None else mean_grid
    curve = meanvar_curve(cost, grid) if np.ndim(cost.alpha) == 0 else []
    return FitReport(format_model_spec(spec), ll, n_params, b, table.coverage, curve,
                     cost.to_dict(), fit.final_divergence, err)


def meanvar_csv(curve: Sequence[Tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mean", "variance"])
    for mean, var in curve:
        w.writerow([repr(float(mean)), repr(float(var))])
    return buf.getvalue()

"""Model descriptors, the ``NMF/<variant>/<family>/<rank>`` grammar and parameter counts.

Grammar (ASCII)::

    NMF/<T|C>/<N|Po|TW[_<p>]|NB[_<alpha>]>[/<K>]

``T`` is traditional NMF (V ~ WH), ``C`` is convex NMF (V^T ~ V^T E D).
Omitting the family parameter of ``TW``/``NB`` means "estimate from data";
omitting the rank leaves it unspecified.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp


class Variant(enum.Enum):
    TRADITIONAL = "T"
    CONVEX = "C"


class Family(enum.Enum):
    NORMAL = "N"
    POISSON = "Po"
    TWEEDIE = "TW"
    NEGBIN = "NB"


class ModelSpecError(ValueError):
    """Base class for model-spec parse errors."""


class MalformedSpecError(ModelSpecError):
    pass


class ForbiddenPowerError(ModelSpecError):
    """Tweedie power inside (0, 1), where the distribution does not exist."""


class NegativePowerError(ModelSpecError):
    pass


class NonPositiveAlphaError(ModelSpecError):
    pass


class NonPositiveRankError(ModelSpecError):
    pass


def _check_power(p: float) -> None:
    if not np.isfinite(p):
        raise MalformedSpecError(f"non-finite Tweedie power {p!r}")
    if p < 0:
        raise NegativePowerError(f"Tweedie power p={p} < 0 is not supported")
    if 0 < p < 1:
        raise ForbiddenPowerError(f"Tweedie power p={p} lies in (0, 1)")


def _check_alpha(alpha: float) -> None:
    if not np.isfinite(alpha):
        raise MalformedSpecError(f"non-finite dispersion {alpha!r}")
    if alpha <= 0:
        raise NonPositiveAlphaError(f"dispersion alpha={alpha} must be > 0")


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    family: Family
    family_param: Optional[float] = None
    rank: Optional[int] = None

    def __post_init__(self):
        if self.rank is not None and self.rank < 1:
            raise NonPositiveRankError(f"rank K={self.rank} must be >= 1")
        if self.family_param is None:
            return
        if self.family in (Family.NORMAL, Family.POISSON):
            raise MalformedSpecError(f"{self.family.value} takes no parameter")
        if self.family is Family.TWEEDIE:
            _check_power(self.family_param)
        else:
            _check_alpha(self.family_param)

    @property
    def needs_estimate(self) -> bool:
        return self.family in (Family.TWEEDIE, Family.NEGBIN) and self.family_param is None

    def with_param(self, value: Optional[float]) -> "ModelSpec":
        return ModelSpec(self.variant, self.family, value, self.rank)

    def with_rank(self, rank: Optional[int]) -> "ModelSpec":
        return ModelSpec(self.variant, self.family, self.family_param, rank)

    def __str__(self) -> str:
        return format_model_spec(self)


@dataclass(frozen=True)
class CostModel:
    """A distribution family with its parameters resolved.

    ``alpha`` may be a per-row vector (one dispersion per observation); it is
    accepted by the update rules and likelihoods but never estimated.
    """

    family: Family
    p: float = 0.0
    sigma2: float = 1.0
    alpha: Optional[Union[float, np.ndarray]] = None

    def __post_init__(self):
        if self.family is Family.NORMAL and self.p != 0:
            raise ValueError("Normal cost requires p = 0")
        if self.family is Family.POISSON and (self.p != 1 or self.sigma2 != 1):
            raise ValueError("Poisson cost requires p = 1 and sigma2 = 1")
        if 0 < self.p < 1 or self.p < 0:
            raise ValueError(f"Tweedie power p={self.p} not in {{0}} U [1, inf)")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2={self.sigma2} must be positive")
        if self.family is Family.NEGBIN:
            if self.alpha is None or np.any(np.asarray(self.alpha) <= 0):
                raise ValueError("NegBin cost requires alpha > 0")

    @classmethod
    def normal(cls, sigma2: float = 1.0) -> "CostModel":
        return cls(Family.NORMAL, 0.0, sigma2)

    @classmethod
    def poisson(cls) -> "CostModel":
        return cls(Family.POISSON, 1.0, 1.0)

    @classmethod
    def tweedie(cls, p: float, sigma2: float = 1.0) -> "CostModel":
        return cls(Family.TWEEDIE, float(p), sigma2)

    @classmethod
    def negbin(cls, alpha) -> "CostModel":
        return cls(Family.NEGBIN, 1.0, 1.0, alpha)

    @property
    def family_param(self) -> Optional[float]:
        if self.family is Family.TWEEDIE:
            return self.p
        if self.family is Family.NEGBIN and np.ndim(self.alpha) == 0:
            return float(self.alpha)
        return None

    def to_dict(self) -> dict:
        alpha = self.alpha
        if alpha is not None:
            alpha = float(alpha) if np.ndim(alpha) == 0 else np.asarray(alpha).tolist()
        return {"family": self.family.value, "p": self.p, "sigma2": self.sigma2, "alpha": alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        alpha = d.get("alpha")
        if isinstance(alpha, list):
            alpha = np.asarray(alpha, dtype=float)
        return cls(Family(d["family"]), float(d["p"]), float(d["sigma2"]), alpha)


class Storage(enum.Enum):
    DENSE = "dense"
    SPARSE_COORDINATE = "coord"


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """Non-negative N x M observation matrix (rows: observations, columns: classes)."""

    values: Union[np.ndarray, sp.csc_matrix]
    storage: Storage = Storage.DENSE
    row_labels: Optional[Sequence[str]] = None
    col_labels: Optional[Sequence[str]] = None

    def __post_init__(self):
        vals = self.values
        if sp.issparse(vals):
            vals = sp.csc_matrix(vals, dtype=float)
            vals.sum_duplicates()
            data = vals.data
        else:
            vals = np.array(vals, dtype=float)
            if vals.ndim != 2:
                raise ValueError(f"data matrix must be 2-D, got shape {vals.shape}")
            data = vals
        if vals.shape[0] == 0 or vals.shape[1] == 0:
            raise ValueError("empty data matrix")
        if not np.all(np.isfinite(data)):
            raise ValueError("data matrix contains non-finite entries")
        if np.any(data < 0):
            idx = np.argwhere(vals < 0)[0] if not sp.issparse(vals) else None
            raise ValueError(f"data matrix has negative entries (first at {idx})")
        object.__setattr__(self, "values", vals)
        if self.row_labels is not None and len(self.row_labels) != vals.shape[0]:
            raise ValueError("row label count does not match the number of rows")
        if self.col_labels is not None and len(self.col_labels) != vals.shape[1]:
            raise ValueError("column label count does not match the number of columns")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.values)

    @property
    def sparsity(self) -> float:
        n, m = self.shape
        if self.is_sparse:
            nonzero = np.count_nonzero(self.values.data)
        else:
            nonzero = np.count_nonzero(self.values)
        return (n * m - nonzero) / (n * m)

    def dense(self) -> np.ndarray:
        return self.values.toarray() if self.is_sparse else self.values

    def is_integer(self) -> bool:
        data = self.values.data if self.is_sparse else self.values
        return bool(np.all(data == np.round(data)))


def as_data_matrix(v) -> DataMatrix:
    return v if isinstance(v, DataMatrix) else DataMatrix(v, Storage.SPARSE_COORDINATE if sp.issparse(v) else Storage.DENSE)


_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_SPEC_RE = re.compile(
    rf"^NMF/(?P<variant>[^/]+)/(?P<family>N|Po|TW|NB)(?:_(?P<param>{_NUMBER}))?"
    rf"(?:/(?P<rank>[-+]?\d+))?$"
)


def parse_model_spec(text: str) -> ModelSpec:
    """Parse e.g. ``"NMF/T/TW_2/3"`` into a :class:`ModelSpec`."""
    m = _SPEC_RE.match(text.strip())
    if m is None:
        raise MalformedSpecError(f"cannot parse model spec {text!r}")
    try:
        variant = Variant(m["variant"])
    except ValueError:
        raise MalformedSpecError(f"unknown NMF variant {m['variant']!r} (expected T or C)") from None
    family = Family(m["family"])
    param = float(m["param"]) if m["param"] is not None else None
    if param is not None and family in (Family.NORMAL, Family.POISSON):
        raise MalformedSpecError(f"{family.value} takes no parameter in {text!r}")
    rank = int(m["rank"]) if m["rank"] is not None else None
    return ModelSpec(variant, family, param, rank)


def _fmt_number(x: float) -> str:
    s = repr(float(x))
    return s[:-2] if s.endswith(".0") else s


def format_model_spec(spec: ModelSpec) -> str:
    parts = ["NMF", spec.variant.value, spec.family.value]
    if spec.family_param is not None:
        parts[-1] += "_" + _fmt_number(spec.family_param)
    if spec.rank is not None:
        parts.append(str(spec.rank))
    return "/".join(parts)


def free_parameter_count(spec: ModelSpec, n: int, m: int) -> int:
    """Free parameters used in BIC.

    Traditional: ``N*K + M*(K-1)``; convex: ``N*K + N*(K-1)``; one more for
    an estimated Tweedie power or NB dispersion. The Normal variance is not
    counted.
    """
    if spec.rank is None:
        raise ValueError("free_parameter_count needs a spec with a rank")
    k = spec.rank
    if spec.variant is Variant.TRADITIONAL:
        q = n * k + m * (k - 1)
    else:
        q = n * k + n * (k - 1)
    if spec.family in (Family.TWEEDIE, Family.NEGBIN):
        q += 1
    return q

"""Finite-support populations for treatment-effect efficiency analysis.

A population (`Dgp`) couples a finite covariate support, a treatment set
with a target subpopulation, per-(treatment, point) outcome laws, and a
propensity model. Everything downstream (moment solutions, influence
functions, variance bounds) is an exact finite sum over this object, so
results carry no simulation error and tests can pin tolerances near
machine precision.

Index conventions: treatments are labeled 0..J; support points are
reported 1-based in records and documents (matching the published JSON
schema) while internal arrays are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import StructuralError, ValidationError

# Input probabilities must be exact up to accumulation error; evaluated
# model probabilities get a looser gate because they pass through solves.
INPUT_PROB_TOL = 1e-12
EVAL_PROB_TOL = 1e-10
DEFAULT_P_MIN = 1e-3


@dataclass(frozen=True, eq=False)
class TreatmentSet:
    """Treatment labels 0..J plus the subpopulation the moments condition on.

    Parameters
    ----------
    count_j : int
        J, the largest treatment label. The set has J + 1 treatments.
    subpopulation : frozenset[int]
        Nonempty subset S of {0..J}. Moment conditions hold on {T in S}.
    """

    count_j: int
    subpopulation: frozenset[int]

    def __post_init__(self):
        if not isinstance(self.count_j, (int, np.integer)) or self.count_j < 1:
            raise StructuralError("treatment count J must be an integer >= 1")
        sub = frozenset(int(t) for t in self.subpopulation)
        object.__setattr__(self, "subpopulation", sub)
        if not sub:
            raise StructuralError("subpopulation must be nonempty")
        if not sub <= set(range(self.count_j + 1)):
            raise StructuralError(
                f"subpopulation {sorted(sub)} not contained in 0..{self.count_j}"
            )

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(range(self.count_j + 1))

    @property
    def is_proper_subpopulation(self) -> bool:
        """True when S is a strict subset of the treatment labels."""
        return len(self.subpopulation) < self.count_j + 1

    def subpop_mask(self) -> np.ndarray:
        mask = np.zeros(self.count_j + 1, dtype=bool)
        mask[list(self.subpopulation)] = True
        return mask


@dataclass(frozen=True, eq=False)
class DiscreteSupport:
    """Finite covariate support with point masses.

    `embeddings` optionally attaches numeric coordinates to the points;
    basis dictionaries for propensity models are materialized from them
    (or supplied directly as value matrices).
    """

    labels: tuple[str, ...]
    probs: np.ndarray
    embeddings: np.ndarray | None = None

    def __post_init__(self):
        labels = tuple(str(v) for v in self.labels)
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.shape[0] != len(labels):
            raise StructuralError("support probs must be a vector matching labels")
        if probs.shape[0] == 0:
            raise StructuralError("support must contain at least one point")
        if np.any(probs <= 0):
            raise StructuralError("support probabilities must be strictly positive")
        if abs(probs.sum() - 1.0) > INPUT_PROB_TOL:
            raise StructuralError(
                f"support probabilities sum to {probs.sum()!r}, not 1"
            )
        probs.setflags(write=False)
        if self.embeddings is not None:
            emb = np.asarray(self.embeddings, dtype=float)
            if emb.ndim == 1:
                emb = emb[:, None]
            if emb.shape[0] != len(labels):
                raise StructuralError("embeddings must have one row per point")
            emb.setflags(write=False)
            object.__setattr__(self, "embeddings", emb)

    @property
    def size(self) -> int:
        return len(self.labels)


class OutcomeLaw:
    """Interface for per-(treatment, point) conditional outcome laws."""

    has_density = False

    def mean(self) -> float:
        raise NotImplementedError

    def variance(self) -> float:
        raise NotImplementedError

    def cdf(self, v: float) -> float:
        raise NotImplementedError

    def pdf(self, v: float) -> float:
        raise NotImplementedError

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF transform of uniforms in (0,1), used for sampling."""
        raise NotImplementedError


@dataclass(frozen=True)
class Gaussian(OutcomeLaw):
    loc: float
    scale: float

    has_density = True

    def __post_init__(self):
        if not np.isfinite(self.loc) or not np.isfinite(self.scale):
            raise StructuralError("gaussian parameters must be finite")
        if self.scale <= 0:
            raise StructuralError("gaussian scale must be positive")

    def mean(self) -> float:
        return self.loc

    def variance(self) -> float:
        return self.scale**2

    def cdf(self, v):
        return ndtr((v - self.loc) / self.scale)

    def pdf(self, v):
        z = (v - self.loc) / self.scale
        return np.exp(-0.5 * z * z) / (self.scale * np.sqrt(2.0 * np.pi))

    def from_uniform(self, u):
        return self.loc + self.scale * ndtri(u)


@dataclass(frozen=True, eq=False)
class DiscreteOutcome(OutcomeLaw):
    """Finitely supported outcome law (always has finite variance)."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        probs = np.asarray(self.probs, dtype=float)
        if values.ndim != 1 or values.shape != probs.shape or values.size == 0:
            raise StructuralError("discrete outcome needs matching value/prob vectors")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > INPUT_PROB_TOL:
            raise StructuralError("discrete outcome probabilities must sum to 1")
        order = np.argsort(values, kind="stable")
        values = values[order]
        probs = probs[order]
        values.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "probs", probs)

    def mean(self) -> float:
        return float(self.values @ self.probs)

    def variance(self) -> float:
        mu = self.mean()
        return float(((self.values - mu) ** 2) @ self.probs)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        idx = np.searchsorted(self.values, v, side="right")
        cum = np.concatenate([[0.0], np.cumsum(self.probs)])
        out = cum[idx]
        return out if out.ndim else float(out)

    def from_uniform(self, u):
        cum = np.cumsum(self.probs)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, u, side="left")
        return self.values[np.minimum(idx, len(self.values) - 1)]


@dataclass(frozen=True)
class ObservationRecord:
    """One observed draw: outcome, realized treatment, 1-based support index."""

    y: float
    t: int
    x: int

    def __post_init__(self):
        if self.t < 0:
            raise StructuralError("treatment label must be nonnegative")
        if self.x < 1:
            raise StructuralError("support index is 1-based and must be >= 1")


@dataclass(frozen=True, eq=False)
class Dgp:
    """Complete finite-support population.

    `outcome_table[t][m]` is the law of the outcome under treatment t at
    support point m (0-based). The propensity model must evaluate on the
    same support and treatment set.
    """

    treatments: TreatmentSet
    support: DiscreteSupport
    outcome_table: tuple[tuple[OutcomeLaw, ...], ...]
    propensity: "object"

    def __post_init__(self):
        n_t = self.treatments.count_j + 1
        table = tuple(tuple(row) for row in self.outcome_table)
        object.__setattr__(self, "outcome_table", table)
        if len(table) != n_t:
            raise StructuralError(
                f"outcome table has {len(table)} treatment rows, expected {n_t}"
            )
        for t, row in enumerate(table):
            if len(row) != self.support.size:
                raise StructuralError(
                    f"outcome table row for treatment {t} has {len(row)} entries, "
                    f"expected {self.support.size}"
                )
            for law in row:
                if not isinstance(law, OutcomeLaw):
                    raise StructuralError("outcome table entries must be OutcomeLaw")
        if getattr(self.propensity, "n_treatments", None) != self.treatments.count_j:
            raise StructuralError(
                "propensity model treatment count does not match the treatment set"
            )
        if getattr(self.propensity, "n_points", None) != self.support.size:
            raise StructuralError(
                "propensity model support size does not match the support"
            )

    @property
    def n_treatments(self) -> int:
        return self.treatments.count_j + 1

    @property
    def n_points(self) -> int:
        return self.support.size

    def outcome(self, t: int, m: int) -> OutcomeLaw:
        return self.outcome_table[t][m]

    def prob_matrix(self) -> np.ndarray:
        """(M, J+1) matrix of propensity values at every support point."""
        return self.propensity.prob_matrix()


@dataclass(frozen=True)
class PointCheck:
    """Per-point overlap diagnostics inside a ValidationReport."""

    index: int  # 1-based support position
    label: str
    min_prob: float
    prob_sum: float
    passes: bool


@dataclass(frozen=True)
class ValidationReport:
    p_min: float
    p_s_star: float
    points: tuple[PointCheck, ...]
    overall_pass: bool
    messages: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "p_min": self.p_min,
            "p_s_star": self.p_s_star,
            "overall_pass": self.overall_pass,
            "points": [
                {
                    "index": pc.index,
                    "label": pc.label,
                    "min_prob": pc.min_prob,
                    "prob_sum": pc.prob_sum,
                    "passes": pc.passes,
                }
                for pc in self.points
            ],
            "messages": list(self.messages),
        }


def validate_dgp(dgp: Dgp, p_min: float = DEFAULT_P_MIN) -> ValidationReport:
    """Check overlap and evaluated-probability coherence for a population.

    Every support point must have min_j p_j(x) >= p_min and evaluated
    probabilities summing to 1 within EVAL_PROB_TOL. The report carries
    per-point results; `overall_pass` is their conjunction together with
    positivity of the subpopulation mass p_S*.
    """
    if not (0 < p_min < 1):
        raise ValidationError(f"p_min must lie in (0,1), got {p_min}")
    probs = np.asarray(dgp.prob_matrix(), dtype=float)
    mask = dgp.treatments.subpop_mask()
    p_s_x = probs[:, mask].sum(axis=1)
    p_s_star = float(dgp.support.probs @ p_s_x)

    points = []
    messages = []
    for m in range(dgp.n_points):
        row = probs[m]
        min_prob = float(row.min())
        prob_sum = float(row.sum())
        ok = min_prob >= p_min and abs(prob_sum - 1.0) <= EVAL_PROB_TOL
        if min_prob < p_min:
            messages.append(
                f"support point {m + 1} ({dgp.support.labels[m]}): "
                f"min propensity {min_prob:.6g} below p_min={p_min:.6g}"
            )
        if abs(prob_sum - 1.0) > EVAL_PROB_TOL:
            messages.append(
                f"support point {m + 1} ({dgp.support.labels[m]}): "
                f"propensities sum to {prob_sum!r}"
            )
        points.append(
            PointCheck(
                index=m + 1,
                label=dgp.support.labels[m],
                min_prob=min_prob,
                prob_sum=prob_sum,
                passes=ok,
            )
        )
    if p_s_star <= 0:
        messages.append(f"subpopulation mass p_S* = {p_s_star!r} is not positive")
    overall = all(pc.passes for pc in points) and p_s_star > 0
    return ValidationReport(
        p_min=float(p_min),
        p_s_star=p_s_star,
        points=tuple(points),
        overall_pass=overall,
        messages=tuple(messages),
    )


def marginal_ps(dgp: Dgp, subpopulation: Iterable[int] | None = None) -> float:
    """Marginal subpopulation mass p_S* = E[sum_{j in S} p_j(X)].

    Additive over disjoint subpopulations and equal to 1 when S is the
    full treatment set.
    """
    if subpopulation is None:
        sub = dgp.treatments.subpopulation
    else:
        sub = frozenset(int(t) for t in subpopulation)
        if not sub:
            raise ValidationError("subpopulation must be nonempty")
        if not sub <= set(dgp.treatments.labels):
            raise ValidationError(
                f"subpopulation {sorted(sub)} outside treatment labels"
            )
    probs = dgp.prob_matrix()
    cols = sorted(sub)
    return float(dgp.support.probs @ probs[:, cols].sum(axis=1))


def records_to_arrays(
    records: Sequence[ObservationRecord],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split records into (y, t, x0) arrays with 0-based support indices."""
    y = np.array([r.y for r in records], dtype=float)
    t = np.array([r.t for r in records], dtype=np.int64)
    x0 = np.array([r.x - 1 for r in records], dtype=np.int64)
    return y, t, x0

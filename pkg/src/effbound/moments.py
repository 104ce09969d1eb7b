"""Moment families and exact subpopulation moment solutions.

Two scalar families ship: `mean` with m(y; beta) = y - beta and
`quantile(tau)` with m(y; beta) = 1{y <= beta} - tau. For each
treatment t, beta*_t solves E[m(Y_t; beta) | T in S] = 0, where the
conditional distribution of X given {T in S} has exact point masses
w_S(x) = P(x) p_S(x) / p_S*. The machinery is written so that the
per-treatment moment dimension could exceed one, but the shipped
families are scalar and everything downstream indexes blocks by t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dgp, OutcomeLaw
from .errors import AssumptionError, StructuralError, ValidationError

QUANTILE_TOL = 1e-12
QUANTILE_MAX_ITER = 200
BRACKET_SD_MULTIPLE = 10.0
JACOBIAN_RANK_TOL = 1e-10


@dataclass(frozen=True)
class MomentFamily:
    """Scalar moment family: `mean` or `quantile` (with tau in (0,1))."""

    kind: str
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in ("mean", "quantile"):
            raise StructuralError(f"unknown moment family kind {self.kind!r}")
        if self.kind == "quantile":
            if self.tau is None or not 0 < self.tau < 1:
                raise StructuralError("quantile family needs tau in (0,1)")
        elif self.tau is not None:
            raise StructuralError("mean family takes no tau")

    @property
    def requires_density(self) -> bool:
        return self.kind == "quantile"

    def m_values(self, y: np.ndarray, beta: float) -> np.ndarray:
        """m(y; beta), vectorized over observed outcomes."""
        y = np.asarray(y, dtype=float)
        if self.kind == "mean":
            return y - beta
        return (y <= beta).astype(float) - self.tau

    def conditional_moment(self, law: OutcomeLaw, beta: float) -> float:
        """e(x, t; beta) = E[m(Y; beta) | X = x, T = t] from the law."""
        if self.kind == "mean":
            return law.mean() - beta
        return float(law.cdf(beta)) - self.tau

    def conditional_variance(self, law: OutcomeLaw, beta: float) -> float:
        """Var[m(Y; beta) | X = x, T = t] from the law."""
        if self.kind == "mean":
            return law.variance()
        c = float(law.cdf(beta))
        return c * (1.0 - c)


def conditional_moment(
    dgp: Dgp, family: MomentFamily, t: int, x: int, beta: float
) -> float:
    """e_t(x; beta) at a 0-based support index."""
    return family.conditional_moment(dgp.outcome(t, x), beta)


@dataclass(frozen=True, eq=False)
class MomentSolution:
    """Exact beta* and everything downstream consumers need.

    Arrays are indexed by treatment row t = 0..J and support column.
    `densities` holds f_{t | T in S}(beta*_t) for quantile solutions and
    is None for the mean family.
    """

    family: MomentFamily
    subpopulation: tuple[int, ...]
    p_s_star: float
    p_s_x: np.ndarray  # (M,)
    w_s: np.ndarray  # (M,) mass of X given T in S
    beta_star: np.ndarray  # (J+1,)
    e_star: np.ndarray  # (J+1, M)
    cond_var: np.ndarray  # (J+1, M)
    jacobians: np.ndarray  # (J+1,) d/d beta of the subpopulation moment
    moment_residuals: np.ndarray  # (J+1,) solver residuals, ~0
    densities: np.ndarray | None = None


def solve_beta(dgp: Dgp, subpopulation, family: MomentFamily) -> MomentSolution:
    """Solve the subpopulation moment condition exactly for every treatment.

    The mean family solves in closed form; the quantile family bisects
    the strictly increasing mixture CDF to |moment| <= 1e-12 within 200
    iterations, bracketed by the extreme conditional means plus/minus
    ten times the largest scale.
    """
    sub = frozenset(int(t) for t in subpopulation)
    if not sub or not sub <= set(dgp.treatments.labels):
        raise ValidationError(
            f"subpopulation {sorted(sub)} invalid for treatments "
            f"0..{dgp.treatments.count_j}"
        )
    weights = dgp.support.probs
    probs = dgp.prob_matrix()
    p_s_x = probs[:, sorted(sub)].sum(axis=1)
    p_s_star = float(weights @ p_s_x)
    if p_s_star <= 0:
        raise AssumptionError(
            "identification fails: subpopulation mass p_S* is zero"
        )
    w_s = weights * p_s_x / p_s_star

    n_t = dgp.n_treatments
    m_count = dgp.n_points
    beta_star = np.empty(n_t)
    jac = np.empty(n_t)
    densities = np.empty(n_t) if family.requires_density else None

    if family.requires_density:
        for t in range(n_t):
            for m in range(m_count):
                if not dgp.outcome(t, m).has_density:
                    raise AssumptionError(
                        "quantile moments need outcome laws with a density; "
                        f"treatment {t} at support point {m + 1} has none"
                    )

    for t in range(n_t):
        laws = [dgp.outcome(t, m) for m in range(m_count)]
        if family.kind == "mean":
            beta_star[t] = float(w_s @ np.array([law.mean() for law in laws]))
            jac[t] = -1.0
        else:
            beta_star[t] = _solve_quantile(laws, w_s, family.tau)
            dens = float(
                w_s @ np.array([law.pdf(beta_star[t]) for law in laws])
            )
            densities[t] = dens
            jac[t] = dens

    e_star = np.empty((n_t, m_count))
    cond_var = np.empty((n_t, m_count))
    for t in range(n_t):
        for m in range(m_count):
            law = dgp.outcome(t, m)
            e_star[t, m] = family.conditional_moment(law, beta_star[t])
            cond_var[t, m] = family.conditional_variance(law, beta_star[t])
    residuals = e_star @ w_s

    return MomentSolution(
        family=family,
        subpopulation=tuple(sorted(sub)),
        p_s_star=p_s_star,
        p_s_x=p_s_x,
        w_s=w_s,
        beta_star=beta_star,
        e_star=e_star,
        cond_var=cond_var,
        jacobians=jac,
        moment_residuals=residuals,
        densities=densities,
    )


def _solve_quantile(laws, w_s: np.ndarray, tau: float) -> float:
    means = np.array([law.mean() for law in laws])
    sd_max = max(np.sqrt(law.variance()) for law in laws)
    lo = float(means.min() - BRACKET_SD_MULTIPLE * sd_max)
    hi = float(means.max() + BRACKET_SD_MULTIPLE * sd_max)

    def g(beta: float) -> float:
        return float(
            sum(w * law.cdf(beta) for w, law in zip(w_s, laws)) - tau
        )

    g_lo, g_hi = g(lo), g(hi)
    if g_lo > 0 or g_hi < 0:
        raise AssumptionError(
            "identification fails: quantile bracket "
            f"[{lo:.6g}, {hi:.6g}] does not straddle the root "
            "(flat conditional CDF)"
        )
    for _ in range(QUANTILE_MAX_ITER):
        mid = 0.5 * (lo + hi)
        g_mid = g(mid)
        if abs(g_mid) <= QUANTILE_TOL:
            return mid
        if g_mid < 0:
            lo = mid
        else:
            hi = mid
    raise AssumptionError(
        f"quantile moment solver did not reach |moment| <= {QUANTILE_TOL:g} "
        f"within {QUANTILE_MAX_ITER} bisection steps"
    )


def jacobian_matrix(solution: MomentSolution) -> np.ndarray:
    """Block-diagonal moment Jacobian; full rank is an assumption.

    For the mean family this is -I; for quantiles, diag of the
    subpopulation outcome density at beta*_t.
    """
    if np.any(np.abs(solution.jacobians) <= JACOBIAN_RANK_TOL):
        low = int(np.argmin(np.abs(solution.jacobians)))
        raise AssumptionError(
            "moment Jacobian is rank deficient, so the target is not "
            f"locally identified: treatment {low} has derivative "
            f"{solution.jacobians[low]:.3e}"
        )
    return np.diag(solution.jacobians)

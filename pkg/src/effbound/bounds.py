"""Exact variance bounds for subpopulation treatment moments.

For a finite-support population, the efficient influence function for
the stacked parameter (beta_0, ..., beta_J) under each propensity
information regime is

    psi(W) = -(Jac' M^{-1} Jac)^{-1} Jac' M^{-1} F(W),

where F stacks, per treatment t,

    F_t(W) = D_t * stilde_t(W) + h_t(W) + ttilde_t(W),

with stilde_t the inverse-probability-weighted moment residual,
ttilde_t(W) = p_S(X) e_t(X) / p_S*, and a middle term h_t that encodes
what is known about the propensity score:

* known:      h_t = 0;
* parametric: h_t = ctilde_t . sum_j D_j S_j(X), the L2 projection of
  the unknown-regime term onto the span of the realized-treatment score;
* unknown:    h_t = (D_S - p_S(X)) e_t(X) / p_S*.

The bound is V = (Jac' M^{-1} Jac)^{-1} with M = E[F F']. Because the
middle and ttilde terms are conditionally mean independent of the
stilde term, M assembles exactly from three pieces (a diagonal moment-
variance part, the middle-term Gram, and the centered ttilde Gram), and
every expectation is a finite sum over (support point, treatment) with
the outcome integrated analytically. Second moments are centered by
subtracting E[F] (which is zero at beta* up to solver tolerance); the
uncentered variant is kept behind `centered=False` for debugging.

All matrices are indexed by treatment blocks 0..J (scalar moments), and
the three regimes satisfy M_known <= M_parametric <= M_unknown and the
same ordering for the bounds, which this module asserts after every
assembly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import Dgp, ObservationRecord
from .errors import (
    AssumptionError,
    NumericAssertionError,
    StructuralError,
    ValidationError,
)
from .moments import MomentFamily, MomentSolution, jacobian_matrix, solve_beta
from .propensity import (
    NestedStratifiedModel,
    PropensityModel,
    StratifiedModel,
    TabularModel,
    fisher_information,
)

REGIMES = ("known", "parametric", "unknown")
PSD_ORDER_TOL = 1e-10
IDENTITY_TOL = 1e-10
COND_WARN_THRESHOLD = 1e12
MODEL_MATCH_TOL = 1e-9
DEGENERATE_SCALE = 1e-14


@dataclass(frozen=True, eq=False)
class _Population:
    subpopulation: tuple[int, ...]
    point_probs: np.ndarray  # (M,)
    prop: np.ndarray  # (M, J+1)
    mask: np.ndarray  # (J+1,) bool, True on S
    p_s_x: np.ndarray  # (M,)
    p_s_star: float


def _population(dgp: Dgp, subpopulation) -> _Population:
    sub = frozenset(int(t) for t in subpopulation)
    if not sub or not sub <= set(dgp.treatments.labels):
        raise ValidationError(
            f"subpopulation {sorted(sub)} invalid for treatments "
            f"0..{dgp.treatments.count_j}"
        )
    prop = np.asarray(dgp.prob_matrix(), dtype=float)
    if np.any(prop <= 0):
        m, j = np.argwhere(prop <= 0)[0]
        raise ValidationError(
            f"bound undefined without overlap: treatment {j} has propensity "
            f"{prop[m, j]!r} at support point {m + 1}"
        )
    mask = np.zeros(dgp.n_treatments, dtype=bool)
    mask[sorted(sub)] = True
    p_s_x = prop[:, mask].sum(axis=1)
    p_s_star = float(dgp.support.probs @ p_s_x)
    return _Population(
        subpopulation=tuple(sorted(sub)),
        point_probs=np.asarray(dgp.support.probs, dtype=float),
        prop=prop,
        mask=mask,
        p_s_x=p_s_x,
        p_s_star=p_s_star,
    )


@dataclass(frozen=True, eq=False)
class InfluenceSpec:
    """Everything needed to evaluate the stacked influence vector F.

    `c_tilde` is the (J+1, d_gamma) matrix of projection coefficients
    for the parametric regime (None otherwise); `t_tilde_mean` is the
    population mean of the ttilde component, subtracted when `centered`.
    """

    regime: str
    dgp: Dgp
    subpopulation: tuple[int, ...]
    family: MomentFamily
    solution: MomentSolution
    model: PropensityModel | None
    c_tilde: np.ndarray | None
    t_tilde_mean: np.ndarray
    centered: bool
    fisher: np.ndarray | None
    score_cross: np.ndarray | None  # (J+1, d_gamma) E[e_t sum_{j in S} D_j S_j']


def influence_components(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    model: PropensityModel | None = None,
    regime: str = "parametric",
    solution: MomentSolution | None = None,
    centered: bool = True,
) -> InfluenceSpec:
    """Assemble the influence-function ingredients for one regime.

    For the parametric regime the projection coefficient rows are
    ctilde_t = E[e_t(X) sum_{j in S} D_j S_j(X)'] I(gamma)^{-1} / p_S*,
    where I is the realized-treatment score information.
    """
    if regime not in REGIMES:
        raise ValidationError(f"unknown regime {regime!r}; expected {REGIMES}")
    pop = _population(dgp, subpopulation)
    sol = solution if solution is not None else solve_beta(dgp, subpopulation, family)

    c_tilde = None
    fisher = None
    cross = None
    if regime == "parametric":
        if model is None:
            model = dgp.propensity
        model_probs = model.prob_matrix()
        if np.max(np.abs(model_probs - pop.prop)) > MODEL_MATCH_TOL:
            raise ValidationError(
                "parametric model must evaluate to the population propensities"
            )
        fisher = fisher_information(dgp, model)
        scores = model.score_tensor()  # (M, d_gamma, J+1)
        s_cols = list(np.flatnonzero(pop.mask))
        # E[e_t(X) sum_{j in S} D_j S_j(X)'] via exact (x, j) enumeration
        agg = np.einsum("m,mj,mdj->md", pop.point_probs, pop.prop[:, s_cols], scores[:, :, s_cols])
        cross = sol.e_star @ agg  # (J+1, d_gamma)
        c_tilde = np.linalg.solve(fisher, cross.T).T / pop.p_s_star
    else:
        model = None

    t_tilde_mean = (sol.e_star @ (pop.point_probs * pop.p_s_x)) / pop.p_s_star
    return InfluenceSpec(
        regime=regime,
        dgp=dgp,
        subpopulation=pop.subpopulation,
        family=family,
        solution=sol,
        model=model,
        c_tilde=c_tilde,
        t_tilde_mean=t_tilde_mean,
        centered=centered,
        fisher=fisher,
        score_cross=cross,
    )


def _moment_pieces(
    pop: _Population, sol: MomentSolution, centered: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """(model-free M_known, unknown-regime middle Gram) by exact sums."""
    pss = pop.p_s_star
    s_diag = np.diag(
        np.einsum(
            "m,m,tm->t",
            pop.point_probs,
            pop.p_s_x**2,
            sol.cond_var / pop.prop.T,
        )
        / pss**2
    )
    t_gram = np.einsum(
        "m,tm,um->tu",
        pop.point_probs * pop.p_s_x**2,
        sol.e_star,
        sol.e_star,
    ) / pss**2
    if centered:
        mu = (sol.e_star @ (pop.point_probs * pop.p_s_x)) / pss
        t_gram = t_gram - np.outer(mu, mu)
    h_unknown = np.einsum(
        "m,tm,um->tu",
        pop.point_probs * pop.p_s_x * (1.0 - pop.p_s_x),
        sol.e_star,
        sol.e_star,
    ) / pss**2
    return s_diag + t_gram, h_unknown


def second_moments_model_free(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    solution: MomentSolution | None = None,
    centered: bool = True,
) -> dict[str, np.ndarray]:
    """M for the known and unknown regimes, which need no score model."""
    pop = _population(dgp, subpopulation)
    sol = solution if solution is not None else solve_beta(dgp, subpopulation, family)
    base, h_unknown = _moment_pieces(pop, sol, centered=centered)
    return {"known": _sym(base), "unknown": _sym(base + h_unknown)}


def second_moments(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    model: PropensityModel | None = None,
    solution: MomentSolution | None = None,
    centered: bool = True,
) -> dict[str, np.ndarray]:
    """M = E[F F'] for all three regimes at once.

    The three matrices share the diagonal moment-variance part and the
    centered ttilde Gram; they differ only in the middle-term Gram,
    which is zero (known), the projected Gram A I^{-1} A' / p_S*^2
    (parametric), or the binomial-variance Gram (unknown).
    """
    pop = _population(dgp, subpopulation)
    sol = solution if solution is not None else solve_beta(dgp, subpopulation, family)
    spec_p = influence_components(
        dgp, subpopulation, family, model=model, regime="parametric",
        solution=sol, centered=centered,
    )
    base, h_unknown = _moment_pieces(pop, sol, centered=centered)
    h_parametric = spec_p.score_cross @ spec_p.c_tilde.T / pop.p_s_star
    return {
        "known": _sym(base),
        "parametric": _sym(base + h_parametric),
        "unknown": _sym(base + h_unknown),
    }


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


class EfficiencyBound(NamedTuple):
    matrix: np.ndarray
    degenerate: bool
    condition_number: float


def efficiency_bound(jac: np.ndarray, second_moment: np.ndarray) -> EfficiencyBound:
    """V = (Jac' M^{-1} Jac)^{-1}, cross-checked against Jac^{-1} M Jac^{-T}.

    An all-zero M (constant outcomes, zero influence) yields the zero
    matrix with `degenerate=True`; a singular M with nonzero influence
    is a hard error. Condition numbers above 1e12 trigger a warning.
    """
    m = _sym(np.asarray(second_moment, dtype=float))
    jac = np.asarray(jac, dtype=float)
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    if scale <= DEGENERATE_SCALE:
        return EfficiencyBound(np.zeros_like(m), True, 1.0)
    eigvals = np.linalg.eigvalsh(m)
    if eigvals[0] <= 1e-12 * scale:
        raise AssumptionError(
            "second-moment matrix is singular with nonzero influence "
            f"(min eigenvalue {eigvals[0]:.3e})"
        )
    cond = float(eigvals[-1] / eigvals[0])
    if cond > COND_WARN_THRESHOLD:
        warnings.warn(
            f"second-moment matrix condition number {cond:.3e} exceeds 1e12",
            stacklevel=2,
        )
    v_solve = _sym(np.linalg.inv(jac.T @ np.linalg.solve(m, jac)))
    jinv = np.linalg.inv(jac)
    v_direct = _sym(jinv @ m @ jinv.T)
    gap = float(np.max(np.abs(v_solve - v_direct)))
    tol = IDENTITY_TOL * (1.0 + float(np.max(np.abs(v_direct))))
    if gap > tol:
        raise NumericAssertionError(
            f"efficiency bound cross-check failed: forms differ by {gap:.3e}"
        )
    return EfficiencyBound(v_direct, False, cond)


def eif_linear_map(jac: np.ndarray, second_moment: np.ndarray) -> np.ndarray:
    """L with psi(w) = L F(w): L = -(Jac' M^{-1} Jac)^{-1} Jac' M^{-1}."""
    m = _sym(np.asarray(second_moment, dtype=float))
    k = np.linalg.solve(m, jac)  # M^{-1} Jac
    a = jac.T @ k
    return -np.linalg.solve(a, k.T)


def _middle_table(spec: InfluenceSpec, pop: _Population) -> np.ndarray:
    """(M, J+1 realized, J+1 component) middle term h(x, j)."""
    m_count, n_t = pop.prop.shape
    out = np.zeros((m_count, n_t, n_t))
    if spec.regime == "known":
        return out
    if spec.regime == "parametric":
        scores = spec.model.score_tensor()
        # component vector c_tilde @ S_j(x) for every realized treatment j
        out = np.einsum("td,mdj->mjt", spec.c_tilde, scores)
        return out
    e = spec.solution.e_star  # (J+1, M)
    centered_d = np.where(pop.mask, 1.0, 0.0)[None, :] - pop.p_s_x[:, None]
    out = centered_d[:, :, None] * e.T[:, None, :] / pop.p_s_star
    return out


def influence_tables(spec: InfluenceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Lookup tables for vectorized influence evaluation.

    Returns `(base, s_coef)` with `base[m, j]` the (J+1,) value of the
    outcome-free part of F given X = x_m, T = j, and `s_coef[m, j]` the
    multiplier of the realized moment residual added in slot j.
    """
    pop = _population(spec.dgp, spec.subpopulation)
    sol = spec.solution
    base = _middle_table(spec, pop)
    ttilde = (pop.p_s_x[:, None] * sol.e_star.T) / pop.p_s_star  # (M, J+1)
    base = base + ttilde[:, None, :]
    if spec.centered:
        base = base - spec.t_tilde_mean[None, None, :]
    s_coef = pop.p_s_x[:, None] / (pop.prop * pop.p_s_star)
    return base, s_coef


def eif_evaluate(
    spec: InfluenceSpec,
    jac: np.ndarray,
    second_moment: np.ndarray,
    record: ObservationRecord,
) -> np.ndarray:
    """Efficient influence vector psi(w) at one observation."""
    base, s_coef = influence_tables(spec)
    m0 = record.x - 1
    t = record.t
    if not (0 <= m0 < spec.dgp.n_points):
        raise ValidationError(f"record support index {record.x} out of range")
    if not (0 <= t < spec.dgp.n_treatments):
        raise ValidationError(f"record treatment {t} out of range")
    f = base[m0, t].copy()
    beta_t = spec.solution.beta_star[t]
    resid = float(spec.family.m_values(np.array([record.y]), beta_t)[0]) - float(
        spec.solution.e_star[t, m0]
    )
    f[t] += s_coef[m0, t] * resid
    return eif_linear_map(jac, second_moment) @ f


def eif_population_moments(
    spec: InfluenceSpec, jac: np.ndarray, second_moment: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact E[psi] and E[psi psi'] by enumeration over (point, treatment).

    The outcome enters F linearly through the realized moment residual,
    whose conditional mean is zero and conditional variance is known, so
    both moments reduce to finite sums.
    """
    pop = _population(spec.dgp, spec.subpopulation)
    base, s_coef = influence_tables(spec)
    lmap = eif_linear_map(jac, second_moment)
    n_t = spec.dgp.n_treatments
    mean = np.zeros(n_t)
    second = np.zeros((n_t, n_t))
    for m in range(spec.dgp.n_points):
        for j in range(n_t):
            w = pop.point_probs[m] * pop.prop[m, j]
            f_mean = base[m, j]
            psi_mean = lmap @ f_mean
            mean += w * psi_mean
            lcol = lmap[:, j] * s_coef[m, j]
            second += w * (
                np.outer(psi_mean, psi_mean)
                + np.outer(lcol, lcol) * spec.solution.cond_var[j, m]
            )
    return mean, _sym(second)


@dataclass(frozen=True)
class ProjectionReport:
    """L2 geometry of the unknown-regime middle term vs the score span."""

    coefficients: np.ndarray  # (J+1, d_gamma)
    norm_unknown_sq: float
    norm_projection_sq: float
    norm_residual_sq: float
    pythagoras_residual: float


def project_huk(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    model: PropensityModel | None = None,
    solution: MomentSolution | None = None,
    regime: str = "parametric",
) -> ProjectionReport:
    """Project the unknown-regime middle term onto the model score span.

    Computes E||h_unknown||^2, E||h_projected||^2 and the squared
    residual distance by exact enumeration, and checks the Pythagoras
    identity. With regime='known' the projection is zero and the
    residual equals the full norm.
    """
    pop = _population(dgp, subpopulation)
    sol = solution if solution is not None else solve_beta(dgp, subpopulation, family)
    if regime == "known":
        c_tilde = np.zeros((dgp.n_treatments, 1))
        scores = np.zeros((dgp.n_points, 1, dgp.n_treatments))
    elif regime == "parametric":
        spec = influence_components(
            dgp, subpopulation, family, model=model, regime="parametric", solution=sol
        )
        c_tilde = spec.c_tilde
        scores = spec.model.score_tensor()
    else:
        raise ValidationError("projection regimes are 'parametric' and 'known'")

    n_uk = 0.0
    n_p = 0.0
    n_r = 0.0
    mask_val = np.where(pop.mask, 1.0, 0.0)
    for m in range(dgp.n_points):
        for j in range(dgp.n_treatments):
            w = pop.point_probs[m] * pop.prop[m, j]
            huk = (mask_val[j] - pop.p_s_x[m]) * sol.e_star[:, m] / pop.p_s_star
            hp = c_tilde @ scores[m, :, j]
            n_uk += w * float(huk @ huk)
            n_p += w * float(hp @ hp)
            diff = huk - hp
            n_r += w * float(diff @ diff)
    return ProjectionReport(
        coefficients=c_tilde,
        norm_unknown_sq=n_uk,
        norm_projection_sq=n_p,
        norm_residual_sq=n_r,
        pythagoras_residual=abs(n_uk - n_p - n_r),
    )


def psd_order_margin(lower: np.ndarray, upper: np.ndarray) -> float:
    """Smallest eigenvalue of (upper - lower); >= -tol certifies ordering."""
    return float(np.linalg.eigvalsh(_sym(upper - lower))[0])


def _as_stratified(model) -> tuple[np.ndarray, np.ndarray] | None:
    """(assignment, (J+1, K) cell probabilities) for stratified-like models."""
    if isinstance(model, StratifiedModel):
        return np.asarray(model.partition), model.full_cell_probs()
    if isinstance(model, TabularModel):
        return np.arange(model.n_points), model.probs.T
    if isinstance(model, NestedStratifiedModel):
        assign = model.partition.assignment(model.level)
        probs = model.prob_matrix()
        k_count = assign.max() + 1
        cells = np.zeros((model.n_treatments + 1, k_count))
        for k in range(k_count):
            cells[:, k] = probs[assign == k][0]
        return assign, cells
    return None


def delta_decomposition(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    model: PropensityModel | None = None,
    solution: MomentSolution | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified gap decomposition (delta0, delta1).

    delta0 weights within-stratum covariance of the stacked conditional
    moments; delta1 weights the outer products of within-stratum means.
    Their sum closes the gap M_unknown - M_known, and delta1 alone is
    M_parametric - M_known. Single-stratum populations have delta1 = 0.
    """
    if model is None:
        model = dgp.propensity
    strat = _as_stratified(model)
    if strat is None:
        raise ValidationError(
            "delta decomposition needs a stratified-type propensity model"
        )
    assign, cell_probs = strat
    pop = _population(dgp, subpopulation)
    if np.max(np.abs(model.prob_matrix() - pop.prop)) > MODEL_MATCH_TOL:
        raise ValidationError(
            "stratified model must evaluate to the population propensities"
        )
    sol = solution if solution is not None else solve_beta(dgp, subpopulation, family)
    n_t = dgp.n_treatments
    delta0 = np.zeros((n_t, n_t))
    delta1 = np.zeros((n_t, n_t))
    p_s_cell = cell_probs[sorted(pop.subpopulation), :].sum(axis=0)
    for k in range(cell_probs.shape[1]):
        members = np.flatnonzero(assign == k)
        mass = float(pop.point_probs[members].sum())
        w = pop.point_probs[members] / mass
        e_cell = sol.e_star[:, members]
        mean = e_cell @ w
        centered = e_cell - mean[:, None]
        cov = (centered * w) @ centered.T
        scale = p_s_cell[k] * (1.0 - p_s_cell[k]) * mass / pop.p_s_star**2
        delta0 += scale * cov
        delta1 += scale * np.outer(mean, mean)
    return _sym(delta0), _sym(delta1)


def delta0_refinement_limit(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    assignments,
) -> list[float]:
    """trace(delta0) along a nested sequence of stratifications.

    Each assignment must refine the previous one and keep the true
    propensities constant within its cells. The trace is nonincreasing
    along the sequence and exactly zero once cells are singletons.
    """
    assigns = [np.asarray(a, dtype=np.int64) for a in assignments]
    if not assigns:
        raise ValidationError("refinement sequence must be nonempty")
    pop = _population(dgp, subpopulation)
    sol = solve_beta(dgp, subpopulation, family)
    for prev, nxt in zip(assigns, assigns[1:]):
        for cell in np.unique(nxt):
            parents = np.unique(prev[nxt == cell])
            if parents.size != 1:
                raise ValidationError(
                    f"refinement violated: cell {cell} of the finer partition "
                    f"spans coarse cells {parents.tolist()}"
                )
    traces = []
    for assign in assigns:
        delta0 = np.zeros((dgp.n_treatments, dgp.n_treatments))
        for k in np.unique(assign):
            members = np.flatnonzero(assign == k)
            p_cell = pop.p_s_x[members]
            if np.max(np.abs(p_cell - p_cell[0])) > 1e-12:
                raise ValidationError(
                    f"stratification invalid: p_S varies within cell {k}"
                )
            mass = float(pop.point_probs[members].sum())
            w = pop.point_probs[members] / mass
            e_cell = sol.e_star[:, members]
            mean = e_cell @ w
            centered = e_cell - mean[:, None]
            cov = (centered * w) @ centered.T
            delta0 += (
                p_cell[0] * (1.0 - p_cell[0]) * mass / pop.p_s_star**2
            ) * cov
        traces.append(float(np.trace(delta0)))
    for earlier, later in zip(traces, traces[1:]):
        if later > earlier + 1e-12:
            raise NumericAssertionError(
                f"trace(delta0) increased along refinement: {earlier} -> {later}"
            )
    return traces


def woodbury_inverse(c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Closed-form inverse of diag(vec c) + ones(J,J) kron diag(d).

    `c` is (J, K) with the coordinate ordering (j, k) -> j*K + k, and
    `d` has length K. The inverse is diagonal in c^{-1} minus one
    rank-one correction per stratum with weight d_k / p_k, where
    p_k = 1 + sum_j d_k / c_jk. All entries must be positive.
    """
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    if c.ndim != 2 or d.ndim != 1 or c.shape[1] != d.shape[0]:
        raise StructuralError("need c with shape (J, K) and d with length K")
    if np.any(c <= 0) or np.any(d <= 0):
        raise StructuralError("woodbury_inverse requires positive entries")
    j_count, k_count = c.shape
    inv = np.diag(1.0 / c.reshape(-1))
    for k in range(k_count):
        p_k = 1.0 + float((d[k] / c[:, k]).sum())
        u = np.zeros(j_count * k_count)
        u[np.arange(j_count) * k_count + k] = 1.0 / c[:, k]
        inv -= (d[k] / p_k) * np.outer(u, u)
    return inv


@dataclass(frozen=True, eq=False)
class BoundReport:
    """Full output of a bound computation across the three regimes."""

    subpopulation: tuple[int, ...]
    family: MomentFamily
    p_s_star: float
    beta_star: np.ndarray
    jacobians: np.ndarray
    second_moments: dict[str, np.ndarray]
    bounds: dict[str, np.ndarray]
    degenerate: dict[str, bool]
    condition_numbers: dict[str, float]
    ordering_margins: dict[str, float]
    projection: ProjectionReport | None = None
    delta0: np.ndarray | None = None
    delta1: np.ndarray | None = None
    delta_closure_residual: float | None = None
    two_route_residual: float | None = None

    def to_dict(self) -> dict:
        out = {
            "subpopulation": list(self.subpopulation),
            "family": {"kind": self.family.kind, "tau": self.family.tau},
            "p_s_star": self.p_s_star,
            "beta_star": self.beta_star.tolist(),
            "jacobians": self.jacobians.tolist(),
            "second_moments": {
                r: m.tolist() for r, m in self.second_moments.items()
            },
            "bounds": {r: m.tolist() for r, m in self.bounds.items()},
            "degenerate": dict(self.degenerate),
            "condition_numbers": dict(self.condition_numbers),
            "ordering_margins": dict(self.ordering_margins),
        }
        if self.projection is not None:
            out["projection"] = {
                "norm_unknown_sq": self.projection.norm_unknown_sq,
                "norm_projection_sq": self.projection.norm_projection_sq,
                "norm_residual_sq": self.projection.norm_residual_sq,
                "pythagoras_residual": self.projection.pythagoras_residual,
            }
        if self.delta0 is not None:
            out["delta0"] = self.delta0.tolist()
            out["delta1"] = self.delta1.tolist()
            out["delta_closure_residual"] = self.delta_closure_residual
        if self.two_route_residual is not None:
            out["two_route_residual"] = self.two_route_residual
        return out


def _assert_ordering(margins: dict[str, float]):
    for name, margin in margins.items():
        if margin < -PSD_ORDER_TOL:
            raise NumericAssertionError(
                f"PSD ordering violated at {name}: min eigenvalue {margin:.3e}"
            )


def compute_bound_report(
    dgp: Dgp,
    subpopulation=None,
    family: MomentFamily | None = None,
    model: PropensityModel | None = None,
    centered: bool = True,
    cross_check: bool = True,
) -> BoundReport:
    """One-stop bound computation with every internal identity asserted.

    Asserts the PSD regime ordering on second moments and bounds, the
    Pythagoras identity of the score-span projection, the Frobenius
    control of the parametric-to-unknown gap, and (for stratified-type
    models) the delta decomposition closure plus agreement with the
    direct stratified route. Violations raise NumericAssertionError.
    """
    if subpopulation is None:
        subpopulation = dgp.treatments.subpopulation
    if family is None:
        family = MomentFamily("mean")
    if model is None:
        model = dgp.propensity
    sol = solve_beta(dgp, subpopulation, family)
    jac = jacobian_matrix(sol)
    moments = second_moments(
        dgp, subpopulation, family, model=model, solution=sol, centered=centered
    )
    bounds = {}
    degenerate = {}
    conds = {}
    for regime in REGIMES:
        eb = efficiency_bound(jac, moments[regime])
        bounds[regime] = eb.matrix
        degenerate[regime] = eb.degenerate
        conds[f"second_moment_{regime}"] = eb.condition_number

    margins = {
        "M_known_vs_parametric": psd_order_margin(
            moments["known"], moments["parametric"]
        ),
        "M_parametric_vs_unknown": psd_order_margin(
            moments["parametric"], moments["unknown"]
        ),
        "V_known_vs_parametric": psd_order_margin(
            bounds["known"], bounds["parametric"]
        ),
        "V_parametric_vs_unknown": psd_order_margin(
            bounds["parametric"], bounds["unknown"]
        ),
    }
    _assert_ordering(margins)

    projection = project_huk(
        dgp, subpopulation, family, model=model, solution=sol
    )
    if projection.pythagoras_residual > IDENTITY_TOL:
        raise NumericAssertionError(
            "Pythagoras identity violated: residual "
            f"{projection.pythagoras_residual:.3e}"
        )
    frob = float(
        np.linalg.norm(moments["unknown"] - moments["parametric"], ord="fro")
    )
    if frob > projection.norm_residual_sq + IDENTITY_TOL:
        raise NumericAssertionError(
            f"Frobenius control violated: gap norm {frob:.3e} exceeds "
            f"residual energy {projection.norm_residual_sq:.3e}"
        )

    delta0 = delta1 = None
    closure = None
    two_route = None
    if cross_check and _as_stratified(model) is not None:
        delta0, delta1 = delta_decomposition(
            dgp, subpopulation, family, model=model, solution=sol
        )
        closure = float(
            np.max(
                np.abs(delta0 + delta1 - (moments["unknown"] - moments["known"]))
            )
        )
        delta1_gap = float(
            np.max(np.abs(delta1 - (moments["parametric"] - moments["known"])))
        )
        if closure > IDENTITY_TOL or delta1_gap > IDENTITY_TOL:
            raise NumericAssertionError(
                "delta decomposition does not close: residuals "
                f"{closure:.3e} (sum) and {delta1_gap:.3e} (delta1)"
            )
        direct = stratified_bound_closed_form(
            dgp, subpopulation, family, model=model
        )
        two_route = max(
            float(np.max(np.abs(direct.second_moments[r] - moments[r])))
            for r in REGIMES
        )
        if two_route > IDENTITY_TOL:
            raise NumericAssertionError(
                f"stratified closed form disagrees with the generic route by "
                f"{two_route:.3e}"
            )

    fisher_cond = None
    try:
        spec_p = influence_components(
            dgp, subpopulation, family, model=model, regime="parametric",
            solution=sol,
        )
        fe = np.linalg.eigvalsh(spec_p.fisher)
        fisher_cond = float(fe[-1] / fe[0])
    except Exception:
        fisher_cond = float("nan")
    conds["fisher_information"] = fisher_cond

    return BoundReport(
        subpopulation=tuple(sorted(frozenset(int(t) for t in subpopulation))),
        family=family,
        p_s_star=sol.p_s_star,
        beta_star=sol.beta_star,
        jacobians=sol.jacobians,
        second_moments=moments,
        bounds=bounds,
        degenerate=degenerate,
        condition_numbers=conds,
        ordering_margins=margins,
        projection=projection,
        delta0=delta0,
        delta1=delta1,
        delta_closure_residual=closure,
        two_route_residual=two_route,
    )


def stratified_bound_closed_form(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    model: PropensityModel | None = None,
) -> BoundReport:
    """Bounds via the explicit stratified influence form, no inversions.

    Assembles E[F F'] directly from the piecewise-constant influence
    representation (inverse cell-probability weights, within-stratum
    mean middle term, stratum-mass ttilde term) and maps second moments
    to bounds through the diagonal moment Jacobian alone. Serves as an
    independent route against the generic projection-based assembly.
    """
    if model is None:
        model = dgp.propensity
    strat = _as_stratified(model)
    if strat is None:
        raise ValidationError(
            "closed-form stratified route needs a stratified-type model"
        )
    assign, cell_probs = strat
    pop = _population(dgp, subpopulation)
    if np.max(np.abs(model.prob_matrix() - pop.prop)) > MODEL_MATCH_TOL:
        raise ValidationError(
            "stratified model must evaluate to the population propensities"
        )
    sol = solve_beta(dgp, subpopulation, family)
    jac_diag = sol.jacobians
    if np.any(np.abs(jac_diag) <= 1e-10):
        raise AssumptionError("moment Jacobian is rank deficient")

    n_t = dgp.n_treatments
    s_rows = sorted(pop.subpopulation)
    p_s_cell = cell_probs[s_rows, :].sum(axis=0)
    k_count = cell_probs.shape[1]
    cell_mass = np.array(
        [pop.point_probs[assign == k].sum() for k in range(k_count)]
    )
    e_cell_mean = np.zeros((n_t, k_count))
    for k in range(k_count):
        members = np.flatnonzero(assign == k)
        e_cell_mean[:, k] = sol.e_star[:, members] @ (
            pop.point_probs[members] / cell_mass[k]
        )

    pss = pop.p_s_star
    mask_val = np.where(pop.mask, 1.0, 0.0)
    sums = {r: np.zeros((n_t, n_t)) for r in REGIMES}
    means = {r: np.zeros(n_t) for r in REGIMES}
    for m in range(dgp.n_points):
        k = assign[m]
        t_term = p_s_cell[k] * sol.e_star[:, m] / pss
        for j in range(n_t):
            w = pop.point_probs[m] * cell_probs[j, k]
            centered_d = mask_val[j] - p_s_cell[k]
            outcome_free = {
                "known": t_term,
                "parametric": t_term + centered_d * e_cell_mean[:, k] / pss,
                "unknown": t_term + centered_d * sol.e_star[:, m] / pss,
            }
            s_coef = p_s_cell[k] / (cell_probs[j, k] * pss)
            var_jm = sol.cond_var[j, m]
            for r in REGIMES:
                f0 = outcome_free[r]
                sums[r] += w * np.outer(f0, f0)
                sums[r][j, j] += w * s_coef**2 * var_jm
                means[r] += w * f0
    moments = {}
    bounds = {}
    degenerate = {}
    for r in REGIMES:
        m_mat = _sym(sums[r] - np.outer(means[r], means[r]))
        moments[r] = m_mat
        v = m_mat / np.outer(jac_diag, jac_diag)
        deg = float(np.max(np.abs(m_mat))) <= DEGENERATE_SCALE
        bounds[r] = np.zeros_like(v) if deg else _sym(v)
        degenerate[r] = deg

    delta0, delta1 = delta_decomposition(
        dgp, subpopulation, family, model=model, solution=sol
    )
    closure = float(
        np.max(np.abs(delta0 + delta1 - (moments["unknown"] - moments["known"])))
    )
    margins = {
        "M_known_vs_parametric": psd_order_margin(
            moments["known"], moments["parametric"]
        ),
        "M_parametric_vs_unknown": psd_order_margin(
            moments["parametric"], moments["unknown"]
        ),
        "V_known_vs_parametric": psd_order_margin(
            bounds["known"], bounds["parametric"]
        ),
        "V_parametric_vs_unknown": psd_order_margin(
            bounds["parametric"], bounds["unknown"]
        ),
    }
    _assert_ordering(margins)
    return BoundReport(
        subpopulation=pop.subpopulation,
        family=family,
        p_s_star=pss,
        beta_star=sol.beta_star,
        jacobians=jac_diag,
        second_moments=moments,
        bounds=bounds,
        degenerate=degenerate,
        condition_numbers={},
        ordering_margins=margins,
        delta0=delta0,
        delta1=delta1,
        delta_closure_residual=closure,
    )


def closed_form_examples(
    dgp: Dgp, subpopulation, family: MomentFamily
) -> dict[str, float]:
    """Textbook binary-treatment bounds evaluated from their displays.

    Covers the mean effect on the full population (V_ATE), the mean
    effect on the treated (V_ATT, parametric regime), and the quantile
    effect on the treated (V_QTT, parametric regime). Each is the
    variance bound of the contrast beta_1 - beta_0 and must agree with
    the generic machinery's a' V a.
    """
    if dgp.treatments.count_j != 1:
        raise ValidationError("closed-form examples require a binary treatment")
    pop = _population(dgp, subpopulation)
    sol = solve_beta(dgp, subpopulation, family)
    p = pop.point_probs
    p1 = pop.prop[:, 1]
    p0 = pop.prop[:, 0]
    e = sol.e_star
    var = sol.cond_var
    sub = set(pop.subpopulation)

    out: dict[str, float] = {}
    if family.kind == "mean" and sub == {0, 1}:
        out["V_ATE"] = float(
            p @ (var[1] / p1 + var[0] / p0 + (e[1] - e[0]) ** 2)
        )
        return out

    if sub != {1}:
        raise ValidationError(
            "closed-form examples cover S={0,1} (mean ATE) and S={1} "
            "(mean ATT / quantile QTT)"
        )
    spec = influence_components(
        dgp, subpopulation, family, regime="parametric", solution=sol
    )
    fisher = spec.fisher
    # rows of E[e_t(X) p_1(X) S_1(X)'] for the treated-score middle term
    scores = spec.model.score_tensor()
    agg1 = np.einsum("m,m,md->md", p, p1, scores[:, :, 1])
    a_rows = e @ agg1  # (2, d_gamma)
    pss = pop.p_s_star
    if family.kind == "mean":
        mid = a_rows[1] - a_rows[0]
        quad = float(mid @ np.linalg.solve(fisher, mid))
        out["V_ATT"] = float(
            (
                p @ (p1 * var[1])
                + p @ (p1**2 * var[0] / p0)
                + quad
                + p @ (p1**2 * (e[1] - e[0]) ** 2)
            )
            / pss**2
        )
        return out
    dens = sol.densities
    mid = a_rows[1] / dens[1] - a_rows[0] / dens[0]
    quad = float(mid @ np.linalg.solve(fisher, mid))
    out["V_QTT"] = float(
        (
            p @ (p1 * var[1]) / dens[1] ** 2
            + p @ (p1**2 * var[0] / p0) / dens[0] ** 2
            + quad
            + p @ (p1**2 * (e[1] / dens[1] - e[0] / dens[0]) ** 2)
        )
        / pss**2
    )
    return out

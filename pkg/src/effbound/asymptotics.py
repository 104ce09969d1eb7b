"""Sequences of propensity models and the limit of the parametric bound.

A model sequence fixes a family (nested stratified, full-rank logistic,
degenerate logistic), reproduces the true propensities exactly at every
level, and grows its parameter space with the level. Along such a
sequence the parametric-regime bound V^{p,n} is nondecreasing in the
positive semidefinite order and bounded above by the unknown-regime
bound. Whether it converges to that ceiling is governed by a span
condition: the centered conditional-moment functions

    eps_t(x)_j = (1{j in S} - p_S(x)) e_t(x),   j = 1..J,

must be approximable by combinations of the per-treatment score columns
in L2 of the covariate distribution. The per-level weighted least
squares residual of that approximation, the L2 distance between the
projected and unknown-regime middle terms, and the eigenvalue gap of
the bounds all vanish together; `classify_limit` audits the three
criteria and returns the verdict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import (
    efficiency_bound,
    project_huk,
    psd_order_margin,
    second_moments,
    second_moments_model_free,
    _sym,
)
from .core import Dgp
from .errors import NumericAssertionError, StructuralError, ValidationError
from .moments import MomentFamily, jacobian_matrix, solve_beta
from .propensity import (
    DegenerateLogisticModel,
    FullRankLogisticModel,
    NestedPartition,
    NestedStratifiedModel,
    PropensityModel,
    fisher_information,
    gamma_from_cell_probs,
)

TRUTH_MATCH_TOL = 1e-12
SPAN_SOLVE_TOL = 1e-10
ATTAIN_TOL = 1e-8
MONOTONE_TOL = 1e-10

SEQUENCE_KINDS = ("stratified_nested", "logistic_full", "logistic_degenerate")


@dataclass(frozen=True, eq=False)
class SequenceSpec:
    """Which model family a refinement sequence lives in.

    `partition` drives the stratified family; `dictionary` is an (M, n)
    value matrix whose column prefixes drive the logistic families.
    """

    kind: str
    partition: NestedPartition | None = None
    dictionary: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in SEQUENCE_KINDS:
            raise StructuralError(
                f"sequence kind {self.kind!r} not in {SEQUENCE_KINDS}"
            )
        if self.kind == "stratified_nested" and self.partition is None:
            raise StructuralError("stratified sequences need a nested partition")
        if self.kind != "stratified_nested" and self.dictionary is None:
            raise StructuralError("logistic sequences need a basis dictionary")


@dataclass(frozen=True, eq=False)
class ModelSequence:
    kind: str
    truth_level: int
    levels: tuple[int, ...]
    models: tuple[PropensityModel, ...]


def build_sequence(dgp: Dgp, spec: SequenceSpec, max_depth: int) -> ModelSequence:
    """Instantiate the sequence levels that contain the true propensity.

    The first usable level is the smallest one whose parameter space can
    represent the truth exactly; every returned model evaluates to the
    true probabilities within 1e-12 (deeper levels are zero-padded).
    """
    if max_depth < 1:
        raise ValidationError("max_depth must be at least 1")
    truth = np.asarray(dgp.prob_matrix(), dtype=float)
    j_count = dgp.treatments.count_j

    if spec.kind == "stratified_nested":
        part = spec.partition
        if part.n_points != dgp.n_points:
            raise ValidationError("partition does not cover the support")
        if max_depth > part.depth:
            raise ValidationError(
                f"max_depth {max_depth} exceeds partition depth {part.depth}"
            )
        truth_level = None
        for level in range(1, max_depth + 1):
            if _constant_within_cells(truth, part.assignment(level)):
                truth_level = level
                break
        if truth_level is None:
            raise ValidationError(
                "true propensity is not representable by the partition "
                f"within max_depth {max_depth}"
            )
        assign = part.assignment(truth_level)
        k_count = assign.max() + 1
        cell_probs = np.zeros((k_count, j_count))
        for k in range(k_count):
            cell_probs[k] = truth[assign == k][0][1:]
        base = NestedStratifiedModel(
            partition=part,
            level=truth_level,
            gamma=gamma_from_cell_probs(part, truth_level, cell_probs),
            treatments=j_count,
        )
        models = [base.padded_to(lvl) for lvl in range(truth_level, max_depth + 1)]
    else:
        dictionary = np.asarray(spec.dictionary, dtype=float)
        if dictionary.shape[0] != dgp.n_points:
            raise ValidationError("dictionary does not cover the support")
        if max_depth > dictionary.shape[1]:
            raise ValidationError(
                f"max_depth {max_depth} exceeds dictionary width "
                f"{dictionary.shape[1]}"
            )
        if spec.kind == "logistic_degenerate":
            shared = truth[:, 1:]
            if np.max(np.abs(shared - shared[:, [0]])) > TRUTH_MATCH_TOL:
                raise ValidationError(
                    "degenerate logistic cannot represent treatment-varying "
                    "propensities"
                )
            utilities = np.log(truth[:, 1] / truth[:, 0])[:, None]
        else:
            utilities = np.log(truth[:, 1:] / truth[:, [0]])
        truth_level = None
        for level in range(1, max_depth + 1):
            coeffs, resid = _least_squares(dictionary[:, :level], utilities)
            if resid <= SPAN_SOLVE_TOL:
                truth_level = level
                break
        if truth_level is None:
            raise ValidationError(
                "true log-odds are outside the dictionary span within "
                f"max_depth {max_depth}"
            )
        models = []
        for level in range(truth_level, max_depth + 1):
            coeffs, _ = _least_squares(dictionary[:, :level], utilities)
            if spec.kind == "logistic_degenerate":
                models.append(
                    DegenerateLogisticModel(
                        dictionary=dictionary[:, :level],
                        coefficients=coeffs[:, 0],
                        treatments=j_count,
                    )
                )
            else:
                models.append(
                    FullRankLogisticModel(
                        dictionary=dictionary[:, :level], coefficients=coeffs
                    )
                )

    for model in models:
        gap = float(np.max(np.abs(model.prob_matrix() - truth)))
        if gap > TRUTH_MATCH_TOL:
            raise NumericAssertionError(
                f"sequence level fails to reproduce the truth (gap {gap:.3e})"
            )
    return ModelSequence(
        kind=spec.kind,
        truth_level=truth_level,
        levels=tuple(range(truth_level, max_depth + 1)),
        models=tuple(models),
    )


def _constant_within_cells(matrix: np.ndarray, assign: np.ndarray) -> bool:
    for k in np.unique(assign):
        rows = matrix[assign == k]
        if np.max(np.abs(rows - rows[0])) > TRUTH_MATCH_TOL:
            return False
    return True


def _least_squares(design: np.ndarray, targets: np.ndarray):
    coeffs, _, _, _ = np.linalg.lstsq(design, targets, rcond=None)
    resid = float(np.max(np.abs(design @ coeffs - targets)))
    return coeffs, resid


def epsilon_bar(
    dgp: Dgp, subpopulation, family: MomentFamily, t: int, coordinate: int = 0
) -> np.ndarray:
    """(M, J) target of the span condition for moment row t.

    Column j-1 holds (1{j in S} - p_S(x)) e_t(x) over the support; the
    residual treatment 0 does not appear because its score column is
    determined by the others.
    """
    if coordinate != 0:
        raise ValidationError("shipped moment families are scalar per treatment")
    sol = solve_beta(dgp, subpopulation, family)
    sub = frozenset(int(v) for v in subpopulation)
    probs = dgp.prob_matrix()
    p_s_x = probs[:, sorted(sub)].sum(axis=1)
    j_count = dgp.treatments.count_j
    inds = np.array([1.0 if j in sub else 0.0 for j in range(1, j_count + 1)])
    return (inds[None, :] - p_s_x[:, None]) * sol.e_star[t][:, None]


def condition_f_residual(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    model: PropensityModel,
    t: int,
    coordinate: int = 0,
) -> float:
    """Weighted least-squares distance of eps_t to the score span.

    Minimizes || c' [S_1 .. S_J](x) - eps_t(x) || in L2(F_X)^J over the
    model's parameter directions c, stacking the J coordinates with the
    point masses as weights. Returns the residual norm (not squared).
    """
    target = epsilon_bar(dgp, subpopulation, family, t, coordinate)
    scores = model.score_tensor()  # (M, d_gamma, J+1)
    weights = np.sqrt(np.asarray(dgp.support.probs, dtype=float))
    j_count = dgp.treatments.count_j
    design = np.concatenate(
        [weights[:, None] * scores[:, :, j] for j in range(1, j_count + 1)],
        axis=0,
    )
    rhs = np.concatenate(
        [weights * target[:, j - 1] for j in range(1, j_count + 1)]
    )
    coeffs, _, _, _ = np.linalg.lstsq(design, rhs, rcond=None)
    resid = design @ coeffs - rhs
    return float(np.sqrt(resid @ resid))


@dataclass(frozen=True, eq=False)
class SequencePoint:
    """Everything reported for one level of a refinement sequence."""

    level: int
    d_gamma: int
    bound: np.ndarray
    second_moment: np.ndarray
    residuals: np.ndarray  # (J+1,) span residual per moment row
    residual_max: float
    h_distance_sq: float
    gap_eig: float
    min_propensity: float
    fisher_min_eig: float
    score_rank: int


@dataclass(frozen=True, eq=False)
class BoundCurve:
    kind: str
    subpopulation: tuple[int, ...]
    family: MomentFamily
    points: tuple[SequencePoint, ...]
    bound_unknown: np.ndarray
    second_moment_unknown: np.ndarray

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "subpopulation": list(self.subpopulation),
            "family": {"kind": self.family.kind, "tau": self.family.tau},
            "bound_unknown": self.bound_unknown.tolist(),
            "levels": [
                {
                    "level": p.level,
                    "d_gamma": p.d_gamma,
                    "bound": p.bound.tolist(),
                    "residual_max": p.residual_max,
                    "h_distance_sq": p.h_distance_sq,
                    "gap_eig": p.gap_eig,
                    "min_propensity": p.min_propensity,
                    "fisher_min_eig": p.fisher_min_eig,
                    "score_rank": p.score_rank,
                }
                for p in self.points
            ],
        }


def bound_curve(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    sequence: ModelSequence,
) -> BoundCurve:
    """Per-level parametric bounds with monotonicity asserted.

    Every level must pass the information-rank check; the parametric
    bound must be nondecreasing level to level and never above the
    unknown-regime ceiling, and the Frobenius norm of the remaining
    second-moment gap is checked against the projection residual energy
    at every level. Violations raise NumericAssertionError.
    """
    sol = solve_beta(dgp, subpopulation, family)
    jac = jacobian_matrix(sol)
    free = second_moments_model_free(dgp, subpopulation, family, solution=sol)
    m_unknown = free["unknown"]
    v_unknown = efficiency_bound(jac, m_unknown).matrix

    points = []
    prev_m = None
    n_t = dgp.n_treatments
    for level, model in zip(sequence.levels, sequence.models):
        info = fisher_information(dgp, model)
        info_min = float(np.linalg.eigvalsh(info)[0])
        moments = second_moments(
            dgp, subpopulation, family, model=model, solution=sol
        )
        m_level = moments["parametric"]
        v_level = efficiency_bound(jac, m_level).matrix
        residuals = np.array(
            [
                condition_f_residual(dgp, subpopulation, family, model, t)
                for t in range(n_t)
            ]
        )
        proj = project_huk(
            dgp, subpopulation, family, model=model, solution=sol
        )
        gap_eig = float(np.linalg.eigvalsh(_sym(v_unknown - v_level))[-1])

        if prev_m is not None:
            step = psd_order_margin(prev_m, m_level)
            if step < -MONOTONE_TOL:
                raise NumericAssertionError(
                    f"parametric second moment decreased at level {level}: "
                    f"min eigenvalue {step:.3e}"
                )
        ceiling = psd_order_margin(m_level, m_unknown)
        if ceiling < -MONOTONE_TOL:
            raise NumericAssertionError(
                f"parametric bound exceeds the unknown-regime ceiling at "
                f"level {level}: min eigenvalue {ceiling:.3e}"
            )
        frob = float(np.linalg.norm(m_unknown - m_level, ord="fro"))
        if frob > proj.norm_residual_sq + MONOTONE_TOL:
            raise NumericAssertionError(
                f"Frobenius gap control violated at level {level}: "
                f"{frob:.3e} > {proj.norm_residual_sq:.3e}"
            )
        prev_m = m_level

        weights = np.sqrt(np.asarray(dgp.support.probs, dtype=float))
        scores = model.score_tensor()
        design = np.concatenate(
            [weights[:, None] * scores[:, :, j] for j in range(1, n_t)], axis=0
        )
        points.append(
            SequencePoint(
                level=level,
                d_gamma=model.d_gamma,
                bound=v_level,
                second_moment=m_level,
                residuals=residuals,
                residual_max=float(residuals.max()),
                h_distance_sq=proj.norm_residual_sq,
                gap_eig=gap_eig,
                min_propensity=float(model.prob_matrix().min()),
                fisher_min_eig=info_min,
                score_rank=int(np.linalg.matrix_rank(design)),
            )
        )
    return BoundCurve(
        kind=sequence.kind,
        subpopulation=tuple(sorted(frozenset(int(v) for v in subpopulation))),
        family=family,
        points=tuple(points),
        bound_unknown=v_unknown,
        second_moment_unknown=m_unknown,
    )


@dataclass(frozen=True, eq=False)
class LimitClassification:
    verdict: str  # "attains" | "gap"
    final_residual: float
    final_h_distance_sq: float
    final_gap_eig: float
    residual_sequence: tuple[float, ...]
    h_distance_sequence: tuple[float, ...]
    gap_eig_sequence: tuple[float, ...]
    full_subpopulation: bool = field(default=False)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "final_residual": self.final_residual,
            "final_h_distance_sq": self.final_h_distance_sq,
            "final_gap_eig": self.final_gap_eig,
            "residual_sequence": list(self.residual_sequence),
            "h_distance_sequence": list(self.h_distance_sequence),
            "gap_eig_sequence": list(self.gap_eig_sequence),
            "full_subpopulation": self.full_subpopulation,
        }


def classify_limit(curve: BoundCurve, dgp: Dgp | None = None) -> LimitClassification:
    """Attains-or-gap verdict with the three-criteria equivalence audit.

    The span residual, the middle-term L2 distance, and the bound
    eigenvalue gap at the final level must agree on which side of the
    attainment threshold they fall; disagreement raises a diagnostic
    NumericAssertionError, since the three are equivalent in the limit.
    """
    final = curve.points[-1]
    res = final.residual_max
    hdist = final.h_distance_sq
    gap = final.gap_eig
    verdicts = {
        "span_residual": res <= ATTAIN_TOL,
        "middle_term_distance": hdist <= ATTAIN_TOL,
        "bound_gap": gap <= ATTAIN_TOL,
    }
    if len(set(verdicts.values())) != 1:
        raise NumericAssertionError(
            "limit criteria disagree at the final level: "
            f"residual {res:.3e}, distance {hdist:.3e}, gap {gap:.3e} "
            f"({verdicts})"
        )
    full = len(curve.subpopulation) == len(curve.points[-1].bound)
    return LimitClassification(
        verdict="attains" if verdicts["span_residual"] else "gap",
        final_residual=res,
        final_h_distance_sq=hdist,
        final_gap_eig=gap,
        residual_sequence=tuple(p.residual_max for p in curve.points),
        h_distance_sequence=tuple(p.h_distance_sq for p in curve.points),
        gap_eig_sequence=tuple(p.gap_eig for p in curve.points),
        full_subpopulation=full,
    )

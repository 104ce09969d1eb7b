"""Moment families and the exact solve of the target system."""

import numpy as np
import pytest

from effbound.core import (
    Dgp,
    DiscreteOutcome,
    DiscreteSupport,
    Gaussian,
    TreatmentSet,
)
from effbound.errors import AssumptionError, StructuralError, ValidationError
from effbound.moments import (
    MomentFamily,
    conditional_moment,
    jacobian_matrix,
    solve_beta,
)
from effbound.propensity import StratifiedModel

from oracle import oracle_jacobian, oracle_solution, subpop_list


def test_family_validation():
    MomentFamily(kind="mean")
    MomentFamily(kind="quantile", tau=0.5)
    with pytest.raises(StructuralError):
        MomentFamily(kind="median")
    with pytest.raises(StructuralError):
        MomentFamily(kind="mean", tau=0.5)
    with pytest.raises(StructuralError):
        MomentFamily(kind="quantile")
    with pytest.raises(StructuralError):
        MomentFamily(kind="quantile", tau=1.0)


def test_m_values_shapes():
    y = np.array([-1.0, 0.0, 2.5])
    mean = MomentFamily(kind="mean")
    assert np.allclose(mean.m_values(y, 0.5), y - 0.5)
    quant = MomentFamily(kind="quantile", tau=0.25)
    assert np.allclose(quant.m_values(y, 0.0), [0.75, 0.75, -0.25])


def test_conditional_moment_gaussian_and_discrete():
    mean = MomentFamily(kind="mean")
    quant = MomentFamily(kind="quantile", tau=0.5)
    g = Gaussian(1.0, 2.0)
    assert mean.conditional_moment(g, 0.25) == pytest.approx(0.75)
    assert mean.conditional_variance(g, 0.25) == pytest.approx(4.0)
    assert quant.conditional_moment(g, 1.0) == pytest.approx(0.0)
    assert quant.conditional_variance(g, 1.0) == pytest.approx(0.25)
    d = DiscreteOutcome(values=np.array([0.0, 1.0]), probs=np.array([0.3, 0.7]))
    assert mean.conditional_moment(d, 0.0) == pytest.approx(0.7)
    assert mean.conditional_variance(d, 0.0) == pytest.approx(0.21)
    assert quant.conditional_moment(d, 0.5) == pytest.approx(-0.2)


def test_mean_solution_matches_oracle(battery):
    family = MomentFamily(kind="mean")
    for dgp in battery[:80]:
        sub = subpop_list(dgp)
        sol = solve_beta(dgp, sub, family)
        ref = oracle_solution(dgp, sub, family)
        assert abs(sol.p_s_star - ref["p_s_star"]) < 1e-14
        assert np.max(np.abs(sol.p_s_x - ref["p_s_x"])) < 1e-14
        assert np.max(np.abs(sol.beta_star - ref["beta"])) < 1e-12
        assert np.max(np.abs(sol.e_star - ref["e"])) < 1e-12
        assert np.max(np.abs(sol.cond_var - ref["var"])) < 1e-12
        assert np.max(np.abs(sol.moment_residuals)) < 1e-12
        assert sol.densities is None
        assert np.allclose(sol.jacobians, -1.0)


def test_quantile_solution_matches_oracle(quantile_battery):
    rng = np.random.default_rng(77)
    for dgp in quantile_battery:
        tau = float(rng.uniform(0.1, 0.9))
        family = MomentFamily(kind="quantile", tau=tau)
        sub = subpop_list(dgp)
        sol = solve_beta(dgp, sub, family)
        ref = oracle_solution(dgp, sub, family)
        assert np.max(np.abs(sol.beta_star - ref["beta"])) < 1e-10
        assert np.max(np.abs(sol.densities - ref["densities"])) < 1e-10
        assert np.max(np.abs(sol.e_star - ref["e"])) < 1e-10
        assert np.max(np.abs(sol.moment_residuals)) <= 1e-12


def test_quantile_weights_sum_to_one(quantile_battery):
    family = MomentFamily(kind="quantile", tau=0.5)
    for dgp in quantile_battery[:10]:
        sol = solve_beta(dgp, subpop_list(dgp), family)
        assert abs(sol.w_s.sum() - 1.0) < 1e-12
        assert np.all(sol.w_s >= 0)


def test_conditional_moment_helper(d1):
    family = MomentFamily(kind="mean")
    # treatment 1 mean at the second point is 2; ATT beta*_1 = 1.6
    assert conditional_moment(d1, family, 1, 1, 1.6) == pytest.approx(0.4)


def test_jacobian_matrix_forms(d1):
    mean_sol = solve_beta(d1, [1], MomentFamily(kind="mean"))
    assert np.allclose(jacobian_matrix(mean_sol), -np.eye(2))
    quant = MomentFamily(kind="quantile", tau=0.5)
    quant_sol = solve_beta(d1, [1], quant)
    jac = jacobian_matrix(quant_sol)
    assert np.allclose(jac, np.diag(quant_sol.densities))
    assert np.allclose(jac, oracle_jacobian(d1, [1], quant))
    assert np.all(np.diag(jac) > 0)


def _two_spike_dgp() -> Dgp:
    # subpopulation outcome is a 50/50 mix of tight spikes at -30 and 30,
    # so the CDF is flat at 1/2 across the whole gap between them
    return Dgp(
        treatments=TreatmentSet(count_j=1, subpopulation=frozenset({1})),
        support=DiscreteSupport(labels=(1, 2), probs=np.array([0.5, 0.5])),
        outcome_table=(
            (Gaussian(-30.0, 0.1), Gaussian(30.0, 0.1)),
            (Gaussian(-30.0, 0.1), Gaussian(30.0, 0.1)),
        ),
        propensity=StratifiedModel(
            partition=np.array([0, 0]), cell_probs=np.array([[0.5]])
        ),
    )


def test_flat_cdf_median_has_rank_deficient_jacobian():
    sol = solve_beta(_two_spike_dgp(), [1], MomentFamily(kind="quantile", tau=0.5))
    with pytest.raises(AssumptionError, match="rank deficient"):
        jacobian_matrix(sol)


def test_extreme_tau_breaks_the_bracket():
    with pytest.raises(AssumptionError, match="bracket"):
        solve_beta(
            _two_spike_dgp(), [1], MomentFamily(kind="quantile", tau=1e-30)
        )


def test_quantile_rejects_laws_without_density(d1):
    dgp = Dgp(
        treatments=d1.treatments,
        support=d1.support,
        outcome_table=(
            d1.outcome_table[0],
            (
                d1.outcome(1, 0),
                DiscreteOutcome(values=np.array([0.0, 1.0]), probs=np.array([0.5, 0.5])),
            ),
        ),
        propensity=d1.propensity,
    )
    with pytest.raises(AssumptionError, match="density"):
        solve_beta(dgp, [1], MomentFamily(kind="quantile", tau=0.5))


def test_zero_subpopulation_mass_is_rejected(d1):
    dgp = Dgp(
        treatments=d1.treatments,
        support=d1.support,
        outcome_table=d1.outcome_table,
        propensity=StratifiedModel(
            partition=np.array([0, 1]), cell_probs=np.array([[0.0, 0.0]])
        ),
    )
    with pytest.raises(AssumptionError, match="p_S"):
        solve_beta(dgp, [1], MomentFamily(kind="mean"))


def test_invalid_subpopulation_is_rejected(d1):
    with pytest.raises(ValidationError):
        solve_beta(d1, [], MomentFamily(kind="mean"))
    with pytest.raises(ValidationError):
        solve_beta(d1, [3], MomentFamily(kind="mean"))


def test_solution_is_reused_consistently(d2):
    # pooled propensity: conditioning on T in S must not reweight X
    sol = solve_beta(d2, [1], MomentFamily(kind="mean"))
    assert np.max(np.abs(sol.w_s - d2.support.probs)) < 1e-15
    assert sol.beta_star[1] == pytest.approx(1.5, abs=1e-14)

"""Release gate: every advertised guarantee asserted at its stated tolerance.

Each test covers one numbered guarantee, so `pytest -v` on this file
reads as a one-line-per-criterion scoreboard.
"""

import time

import numpy as np
import pytest

from effbound.asymptotics import (
    SequenceSpec,
    bound_curve,
    build_sequence,
    classify_limit,
)
from effbound.bounds import (
    REGIMES,
    closed_form_examples,
    compute_bound_report,
    delta0_refinement_limit,
    delta_decomposition,
    project_huk,
    psd_order_margin,
    second_moments,
    woodbury_inverse,
)
from effbound.moments import MomentFamily
from effbound.propensity import NestedPartition, StratifiedModel, TabularModel
from effbound.simulate import mc_verify_bound, variance_study

from conftest import BATTERY_SEED, full_population
from oracle import dense_structured_inverse

MEAN = MomentFamily(kind="mean")
ATT_CONTRAST = np.array([-1.0, 1.0])

MARGIN_KEYS = (
    "M_known_vs_parametric",
    "M_parametric_vs_unknown",
    "V_known_vs_parametric",
    "V_parametric_vs_unknown",
)


@pytest.fixture(scope="module")
def battery_reports(battery):
    return [compute_bound_report(dgp) for dgp in battery]


def test_criterion_01_psd_regime_ordering(battery, battery_reports):
    assert len(battery) >= 200
    for report in battery_reports:
        for key in MARGIN_KEYS:
            assert report.ordering_margins[key] >= -1e-10, key


def test_criterion_02_full_population_ancillarity(battery):
    for dgp in battery:
        full = full_population(dgp)
        sub = full.treatments.subpopulation
        moments = second_moments(full, sub, MEAN)
        gap = np.max(np.abs(moments["unknown"] - moments["known"]))
        assert gap <= 1e-12
        if isinstance(full.propensity, (StratifiedModel, TabularModel)):
            delta0, delta1 = delta_decomposition(full, sub, MEAN)
            assert np.max(np.abs(delta0)) <= 1e-12
            assert np.max(np.abs(delta1)) <= 1e-12


def test_criterion_03_two_route_agreement(battery_reports):
    checked = 0
    for report in battery_reports:
        if report.two_route_residual is not None:
            assert report.two_route_residual <= 1e-10
            checked += 1
    assert checked >= 100  # stratified-heavy battery mix


def test_criterion_04_delta_decomposition_closure(battery_reports, d1, d2):
    closed = 0
    for report in battery_reports:
        if report.delta_closure_residual is not None:
            assert report.delta_closure_residual <= 1e-10
            closed += 1
    assert closed >= 100

    delta0_a, delta1_a = delta_decomposition(d1, [1], MEAN)
    assert np.max(np.abs(delta0_a)) <= 1e-12
    assert abs(delta1_a[1, 1] - 0.2496) <= 1e-10

    delta0_b, delta1_b = delta_decomposition(d2, [1], MEAN)
    assert np.all(delta1_b == 0.0)
    assert abs(delta0_b[1, 1] - 0.25) <= 1e-10


def test_criterion_05_projection_geometry(battery, battery_reports):
    for report in battery_reports:
        assert report.projection.pythagoras_residual <= 1e-10
    for dgp in battery:
        proj = project_huk(
            dgp, dgp.treatments.subpopulation, MEAN, regime="known"
        )
        assert proj.norm_projection_sq == 0.0
        assert proj.norm_residual_sq == proj.norm_unknown_sq


def test_criterion_06_woodbury_identity():
    rng = np.random.default_rng(BATTERY_SEED + 2)
    for _ in range(100):
        j = int(rng.integers(1, 5))
        k = int(rng.integers(1, 5))
        c = rng.uniform(0.2, 3.0, size=(j, k))
        d = rng.uniform(0.2, 3.0, size=k)
        closed = woodbury_inverse(c, d)
        dense = dense_structured_inverse(c, d)
        assert np.max(np.abs(closed - dense)) <= 1e-10


def test_criterion_07_closed_form_examples(d1, d2):
    a = ATT_CONTRAST
    for dgp in (d1, d2):
        ate = closed_form_examples(dgp, [0, 1], MEAN)["V_ATE"]
        report = compute_bound_report(dgp, [0, 1], MEAN)
        assert abs(ate - a @ report.bounds["unknown"] @ a) <= 1e-10
        # full-population bound is regime free
        assert abs(a @ report.bounds["known"] @ a - ate) <= 1e-10

        att = closed_form_examples(dgp, [1], MEAN)["V_ATT"]
        report = compute_bound_report(dgp, [1], MEAN)
        assert abs(att - a @ report.bounds["parametric"] @ a) <= 1e-10

    for tau in (0.25, 0.5, 0.75):
        family = MomentFamily(kind="quantile", tau=tau)
        qtt = closed_form_examples(d1, [1], family)["V_QTT"]
        report = compute_bound_report(d1, [1], family)
        assert abs(qtt - a @ report.bounds["parametric"] @ a) <= 1e-10


def test_criterion_08_limits_attain_when_truth_is_spanned(
    d3, d3_partition, d3_dictionary
):
    for spec, depth in (
        (SequenceSpec(kind="stratified_nested", partition=d3_partition), 4),
        (SequenceSpec(kind="logistic_full", dictionary=d3_dictionary), 16),
    ):
        seq = build_sequence(d3, spec, depth)
        result = classify_limit(bound_curve(d3, [1], MEAN, seq))
        assert result.verdict == "attains"
        assert result.final_residual <= 1e-10
        assert result.final_gap_eig <= 1e-10


def test_criterion_09_limits_gap_when_truth_is_not_spanned(d3, d3_partition, d3_dictionary):
    frozen = NestedPartition.frozen(d3_partition.assignment(1), 4)
    for spec, depth in (
        (SequenceSpec(kind="logistic_degenerate", dictionary=d3_dictionary), 16),
        (SequenceSpec(kind="stratified_nested", partition=frozen), 4),
    ):
        seq = build_sequence(d3, spec, depth)
        result = classify_limit(bound_curve(d3, [1], MEAN, seq))
        assert result.verdict == "gap"
        assert result.final_gap_eig >= 1e-4
        # residuals stay bounded away from zero at every level
        assert min(result.residual_sequence) >= 1e-2
        assert min(result.h_distance_sequence) >= 1e-4
        # the three limit criteria agree on the gap side
        assert result.final_residual >= 1e-2
        assert result.final_h_distance_sq >= 1e-4


def test_criterion_10_refinement_is_monotone(d3, d3_partition, d3_dictionary):
    frozen = NestedPartition.frozen(d3_partition.assignment(1), 4)
    for spec, depth in (
        (SequenceSpec(kind="stratified_nested", partition=d3_partition), 4),
        (SequenceSpec(kind="logistic_full", dictionary=d3_dictionary), 16),
        (SequenceSpec(kind="logistic_degenerate", dictionary=d3_dictionary), 16),
        (SequenceSpec(kind="stratified_nested", partition=frozen), 4),
    ):
        seq = build_sequence(d3, spec, depth)
        curve = bound_curve(d3, [1], MEAN, seq)
        for prev, nxt in zip(curve.points, curve.points[1:]):
            assert psd_order_margin(prev.bound, nxt.bound) >= -1e-10

    assigns = [d3_partition.assignment(level) for level in (1, 2, 3, 4)]
    traces = delta0_refinement_limit(d3, [1], MEAN, assigns)
    for prev, nxt in zip(traces, traces[1:]):
        assert nxt <= prev + 1e-12
    assert traces[0] > 1e-3
    assert traces[-1] <= 1e-12


def test_criterion_11_monte_carlo_matches_exact_bounds(d1, d2):
    start = time.monotonic()
    for dgp in (d1, d2):
        for family in (MEAN, MomentFamily(kind="quantile", tau=0.5)):
            for regime in REGIMES:
                report = mc_verify_bound(
                    dgp,
                    family=family,
                    regime=regime,
                    n=100_000,
                    seed=BATTERY_SEED,
                )
                assert report.passed, (family.kind, regime, report.to_dict())
                assert not report.low_power
    assert time.monotonic() - start <= 60.0


def test_criterion_12_plug_in_variance_tracks_known_bound(d1):
    start = time.monotonic()
    study = variance_study(
        d1,
        contrast=ATT_CONTRAST,
        n=2000,
        reps=1000,
        seed=BATTERY_SEED,
        known_probs=True,
    )
    elapsed = time.monotonic() - start
    target = study.references["known"]
    assert abs(target - (7.0 / 3.0 + 2.2304)) <= 1e-10
    assert abs(study.contrast_variance - target) <= 0.10 * target
    assert elapsed <= 120.0

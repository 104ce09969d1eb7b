"""Shared fixtures: the named example populations and a randomized
battery of small valid DGPs covering every propensity model family."""

from __future__ import annotations

import numpy as np
import pytest

from effbound.core import (
    DiscreteOutcome,
    DiscreteSupport,
    Dgp,
    Gaussian,
    TreatmentSet,
    validate_dgp,
)
from effbound.gallery import (
    binary_pooled,
    binary_two_point,
    grid_dictionary,
    grid_partition,
    grid_two_treatment,
    pooled_refit_model,
)
from effbound.propensity import (
    DegenerateLogisticModel,
    FullRankLogisticModel,
    StratifiedModel,
    TabularModel,
)

BATTERY_SIZE = 220
BATTERY_SEED = 20260819


@pytest.fixture(scope="session")
def d1() -> Dgp:
    return binary_two_point()


@pytest.fixture(scope="session")
def d2() -> Dgp:
    return binary_pooled()


@pytest.fixture(scope="session")
def d2_refit() -> StratifiedModel:
    return pooled_refit_model()


@pytest.fixture(scope="session")
def d3() -> Dgp:
    return grid_two_treatment()


@pytest.fixture(scope="session")
def d3_partition():
    return grid_partition()


@pytest.fixture(scope="session")
def d3_dictionary():
    return grid_dictionary()


def _random_outcomes(rng, n_t: int, m_count: int, gaussian_only: bool):
    rows = []
    for _ in range(n_t):
        laws = []
        for _ in range(m_count):
            if gaussian_only or rng.random() < 0.7:
                laws.append(
                    Gaussian(float(rng.normal(0, 1.5)), float(rng.uniform(0.6, 1.8)))
                )
            else:
                k = int(rng.integers(2, 5))
                values = np.sort(rng.normal(0, 1.2, size=k))
                probs = rng.dirichlet(np.ones(k) * 2.0)
                laws.append(DiscreteOutcome(values=values, probs=probs))
        rows.append(tuple(laws))
    return tuple(rows)


def _random_propensity(rng, kind: str, m_count: int, j_count: int):
    floor_mix = 0.30
    if kind == "stratified":
        k_count = int(rng.integers(1, min(m_count, 4) + 1))
        # surjective assignment: first K points get distinct cells
        assign = np.concatenate(
            [np.arange(k_count), rng.integers(0, k_count, size=m_count - k_count)]
        )
        rng.shuffle(assign)
        cells = np.zeros((j_count, k_count))
        for k in range(k_count):
            full = rng.dirichlet(np.ones(j_count + 1))
            full = (1 - floor_mix) * full + floor_mix / (j_count + 1)
            cells[:, k] = full[1:]
        return StratifiedModel(partition=assign, cell_probs=cells)
    if kind == "tabular":
        probs = np.zeros((m_count, j_count + 1))
        for m in range(m_count):
            full = rng.dirichlet(np.ones(j_count + 1))
            probs[m] = (1 - floor_mix) * full + floor_mix / (j_count + 1)
        return TabularModel(probs=probs)
    n_basis = int(rng.integers(1, min(m_count, 3) + 1))
    dictionary = np.column_stack(
        [np.ones(m_count)]
        + [rng.normal(0, 1.0, size=m_count) for _ in range(n_basis - 1)]
    )
    if kind == "logistic_full":
        coeffs = rng.normal(0, 0.4, size=(n_basis, j_count))
        return FullRankLogisticModel(dictionary=dictionary, coefficients=coeffs)
    coeffs = rng.normal(0, 0.4, size=n_basis)
    return DegenerateLogisticModel(
        dictionary=dictionary, coefficients=coeffs, treatments=j_count
    )


def random_dgp(rng, kind: str | None = None, gaussian_only: bool = False) -> Dgp:
    """One random valid population; redraws until overlap clears 1e-3."""
    kinds = ("stratified", "tabular", "logistic_full", "logistic_degenerate")
    for _ in range(60):
        m_count = int(rng.integers(2, 9))
        j_count = int(rng.integers(1, 4))
        pick = kind if kind is not None else kinds[int(rng.integers(0, len(kinds)))]
        weights = rng.dirichlet(np.ones(m_count) * 3.0)
        weights = 0.8 * weights + 0.2 / m_count
        sub_size = int(rng.integers(1, j_count + 1))
        sub = frozenset(
            int(v) for v in rng.choice(j_count + 1, size=sub_size, replace=False)
        )
        dgp = Dgp(
            treatments=TreatmentSet(count_j=j_count, subpopulation=sub),
            support=DiscreteSupport(
                labels=tuple(range(1, m_count + 1)), probs=weights
            ),
            outcome_table=_random_outcomes(rng, j_count + 1, m_count, gaussian_only),
            propensity=_random_propensity(rng, pick, m_count, j_count),
        )
        if validate_dgp(dgp).overall_pass:
            return dgp
    raise RuntimeError("could not draw a valid random population")


def battery_kind(index: int) -> str:
    # 6:2:2:1 mix, stratified-heavy so the closed-form route gets coverage
    slot = index % 11
    if slot < 6:
        return "stratified"
    if slot < 8:
        return "tabular"
    if slot < 10:
        return "logistic_full"
    return "logistic_degenerate"


@pytest.fixture(scope="session")
def battery() -> list[Dgp]:
    rng = np.random.default_rng(BATTERY_SEED)
    return [
        random_dgp(rng, kind=battery_kind(i)) for i in range(BATTERY_SIZE)
    ]


@pytest.fixture(scope="session")
def quantile_battery() -> list[Dgp]:
    rng = np.random.default_rng(BATTERY_SEED + 1)
    return [random_dgp(rng, gaussian_only=True) for i in range(40)]


def full_population(dgp: Dgp) -> Dgp:
    """Same population retargeted at the full treatment set."""
    j = dgp.treatments.count_j
    return Dgp(
        treatments=TreatmentSet(
            count_j=j, subpopulation=frozenset(range(j + 1))
        ),
        support=dgp.support,
        outcome_table=dgp.outcome_table,
        propensity=dgp.propensity,
    )

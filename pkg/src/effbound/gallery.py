"""Small ready-made populations used by the docs and the test suite.

Each builder returns a fully validated Dgp with hand-checkable moments;
companion helpers expose the partition and basis dictionary that drive
the refinement-sequence examples on the 16-point grid.
"""

from __future__ import annotations

import numpy as np

from .core import DiscreteSupport, Dgp, Gaussian, TreatmentSet
from .propensity import (
    NestedPartition,
    NestedStratifiedModel,
    StratifiedModel,
    gamma_from_cell_probs,
)


def binary_two_point() -> Dgp:
    """Two covariate points, two strata, one treated arm, subpopulation {1}.

    Treated propensity 0.4 and 0.6 across the points; treated means 1
    and 2 against a flat control, all unit-variance Gaussian.
    """
    return Dgp(
        treatments=TreatmentSet(count_j=1, subpopulation=frozenset({1})),
        support=DiscreteSupport(labels=(1, 2), probs=(0.5, 0.5)),
        outcome_table=(
            (Gaussian(0.0, 1.0), Gaussian(0.0, 1.0)),
            (Gaussian(1.0, 1.0), Gaussian(2.0, 1.0)),
        ),
        propensity=StratifiedModel(
            partition=np.array([0, 1]), cell_probs=np.array([[0.4, 0.6]])
        ),
    )


def binary_pooled() -> Dgp:
    """Same outcomes as `binary_two_point` but one stratum at probability 1/2."""
    return Dgp(
        treatments=TreatmentSet(count_j=1, subpopulation=frozenset({1})),
        support=DiscreteSupport(labels=(1, 2), probs=(0.5, 0.5)),
        outcome_table=(
            (Gaussian(0.0, 1.0), Gaussian(0.0, 1.0)),
            (Gaussian(1.0, 1.0), Gaussian(2.0, 1.0)),
        ),
        propensity=StratifiedModel(
            partition=np.array([0, 0]), cell_probs=np.array([[0.5]])
        ),
    )


def pooled_refit_model() -> StratifiedModel:
    """Needlessly split two-stratum refit of the pooled design.

    Evaluates to the same constant 1/2 propensity, so the bounds with it
    as the working model are exact; only the gap decomposition moves.
    """
    return StratifiedModel(
        partition=np.array([0, 1]), cell_probs=np.array([[0.5, 0.5]])
    )


GRID_POINTS = 16
GRID_DEPTH = 4


def grid_partition() -> NestedPartition:
    """Dyadic halving chain over the 16-point grid, four levels deep."""
    return NestedPartition.dyadic(GRID_POINTS, GRID_DEPTH)


def grid_two_treatment() -> Dgp:
    """16 uniform points, two treated arms at constant (0.3, 0.3).

    The treated means separate along different grid directions and the
    scales differ by arm, so no nontrivial structure is shared with the
    flat propensity; subpopulation {1}.
    """
    part = grid_partition()
    cell_probs = np.full((2, 2), 0.3)  # level-1 cells x treatments
    prop = NestedStratifiedModel(
        partition=part,
        level=1,
        gamma=gamma_from_cell_probs(part, 1, cell_probs),
        treatments=2,
    )
    rows = []
    for t in range(3):
        laws = []
        for m in range(1, GRID_POINTS + 1):
            if t == 0:
                laws.append(Gaussian(0.25 * ((m - 1) % 4), 1.0))
            elif t == 1:
                laws.append(Gaussian(m / 4.0, 0.8))
            else:
                laws.append(Gaussian(0.5 * ((m - 1) // 4), 1.2))
        rows.append(tuple(laws))
    return Dgp(
        treatments=TreatmentSet(count_j=2, subpopulation=frozenset({1})),
        support=DiscreteSupport(
            labels=tuple(range(1, GRID_POINTS + 1)),
            probs=tuple([1.0 / GRID_POINTS] * GRID_POINTS),
        ),
        outcome_table=tuple(rows),
        propensity=prop,
    )


def grid_dictionary() -> np.ndarray:
    """Constant column followed by single-point indicators for points 2..16.

    Prefixes of this dictionary give strictly growing spans whose first
    column already contains the grid design's constant log-odds.
    """
    out = np.zeros((GRID_POINTS, GRID_POINTS))
    out[:, 0] = 1.0
    for k in range(1, GRID_POINTS):
        out[k, k] = 1.0
    return out

"""Propensity models on finite support and their score structure.

Four model families share one interface: evaluated probabilities as an
(M, J+1) matrix and scores as an (M, d_gamma, J+1) tensor, where column
j holds the gradient of log p_j(x; gamma) in the model's own parameter
layout. All basis dictionaries are materialized as value matrices at
construction, so models are bound to a specific support size.

Parameter layouts (fixed, documented per family):

* stratified / tabular: treatment-major, cell-minor; coordinate
  (j-1)*K + k holds the free probability of treatment j in cell k.
  Scores satisfy p_j(x) S_j(x) = e_j kron 1{cell(x)} for j >= 1 and
  p_0(x) S_0(x) = -(sum_j e_j) kron 1{cell(x)} exactly.
* full-rank logistic: basis-major, treatment-minor; coordinate
  k*J + (j-1) holds the coefficient of basis k in treatment j's
  utility. The true gradient has cross-treatment entries
  -b_k(x) p_i(x), which is what makes sum_j p_j S_j vanish.
* degenerate logistic: one shared utility for all j >= 1; coordinate k
  is the coefficient of basis k. All score columns j >= 1 coincide, so
  the per-treatment score matrix has rank at most one.
* nested stratified: basis-major over the telescoping indicator basis
  of a nested partition, treatment-minor within each basis function.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    SingularInformationError,
    StructuralError,
    ValidationError,
)

SINGULAR_INFO_TOL = 1e-10
# Nested-partition model probabilities are affine in gamma; tiny negative
# evaluations from float accumulation are tolerated here and left for
# overlap validation to reject.
AFFINE_EVAL_SLACK = 1e-9


class PropensityModel:
    """Shared interface: evaluated probabilities and score tensors."""

    @property
    def n_treatments(self) -> int:  # J
        raise NotImplementedError

    @property
    def n_points(self) -> int:
        raise NotImplementedError

    @property
    def d_gamma(self) -> int:
        raise NotImplementedError

    def prob_matrix(self) -> np.ndarray:
        """(M, J+1) probabilities; column 0 is the residual treatment."""
        raise NotImplementedError

    def score_tensor(self) -> np.ndarray:
        """(M, d_gamma, J+1) gradients of log p_j at every point."""
        raise NotImplementedError


def evaluate(model: PropensityModel, x: int) -> np.ndarray:
    """Probability vector over treatments 0..J at 0-based support index x."""
    return model.prob_matrix()[x]


def score(model: PropensityModel, x: int) -> np.ndarray:
    """(d_gamma, J+1) score matrix at 0-based support index x."""
    return model.score_tensor()[x]


def _check_partition(partition) -> np.ndarray:
    part = np.asarray(partition, dtype=np.int64)
    if part.ndim != 1 or part.size == 0:
        raise StructuralError("partition must be a nonempty vector")
    k = part.max() + 1
    if part.min() < 0 or len(np.unique(part)) != k:
        raise StructuralError(
            "partition cells must be labeled 0..K-1 with every cell nonempty"
        )
    part.setflags(write=False)
    return part


@dataclass(frozen=True, eq=False)
class StratifiedModel(PropensityModel):
    """Piecewise-constant propensities on a partition of the support.

    Parameters
    ----------
    partition : array of int
        0-based stratum index per support point.
    cell_probs : (J, K) array
        Free probabilities of treatments 1..J per stratum; treatment 0
        receives the remainder. Entries may sit on the [0,1] boundary
        (overlap validation rejects them), but not outside it.
    """

    partition: np.ndarray
    cell_probs: np.ndarray

    def __post_init__(self):
        part = _check_partition(self.partition)
        object.__setattr__(self, "partition", part)
        cp = np.asarray(self.cell_probs, dtype=float)
        if cp.ndim != 2:
            raise StructuralError("cell_probs must be a (J, K) matrix")
        if cp.shape[1] != part.max() + 1:
            raise StructuralError(
                f"cell_probs has {cp.shape[1]} columns, partition has "
                f"{part.max() + 1} cells"
            )
        if np.any(cp < 0) or np.any(cp > 1):
            raise StructuralError("cell probabilities must lie in [0, 1]")
        if np.any(cp.sum(axis=0) > 1 + 1e-12):
            raise StructuralError("cell probability columns must sum to <= 1")
        cp.setflags(write=False)
        object.__setattr__(self, "cell_probs", cp)

    @property
    def n_treatments(self) -> int:
        return self.cell_probs.shape[0]

    @property
    def n_points(self) -> int:
        return self.partition.shape[0]

    @property
    def n_strata(self) -> int:
        return self.cell_probs.shape[1]

    @property
    def d_gamma(self) -> int:
        return self.n_treatments * self.n_strata

    def full_cell_probs(self) -> np.ndarray:
        """(J+1, K) matrix including the residual treatment-0 row."""
        p0 = 1.0 - self.cell_probs.sum(axis=0)
        return np.vstack([p0, self.cell_probs])

    def prob_matrix(self) -> np.ndarray:
        return self.full_cell_probs().T[self.partition]

    def score_tensor(self) -> np.ndarray:
        j_count, k_count = self.cell_probs.shape
        full = self.full_cell_probs()
        if np.any(full <= 0):
            bad = np.argwhere(full <= 0)[0]
            raise ValidationError(
                f"stratified score undefined: treatment {bad[0]} in stratum "
                f"{bad[1]} has probability {full[bad[0], bad[1]]!r}"
            )
        m_count = self.n_points
        s = np.zeros((m_count, j_count * k_count, j_count + 1))
        for m in range(m_count):
            k = self.partition[m]
            for j in range(1, j_count + 1):
                coord = (j - 1) * k_count + k
                s[m, coord, j] = 1.0 / full[j, k]
                s[m, coord, 0] = -1.0 / full[0, k]
        return s


@dataclass(frozen=True, eq=False)
class TabularModel(PropensityModel):
    """Free probability table, one row per support point.

    Scored as the saturated model (one parameter per treatment-point
    pair), i.e. a stratified model whose strata are singletons. Its
    parametric tangent space is everything, so the parametric and
    unknown-propensity regimes coincide under this model.
    """

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or p.shape[1] < 2:
            raise StructuralError("tabular probs must be (M, J+1) with J >= 1")
        if np.any(p < 0) or np.any(p > 1):
            raise StructuralError("tabular probabilities must lie in [0, 1]")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise StructuralError("tabular probability rows must sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_treatments(self) -> int:
        return self.probs.shape[1] - 1

    @property
    def n_points(self) -> int:
        return self.probs.shape[0]

    @property
    def d_gamma(self) -> int:
        return self.n_treatments * self.n_points

    def prob_matrix(self) -> np.ndarray:
        return self.probs

    def score_tensor(self) -> np.ndarray:
        return StratifiedModel(
            partition=np.arange(self.n_points), cell_probs=self.probs[:, 1:].T
        ).score_tensor()


def _check_dictionary(dictionary) -> np.ndarray:
    d = np.asarray(dictionary, dtype=float)
    if d.ndim != 2 or d.shape[0] == 0 or d.shape[1] == 0:
        raise StructuralError("dictionary must be an (M, n) value matrix")
    if not np.all(np.isfinite(d)):
        raise StructuralError("dictionary values must be finite")
    d.setflags(write=False)
    return d


@dataclass(frozen=True, eq=False)
class FullRankLogisticModel(PropensityModel):
    """Multinomial logit with per-treatment coefficient columns.

    Utilities are u_j(x) = sum_k Gamma[k, j] b_k(x) with u_0 = 0;
    probabilities come from a stable log-sum-exp softmax.
    """

    dictionary: np.ndarray  # (M, n) basis values
    coefficients: np.ndarray  # (n, J)

    def __post_init__(self):
        d = _check_dictionary(self.dictionary)
        object.__setattr__(self, "dictionary", d)
        g = np.asarray(self.coefficients, dtype=float)
        if g.ndim != 2 or g.shape[0] != d.shape[1] or g.shape[1] < 1:
            raise StructuralError(
                "coefficients must be (n, J) matching the dictionary width"
            )
        g.setflags(write=False)
        object.__setattr__(self, "coefficients", g)

    @property
    def n_treatments(self) -> int:
        return self.coefficients.shape[1]

    @property
    def n_points(self) -> int:
        return self.dictionary.shape[0]

    @property
    def n_basis(self) -> int:
        return self.dictionary.shape[1]

    @property
    def d_gamma(self) -> int:
        return self.n_basis * self.n_treatments

    def prob_matrix(self) -> np.ndarray:
        u = self.dictionary @ self.coefficients  # (M, J)
        z = np.concatenate([np.zeros((u.shape[0], 1)), u], axis=1)
        z -= z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)

    def score_tensor(self) -> np.ndarray:
        p = self.prob_matrix()
        m_count, n = self.dictionary.shape
        j_count = self.n_treatments
        s = np.zeros((m_count, n * j_count, j_count + 1))
        # coordinate k*J + (i-1) differentiates treatment i's utility:
        # d log p_j / d Gamma[k, i] = b_k(x) (1{i == j} - p_i(x))
        for i in range(1, j_count + 1):
            delta = -p[:, i][:, None] + np.eye(j_count + 1)[i][None, :]
            for k in range(n):
                s[:, k * j_count + (i - 1), :] = self.dictionary[:, [k]] * delta
        return s


@dataclass(frozen=True, eq=False)
class DegenerateLogisticModel(PropensityModel):
    """Single shared utility for every nonzero treatment.

    p_j(x) = exp(u(x)) / (1 + J exp(u(x))) for j = 1..J, so all the
    per-treatment scores coincide and the stacked score matrix has rank
    at most one. `n_treatments` is explicit because J does not appear
    in the parameter shapes.

    Fixing J > 1 makes this family unable to separate treatments, which
    is exactly the failure mode it exists to exhibit.
    """

    dictionary: np.ndarray  # (M, n)
    coefficients: np.ndarray  # (n,)
    treatments: int

    def __post_init__(self):
        d = _check_dictionary(self.dictionary)
        object.__setattr__(self, "dictionary", d)
        g = np.asarray(self.coefficients, dtype=float)
        if g.ndim != 1 or g.shape[0] != d.shape[1]:
            raise StructuralError(
                "coefficients must be a vector matching the dictionary width"
            )
        g.setflags(write=False)
        object.__setattr__(self, "coefficients", g)
        if self.treatments < 1:
            raise StructuralError("treatment count must be >= 1")

    @property
    def n_treatments(self) -> int:
        return self.treatments

    @property
    def n_points(self) -> int:
        return self.dictionary.shape[0]

    @property
    def d_gamma(self) -> int:
        return self.dictionary.shape[1]

    def _shared_prob(self) -> np.ndarray:
        u = self.dictionary @ self.coefficients
        # exp(u) / (1 + J exp(u)) computed through logaddexp for stability
        log_denom = np.logaddexp(0.0, np.log(self.treatments) + u)
        return np.exp(u - log_denom)

    def prob_matrix(self) -> np.ndarray:
        pbar = self._shared_prob()
        out = np.tile(pbar[:, None], (1, self.treatments + 1))
        out[:, 0] = 1.0 - self.treatments * pbar
        return out

    def score_tensor(self) -> np.ndarray:
        pbar = self._shared_prob()
        j_count = self.treatments
        # d log p_j / d gamma_k = b_k(x) (1 - J pbar) for j >= 1,
        # and -b_k(x) J pbar for the residual treatment.
        factor = np.concatenate(
            [(-j_count * pbar)[:, None], np.tile((1 - j_count * pbar)[:, None], (1, j_count))],
            axis=1,
        )
        return self.dictionary[:, :, None] * factor[:, None, :]


class NestedPartition:
    """Rooted tree of cells refining a finite support level by level.

    Level-n cells carry index tuples (i_1, ..., i_n); the children of a
    cell partition it, with local child indices starting at 0. Cells
    whose index ends in 0 inherit their parent's free parameter, so the
    telescoping parameterization keeps one parameter block per index
    tuple with nonzero last coordinate.
    """

    def __init__(self, levels):
        levels = [np.asarray(lvl, dtype=np.int64) for lvl in levels]
        if not levels:
            raise StructuralError("nested partition needs at least one level")
        m = levels[0].shape[0]
        if any(lvl.shape != (m,) for lvl in levels):
            raise StructuralError("every level must assign all support points")
        self.n_points = m
        self.depth = len(levels)
        # map raw labels to index tuples; children ordered by first occurrence
        cells: dict[tuple[int, ...], np.ndarray] = {(): np.arange(m)}
        raw_to_tuple_prev = {None: ()}
        assign_prev = np.array([None] * m, dtype=object)
        self._levels: list[list[tuple[int, ...]]] = []
        self._assignments: list[np.ndarray] = []
        for depth_idx, lvl in enumerate(levels, start=1):
            raw_to_tuple: dict[int, tuple[int, ...]] = {}
            child_counter: dict[tuple[int, ...], int] = {}
            assign = np.empty(m, dtype=object)
            for pt in range(m):
                raw = int(lvl[pt])
                if raw not in raw_to_tuple:
                    parent = raw_to_tuple_prev[assign_prev[pt]]
                    local = child_counter.get(parent, 0)
                    child_counter[parent] = local + 1
                    raw_to_tuple[raw] = parent + (local,)
                tup = raw_to_tuple[raw]
                if tup[:-1] != raw_to_tuple_prev[assign_prev[pt]]:
                    raise StructuralError(
                        f"level {depth_idx} is not nested inside level "
                        f"{depth_idx - 1}: cell {raw} crosses parents"
                    )
                assign[pt] = raw
            for raw, tup in raw_to_tuple.items():
                cells[tup] = np.flatnonzero(lvl == raw)
            self._levels.append(sorted(raw_to_tuple.values()))
            self._assignments.append(lvl)
            raw_to_tuple_prev = raw_to_tuple
            assign_prev = assign
        self._cells = cells

    @classmethod
    def dyadic(cls, n_points: int, depth: int) -> "NestedPartition":
        """Contiguous halving partition; requires 2**depth | n_points."""
        if n_points % (2**depth) != 0:
            raise StructuralError(
                f"dyadic partition of depth {depth} needs a multiple of "
                f"{2 ** depth} points"
            )
        idx = np.arange(n_points)
        levels = [idx // (n_points // (2**k)) for k in range(1, depth + 1)]
        return cls(levels)

    @classmethod
    def frozen(cls, base, depth: int) -> "NestedPartition":
        """Partition that stops refining: every level repeats `base`."""
        base = np.asarray(base, dtype=np.int64)
        return cls([base] * depth)

    def level_tuples(self, level: int) -> list[tuple[int, ...]]:
        """Index tuples of the level's cells in lexicographic order."""
        self._check_level(level)
        return list(self._levels[level - 1])

    def tilde_tuples(self, level: int) -> list[tuple[int, ...]]:
        """Cells at this level carrying free parameters (last index != 0)."""
        return [t for t in self.level_tuples(level) if t[-1] != 0]

    def members(self, tup: tuple[int, ...]) -> np.ndarray:
        return self._cells[tup]

    def assignment(self, level: int) -> np.ndarray:
        """0-based cell position (lexicographic) per point at a level."""
        self._check_level(level)
        tuples = self.level_tuples(level)
        pos = {t: i for i, t in enumerate(tuples)}
        out = np.empty(self.n_points, dtype=np.int64)
        for t, i in pos.items():
            out[self._cells[t]] = i
        return out

    def basis_size(self, level: int) -> int:
        self._check_level(level)
        return 1 + sum(len(self.tilde_tuples(k)) for k in range(1, level + 1))

    def basis_matrix(self, level: int) -> np.ndarray:
        """(M, D) telescoping indicator basis: constant 1 then, level by
        level, the membership indicator of every free cell."""
        self._check_level(level)
        cols = [np.ones(self.n_points)]
        for k in range(1, level + 1):
            for tup in self.tilde_tuples(k):
                col = np.zeros(self.n_points)
                col[self._cells[tup]] = 1.0
                cols.append(col)
        return np.column_stack(cols)

    def _check_level(self, level: int):
        if not 1 <= level <= self.depth:
            raise StructuralError(
                f"level {level} outside this partition's depth {self.depth}"
            )


def gamma_from_cell_probs(
    partition: NestedPartition, level: int, cell_probs: np.ndarray
) -> np.ndarray:
    """Invert the telescoping parameterization at a given level.

    Parameters
    ----------
    cell_probs : (n_cells, J) array
        Probability of treatments 1..J per level cell, rows following
        `partition.level_tuples(level)` order.

    Returns
    -------
    gamma : 1-D array of length basis_size(level) * J
        Basis-major layout: the base block, then one block per free
        cell in basis order. This map is a bijection; see
        `cell_probs_from_gamma` for the inverse.
    """
    tuples = partition.level_tuples(level)
    cell_probs = np.asarray(cell_probs, dtype=float)
    if cell_probs.ndim != 2 or cell_probs.shape[0] != len(tuples):
        raise StructuralError(
            f"cell_probs must have {len(tuples)} rows (one per level cell)"
        )
    values = {t: cell_probs[i] for i, t in enumerate(tuples)}
    # the 0-indexed child carries its parent's value upward
    for k in range(level, 0, -1):
        for tup in partition.level_tuples(k):
            if tup[-1] == 0:
                values[tup[:-1]] = values[tup]
    blocks = [values[()]]
    for k in range(1, level + 1):
        for tup in partition.tilde_tuples(k):
            blocks.append(values[tup] - values[tup[:-1]])
    return np.concatenate(blocks)


def cell_probs_from_gamma(
    partition: NestedPartition, level: int, gamma: np.ndarray
) -> np.ndarray:
    """Evaluate the telescoping parameterization into level-cell probs."""
    j_count = _gamma_width(partition, level, gamma)
    blocks = np.asarray(gamma, dtype=float).reshape(-1, j_count)
    values = {(): blocks[0]}
    pos = 1
    for k in range(1, level + 1):
        for tup in partition.level_tuples(k):
            if tup[-1] == 0:
                values[tup] = values[tup[:-1]]
        for tup in partition.tilde_tuples(k):
            values[tup] = values[tup[:-1]] + blocks[pos]
            pos += 1
    return np.vstack([values[t] for t in partition.level_tuples(level)])


def _gamma_width(partition: NestedPartition, level: int, gamma) -> int:
    size = partition.basis_size(level)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 1 or gamma.shape[0] % size != 0:
        raise StructuralError(
            f"gamma length {gamma.shape[0] if gamma.ndim == 1 else gamma.shape} "
            f"is not a multiple of the basis size {size}"
        )
    return gamma.shape[0] // size


@dataclass(frozen=True, eq=False)
class NestedStratifiedModel(PropensityModel):
    """Stratified model written in a nested partition's telescoping basis.

    Probabilities are affine in gamma: p_j(x) = sum_d B[x, d] gamma[d, j]
    with the telescoping indicator basis B. Zero-padding gamma to a
    deeper level leaves the evaluated probabilities unchanged while
    enlarging the score space, which is what refinement sequences use.
    """

    partition: NestedPartition
    level: int
    gamma: np.ndarray
    treatments: int

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        size = self.partition.basis_size(self.level)
        if gamma.shape != (size * self.treatments,):
            raise StructuralError(
                f"gamma must have length {size * self.treatments} at level "
                f"{self.level}, got {gamma.shape}"
            )
        gamma.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        p = self.prob_matrix()
        if np.any(p < -AFFINE_EVAL_SLACK) or np.any(p > 1 + AFFINE_EVAL_SLACK):
            raise StructuralError("gamma evaluates outside [0, 1] probabilities")

    @classmethod
    def from_cell_probs(
        cls, partition: NestedPartition, level: int, cell_probs
    ) -> "NestedStratifiedModel":
        cell_probs = np.asarray(cell_probs, dtype=float)
        gamma = gamma_from_cell_probs(partition, level, cell_probs)
        return cls(
            partition=partition,
            level=level,
            gamma=gamma,
            treatments=cell_probs.shape[1],
        )

    def padded_to(self, level: int) -> "NestedStratifiedModel":
        """Same probabilities expressed at a deeper level (zero padding)."""
        if level < self.level:
            raise StructuralError("can only pad to a deeper level")
        extra = (
            self.partition.basis_size(level) - self.partition.basis_size(self.level)
        ) * self.treatments
        return NestedStratifiedModel(
            partition=self.partition,
            level=level,
            gamma=np.concatenate([self.gamma, np.zeros(extra)]),
            treatments=self.treatments,
        )

    @property
    def n_treatments(self) -> int:
        return self.treatments

    @property
    def n_points(self) -> int:
        return self.partition.n_points

    @property
    def d_gamma(self) -> int:
        return self.partition.basis_size(self.level) * self.treatments

    def prob_matrix(self) -> np.ndarray:
        basis = self.partition.basis_matrix(self.level)
        p_pos = basis @ self.gamma.reshape(-1, self.treatments)
        p0 = 1.0 - p_pos.sum(axis=1)
        return np.concatenate([p0[:, None], p_pos], axis=1)

    def score_tensor(self) -> np.ndarray:
        basis = self.partition.basis_matrix(self.level)
        p = self.prob_matrix()
        if np.any(p <= 0):
            bad = np.argwhere(p <= 0)[0]
            raise ValidationError(
                f"nested stratified score undefined: treatment {bad[1]} at "
                f"point {bad[0] + 1} has probability {p[bad[0], bad[1]]!r}"
            )
        m_count, d = basis.shape
        j_count = self.treatments
        s = np.zeros((m_count, d * j_count, j_count + 1))
        for j in range(1, j_count + 1):
            coords = np.arange(d) * j_count + (j - 1)
            s[:, coords, j] = basis / p[:, [j]]
            s[:, coords, 0] = -basis / p[:, [0]]
        return s


def fisher_information(dgp, model: PropensityModel) -> np.ndarray:
    """Expected outer product of the realized-treatment score.

    E[(sum_j D_j S_j(X))^{\\otimes 2}] evaluated exactly over the support,
    weighting treatments by the model's own probabilities. Raises
    `SingularInformationError` (naming the null direction) when the
    smallest eigenvalue falls below SINGULAR_INFO_TOL.
    """
    weights = np.asarray(dgp.support.probs, dtype=float)
    if weights.shape[0] != model.n_points:
        raise StructuralError("model support size does not match the population")
    probs = model.prob_matrix()
    scores = model.score_tensor()
    info = np.einsum("m,mj,mdj,mej->de", weights, probs, scores, scores)
    info = 0.5 * (info + info.T)
    eigvals, eigvecs = np.linalg.eigh(info)
    if eigvals[0] < SINGULAR_INFO_TOL:
        raise SingularInformationError(float(eigvals[0]), eigvecs[:, 0])
    return info

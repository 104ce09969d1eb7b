"""Monte Carlo verification of the exact bounds.

Sampling is counter-based: a Philox generator keyed by (seed, stream)
assigns one counter block to each record, so record i is the same no
matter how many records are drawn or in what order the streams are
consumed. Three uniform words per record drive the covariate, the
treatment, and the outcome through inverse-CDF transforms.

`mc_verify_bound` checks the sample moments of the efficient influence
values against zero mean and the exact bound matrix. `variance_study`
runs a stratified plug-in estimator across replications and compares
its scaled variance to the exact bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bounds import (
    _as_stratified,
    efficiency_bound,
    eif_linear_map,
    influence_components,
    influence_tables,
    second_moments,
)
from .core import Dgp, ObservationRecord, records_to_arrays
from .errors import EstimationError, ValidationError
from .moments import MomentFamily, jacobian_matrix, solve_beta
from .propensity import PropensityModel

MEAN_Z_LIMIT = 4.0
SECOND_REL_LIMIT = 0.03
LOW_POWER_FRACTION = 0.25

_INV_2_64 = float(2.0**-64)


def _draw_arrays(
    dgp: Dgp, n: int, seed: int, stream: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(x0, t, y) arrays for n records; x0 is 0-based.

    Record i consumes exactly the i-th 4-word Philox block of the
    (seed, stream) keystream, so draws are reproducible per record.
    """
    if n < 1:
        raise ValidationError("sample size must be positive")
    if seed < 0 or stream < 0:
        raise ValidationError("seed and stream must be nonnegative")
    key = np.array([seed, stream], dtype=np.uint64)
    raw = np.random.Philox(key=key).random_raw(4 * n).reshape(n, 4)
    u = (raw[:, :3].astype(np.float64) + 0.5) * _INV_2_64

    point_cdf = np.cumsum(np.asarray(dgp.support.probs, dtype=float))
    x0 = np.searchsorted(point_cdf, u[:, 0], side="left")
    x0 = np.minimum(x0, dgp.n_points - 1).astype(np.int64)

    row_cdf = np.cumsum(dgp.prob_matrix(), axis=1)[x0]
    t = (u[:, 1][:, None] > row_cdf).sum(axis=1)
    t = np.minimum(t, dgp.n_treatments - 1).astype(np.int64)

    y = np.empty(n, dtype=float)
    for j in range(dgp.n_treatments):
        for m in range(dgp.n_points):
            mask = (t == j) & (x0 == m)
            if mask.any():
                y[mask] = dgp.outcome(j, m).from_uniform(u[mask, 2])
    return x0, t, y


def draw_sample(
    dgp: Dgp, n: int, seed: int, stream: int = 0
) -> list[ObservationRecord]:
    x0, t, y = _draw_arrays(dgp, n, seed, stream)
    return [
        ObservationRecord(y=float(y[i]), t=int(t[i]), x=int(x0[i]) + 1)
        for i in range(n)
    ]


def influence_values(
    dgp: Dgp,
    subpopulation,
    family: MomentFamily,
    regime: str,
    x0: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    model: PropensityModel | None = None,
) -> np.ndarray:
    """(n, J+1) efficient influence values at the sampled records."""
    sol = solve_beta(dgp, subpopulation, family)
    spec = influence_components(
        dgp, subpopulation, family, model=model, regime=regime, solution=sol
    )
    jac = jacobian_matrix(sol)
    m_mat = second_moments(
        dgp, subpopulation, family, model=spec.model, solution=sol
    )[regime]
    lmap = eif_linear_map(jac, m_mat)
    base, s_coef = influence_tables(spec)

    f = base[x0, t, :].copy()  # (n, J+1)
    resid = np.empty(len(y), dtype=float)
    for j in range(dgp.n_treatments):
        mask = t == j
        if mask.any():
            resid[mask] = family.m_values(y[mask], float(sol.beta_star[j]))
    resid = resid - sol.e_star[t, x0]
    f[np.arange(len(t)), t] += s_coef[x0, t] * resid
    return f @ lmap.T


@dataclass(frozen=True, eq=False)
class McReport:
    """Sample-vs-exact comparison for one regime."""

    regime: str
    n: int
    seed: int
    bound: np.ndarray
    psi_mean: np.ndarray
    psi_mean_se: np.ndarray
    second_moment_hat: np.ndarray
    second_moment_se: np.ndarray
    mean_ok: bool
    second_ok: bool
    passed: bool
    low_power: bool
    max_mean_z: float
    max_second_z: float

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "n": self.n,
            "seed": self.seed,
            "bound": self.bound.tolist(),
            "psi_mean": self.psi_mean.tolist(),
            "psi_mean_se": self.psi_mean_se.tolist(),
            "second_moment_hat": self.second_moment_hat.tolist(),
            "second_moment_se": self.second_moment_se.tolist(),
            "mean_ok": self.mean_ok,
            "second_ok": self.second_ok,
            "passed": self.passed,
            "low_power": self.low_power,
            "max_mean_z": self.max_mean_z,
            "max_second_z": self.max_second_z,
        }


def mc_verify_bound(
    dgp: Dgp,
    subpopulation=None,
    family: MomentFamily | None = None,
    regime: str = "known",
    n: int = 100_000,
    seed: int = 20260819,
    stream: int = 0,
    model: PropensityModel | None = None,
) -> McReport:
    """Draw a sample and test the influence-value moments.

    The sample mean of each influence coordinate must sit within 4
    standard errors of zero, and each entry of the sample second-moment
    matrix within max(4 standard errors, 3% relative) of the exact bound
    for the requested regime. Failures set `passed=False` rather than
    raising; `low_power` flags runs whose standard errors are too wide
    to certify anything.
    """
    if subpopulation is None:
        subpopulation = dgp.treatments.subpopulation
    if family is None:
        family = MomentFamily("mean")
    sol = solve_beta(dgp, subpopulation, family)
    jac = jacobian_matrix(sol)
    m_mat = second_moments(dgp, subpopulation, family, model=model, solution=sol)[
        regime
    ]
    bound = efficiency_bound(jac, m_mat).matrix

    x0, t, y = _draw_arrays(dgp, n, seed, stream)
    psi = influence_values(
        dgp, subpopulation, family, regime, x0, t, y, model=model
    )

    mean = psi.mean(axis=0)
    mean_se = psi.std(axis=0, ddof=1) / np.sqrt(n)
    mean_z = np.abs(mean) / np.where(mean_se > 0, mean_se, np.inf)

    prods = psi[:, :, None] * psi[:, None, :]  # (n, J+1, J+1)
    second_hat = prods.mean(axis=0)
    second_se = prods.std(axis=0, ddof=1) / np.sqrt(n)
    second_err = np.abs(second_hat - bound)
    second_tol = np.maximum(MEAN_Z_LIMIT * second_se, SECOND_REL_LIMIT * np.abs(bound))
    second_z = second_err / np.where(second_se > 0, second_se, np.inf)

    mean_ok = bool(np.all(mean_z <= MEAN_Z_LIMIT))
    second_ok = bool(np.all(second_err <= second_tol))
    diag_scale = float(np.mean(np.diag(bound)))
    low_power = bool(
        MEAN_Z_LIMIT * float(second_se.max()) > LOW_POWER_FRACTION * diag_scale
    ) if diag_scale > 0 else False
    return McReport(
        regime=regime,
        n=n,
        seed=seed,
        bound=bound,
        psi_mean=mean,
        psi_mean_se=mean_se,
        second_moment_hat=second_hat,
        second_moment_se=second_se,
        mean_ok=mean_ok,
        second_ok=second_ok,
        passed=mean_ok and second_ok,
        low_power=low_power,
        max_mean_z=float(mean_z.max()),
        max_second_z=float(second_z.max()),
    )


def _plugin_from_arrays(
    dgp: Dgp,
    x0: np.ndarray,
    t: np.ndarray,
    y: np.ndarray,
    subpopulation,
    known_probs: bool,
) -> np.ndarray:
    strat = _as_stratified(dgp.propensity)
    if strat is None:
        raise ValidationError(
            "the plug-in estimator needs a stratified-type propensity"
        )
    assign, cell_probs = strat
    sub = sorted(frozenset(int(v) for v in subpopulation))
    k_count = cell_probs.shape[1]
    n = len(x0)
    cells = assign[x0]

    n_t = dgp.n_treatments
    cell_mass = np.zeros(k_count)
    ybar = np.zeros((n_t, k_count))
    for k in range(k_count):
        in_k = cells == k
        cell_mass[k] = in_k.sum() / n
        for j in range(n_t):
            sel = in_k & (t == j)
            count = int(sel.sum())
            if count == 0:
                raise EstimationError(
                    f"no observations for treatment {j} in stratum {k}"
                )
            ybar[j, k] = y[sel].mean()

    if known_probs:
        p_s_cell = cell_probs[sub, :].sum(axis=0)
    else:
        p_s_cell = np.zeros(k_count)
        for k in range(k_count):
            in_k = cells == k
            p_s_cell[k] = np.isin(t[in_k], sub).mean()
    weights = cell_mass * p_s_cell
    total = weights.sum()
    if total <= 0:
        raise EstimationError("estimated subpopulation mass is zero")
    weights = weights / total
    return ybar @ weights


def stratified_plugin_estimator(
    dgp: Dgp,
    records,
    subpopulation=None,
    known_probs: bool = True,
) -> np.ndarray:
    """Weighted within-stratum means, one estimate per treatment arm.

    Strata come from the data-generating propensity, which must be
    stratified-type. Weights are the stratum shares of the target
    subpopulation, with stratum treatment probabilities taken as known
    or re-estimated from the sample. Empty (treatment, stratum) cells
    are an estimation error.
    """
    if subpopulation is None:
        subpopulation = dgp.treatments.subpopulation
    y, t, x0 = records_to_arrays(records)
    return _plugin_from_arrays(dgp, x0, t, y, subpopulation, known_probs)


@dataclass(frozen=True, eq=False)
class VarianceStudy:
    """Replication study of the plug-in estimator against the bounds."""

    n: int
    reps: int
    seed: int
    known_probs: bool
    contrast: np.ndarray
    estimate_mean: np.ndarray
    scaled_cov: np.ndarray
    contrast_variance: float
    contrast_variance_se: float
    references: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "known_probs": self.known_probs,
            "contrast": self.contrast.tolist(),
            "estimate_mean": self.estimate_mean.tolist(),
            "scaled_cov": self.scaled_cov.tolist(),
            "contrast_variance": self.contrast_variance,
            "contrast_variance_se": self.contrast_variance_se,
            "references": dict(self.references),
        }


def variance_study(
    dgp: Dgp,
    subpopulation=None,
    contrast: np.ndarray | None = None,
    n: int = 2000,
    reps: int = 1000,
    seed: int = 20260819,
    known_probs: bool = True,
    bootstrap: int = 500,
) -> VarianceStudy:
    """n-scaled sampling variance of the plug-in vs the exact bounds.

    Replication r draws stream r+1 of the seed's keystream. The report
    carries the scaled covariance of the estimates, the variance of the
    requested contrast with a bootstrap standard error, and the exact
    quadratic forms under all three regimes for comparison.
    """
    if subpopulation is None:
        subpopulation = dgp.treatments.subpopulation
    family = MomentFamily("mean")
    n_t = dgp.n_treatments
    if contrast is None:
        contrast = np.zeros(n_t)
        contrast[-1] = 1.0
    contrast = np.asarray(contrast, dtype=float)

    estimates = np.empty((reps, n_t))
    for r in range(reps):
        x0, t, y = _draw_arrays(dgp, n, seed, stream=r + 1)
        estimates[r] = _plugin_from_arrays(
            dgp, x0, t, y, subpopulation, known_probs
        )

    scaled_cov = n * np.cov(estimates, rowvar=False)
    values = estimates @ contrast
    contrast_var = float(n * values.var(ddof=1))

    boot_gen = np.random.Generator(
        np.random.Philox(key=np.array([seed, 0], dtype=np.uint64))
    )
    boot = np.empty(bootstrap)
    for b in range(bootstrap):
        idx = boot_gen.integers(0, reps, size=reps)
        boot[b] = n * values[idx].var(ddof=1)
    contrast_var_se = float(boot.std(ddof=1))

    sol = solve_beta(dgp, subpopulation, family)
    jac = jacobian_matrix(sol)
    mats = second_moments(dgp, subpopulation, family, solution=sol)
    references = {
        regime: float(contrast @ efficiency_bound(jac, mats[regime]).matrix @ contrast)
        for regime in ("known", "parametric", "unknown")
    }
    return VarianceStudy(
        n=n,
        reps=reps,
        seed=seed,
        known_probs=known_probs,
        contrast=contrast,
        estimate_mean=estimates.mean(axis=0),
        scaled_cov=np.atleast_2d(scaled_cov),
        contrast_variance=contrast_var,
        contrast_variance_se=contrast_var_se,
        references=references,
    )

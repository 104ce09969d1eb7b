"""Exact semiparametric efficiency bounds for multivalued treatments
on finite-support populations, under known, parametrically modeled, and
unrestricted assignment probabilities.

Submodules are imported lazily so the command-line entry point can cap
BLAS threads before any numerical library loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    # errors
    "EffboundError": "errors",
    "SchemaError": "errors",
    "StructuralError": "errors",
    "ValidationError": "errors",
    "AssumptionError": "errors",
    "SingularInformationError": "errors",
    "NumericAssertionError": "errors",
    "EstimationError": "errors",
    # core
    "TreatmentSet": "core",
    "DiscreteSupport": "core",
    "OutcomeLaw": "core",
    "Gaussian": "core",
    "DiscreteOutcome": "core",
    "ObservationRecord": "core",
    "Dgp": "core",
    "ValidationReport": "core",
    "validate_dgp": "core",
    "marginal_ps": "core",
    "records_to_arrays": "core",
    # propensity
    "PropensityModel": "propensity",
    "StratifiedModel": "propensity",
    "TabularModel": "propensity",
    "FullRankLogisticModel": "propensity",
    "DegenerateLogisticModel": "propensity",
    "NestedPartition": "propensity",
    "NestedStratifiedModel": "propensity",
    "gamma_from_cell_probs": "propensity",
    "cell_probs_from_gamma": "propensity",
    "fisher_information": "propensity",
    # moments
    "MomentFamily": "moments",
    "MomentSolution": "moments",
    "solve_beta": "moments",
    "jacobian_matrix": "moments",
    # bounds
    "InfluenceSpec": "bounds",
    "influence_components": "bounds",
    "second_moments": "bounds",
    "second_moments_model_free": "bounds",
    "efficiency_bound": "bounds",
    "eif_linear_map": "bounds",
    "influence_tables": "bounds",
    "eif_evaluate": "bounds",
    "eif_population_moments": "bounds",
    "project_huk": "bounds",
    "psd_order_margin": "bounds",
    "delta_decomposition": "bounds",
    "delta0_refinement_limit": "bounds",
    "woodbury_inverse": "bounds",
    "BoundReport": "bounds",
    "compute_bound_report": "bounds",
    "stratified_bound_closed_form": "bounds",
    "closed_form_examples": "bounds",
    # asymptotics
    "SequenceSpec": "asymptotics",
    "ModelSequence": "asymptotics",
    "build_sequence": "asymptotics",
    "epsilon_bar": "asymptotics",
    "condition_f_residual": "asymptotics",
    "BoundCurve": "asymptotics",
    "bound_curve": "asymptotics",
    "LimitClassification": "asymptotics",
    "classify_limit": "asymptotics",
    # simulate
    "draw_sample": "simulate",
    "influence_values": "simulate",
    "McReport": "simulate",
    "mc_verify_bound": "simulate",
    "stratified_plugin_estimator": "simulate",
    "VarianceStudy": "simulate",
    "variance_study": "simulate",
    # serialize
    "dgp_from_dict": "serialize",
    "dgp_to_dict": "serialize",
    "moment_from_dict": "serialize",
    "sequence_spec_from_dict": "serialize",
    "json_dumps": "serialize",
    "csv_dumps": "serialize",
    "write_report": "serialize",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return __all__

"""Command-line interface.

Five tasks, one JSON config each:

  bound      exact efficiency bounds under the three regimes
  decompose  stratified gap split into within/between variance sources
  sequence   parametric bounds along a refinement sequence, with verdict
  simulate   Monte Carlo check of the bounds or the plug-in estimator
  validate   overlap / coherence diagnostics for a population config

Reports are deterministic JSON or CSV; unless --no-figures is given, a
PNG figure lands next to the report. Exit codes: 0 success, 1 malformed
config, 2 failed validation or assumption, 3 internal numeric identity
failure, 4 simulation check failure.

Thread caps (--threads or EFFBOUND_THREADS) are applied to the BLAS
environment before numerical modules load, which is why the heavyweight
imports in this module happen inside `main`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_SCHEMA = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_MC = 4

DEFAULT_SEED = 20260819
THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; 2 means validation failure here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_SCHEMA)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="effbound", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="task", required=True, metavar="task")

    def add_task(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument(
            "--out",
            default=None,
            help="report path (default: <config stem>.<task>.<format>)",
        )
        p.add_argument("--format", choices=("json", "csv"), default="json")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="BLAS thread cap (default: EFFBOUND_THREADS or library default)",
        )
        p.add_argument(
            "--no-figures",
            action="store_true",
            help="skip the PNG figure next to the report",
        )
        return p

    add_task("bound", "exact bounds under known/parametric/unknown regimes")
    add_task("decompose", "within/between-stratum split of the bound gap")
    seq = add_task("sequence", "bounds along a refinement sequence")
    seq.add_argument(
        "--max-depth",
        type=int,
        default=None,
        help="deepest level to use (default: every level the config provides)",
    )
    add_task("simulate", "Monte Carlo verification")
    val = add_task("validate", "overlap and coherence checks")
    val.add_argument(
        "--p-min",
        type=float,
        default=1e-3,
        help="overlap floor every assignment probability must clear",
    )
    return parser


def _apply_threads(threads: int | None):
    if threads is None:
        env = os.environ.get("EFFBOUND_THREADS")
        if env is None:
            return
        try:
            threads = int(env)
        except ValueError:
            print(
                f"effbound: ignoring non-integer EFFBOUND_THREADS={env!r}",
                file=sys.stderr,
            )
            return
    if threads < 1:
        print("effbound: thread cap must be >= 1, ignoring", file=sys.stderr)
        return
    for name in THREAD_ENV_VARS:
        os.environ[name] = str(threads)


def _load_config(path: str) -> dict:
    from .errors import SchemaError

    try:
        with open(path, encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise SchemaError("", f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError("", f"config is not valid JSON: {exc}") from exc


def _default_out(config_path: str, task: str, fmt: str) -> str:
    stem = os.path.splitext(config_path)[0]
    return f"{stem}.{task}.{fmt}"


def _run_bound(cfg: dict, args) -> tuple[dict, int, object]:
    from .bounds import compute_bound_report
    from .serialize import dgp_from_dict, moment_from_dict

    dgp = dgp_from_dict(cfg.get("dgp", cfg))
    family = moment_from_dict(cfg.get("moment"))
    centered = cfg.get("centered", True)
    report = compute_bound_report(dgp, family=family, centered=bool(centered))
    return report.to_dict(), EXIT_OK, report


def _run_decompose(cfg: dict, args) -> tuple[dict, int, object]:
    from .bounds import (
        delta0_refinement_limit,
        delta_decomposition,
        second_moments_model_free,
    )
    from .errors import SchemaError
    from .serialize import dgp_from_dict, moment_from_dict

    dgp = dgp_from_dict(cfg.get("dgp", cfg))
    family = moment_from_dict(cfg.get("moment"))
    sub = dgp.treatments.subpopulation
    delta0, delta1 = delta_decomposition(dgp, sub, family)
    free = second_moments_model_free(dgp, sub, family)
    gap = free["unknown"] - free["known"]
    closure = float(abs(gap - delta0 - delta1).max())
    payload = {
        "subpopulation": sorted(sub),
        "family": {"kind": family.kind, "tau": family.tau},
        "delta0": delta0.tolist(),
        "delta1": delta1.tolist(),
        "gap_total": gap.tolist(),
        "closure_residual": closure,
    }
    refinement = cfg.get("refinement")
    if refinement is not None:
        if not isinstance(refinement, dict) or "levels" not in refinement:
            raise SchemaError("refinement.levels", "missing required key")
        levels = refinement["levels"]
        if not isinstance(levels, list) or not levels:
            raise SchemaError("refinement.levels", "expected a nonempty array")
        assigns = []
        for i, level in enumerate(levels):
            if not isinstance(level, list) or len(level) != dgp.n_points:
                raise SchemaError(
                    f"refinement.levels[{i}]",
                    f"expected {dgp.n_points} cell labels",
                )
            assigns.append([int(v) - 1 for v in level])
        payload["refinement_traces"] = delta0_refinement_limit(
            dgp, sub, family, assigns
        )
    return payload, EXIT_OK, None


def _run_sequence(cfg: dict, args) -> tuple[dict, int, object]:
    from .asymptotics import bound_curve, build_sequence, classify_limit
    from .errors import SchemaError
    from .serialize import dgp_from_dict, moment_from_dict, sequence_spec_from_dict

    dgp = dgp_from_dict(cfg.get("dgp", cfg))
    family = moment_from_dict(cfg.get("moment"))
    if "sequence" not in cfg:
        raise SchemaError("sequence", "missing required key")
    spec = sequence_spec_from_dict(cfg["sequence"], dgp)
    if args.max_depth is not None:
        max_depth = args.max_depth
    elif spec.kind == "stratified_nested":
        max_depth = spec.partition.depth
    else:
        max_depth = spec.dictionary.shape[1]
    sequence = build_sequence(dgp, spec, max_depth)
    curve = bound_curve(dgp, dgp.treatments.subpopulation, family, sequence)
    classification = classify_limit(curve)
    payload = curve.to_dict()
    payload["classification"] = classification.to_dict()
    return payload, EXIT_OK, (curve, classification)


def _run_simulate(cfg: dict, args) -> tuple[dict, int, object]:
    from .errors import SchemaError
    from .serialize import dgp_from_dict, moment_from_dict
    from .simulate import mc_verify_bound, variance_study

    dgp = dgp_from_dict(cfg.get("dgp", cfg))
    family = moment_from_dict(cfg.get("moment"))
    sim_cfg = cfg.get("simulate", {})
    if not isinstance(sim_cfg, dict):
        raise SchemaError("simulate", "expected an object")
    mode = sim_cfg.get("mode", "influence")
    if mode == "influence":
        regime = sim_cfg.get("regime", "known")
        if regime not in ("known", "parametric", "unknown"):
            raise SchemaError("simulate.regime", f"unknown regime {regime!r}")
        report = mc_verify_bound(
            dgp,
            family=family,
            regime=regime,
            n=int(sim_cfg.get("n", 100_000)),
            seed=args.seed,
        )
        code = EXIT_OK if report.passed else EXIT_MC
        return report.to_dict(), code, None
    if mode == "estimator":
        contrast = sim_cfg.get("contrast")
        study = variance_study(
            dgp,
            contrast=None if contrast is None else [float(v) for v in contrast],
            n=int(sim_cfg.get("n", 2000)),
            reps=int(sim_cfg.get("reps", 1000)),
            seed=args.seed,
            known_probs=bool(sim_cfg.get("known_probs", True)),
        )
        return study.to_dict(), EXIT_OK, None
    raise SchemaError("simulate.mode", f"unknown mode {mode!r}")


def _run_validate(cfg: dict, args) -> tuple[dict, int, object]:
    from .core import validate_dgp
    from .serialize import dgp_from_dict

    dgp = dgp_from_dict(cfg.get("dgp", cfg))
    report = validate_dgp(dgp, p_min=args.p_min)
    code = EXIT_OK if report.overall_pass else EXIT_VALIDATION
    return report.to_dict(), code, None


def _render_figure(task: str, payload: dict, handle, fig_path: str):
    from . import figures

    if task == "bound":
        figures.bound_figure(handle, fig_path)
    elif task == "decompose":
        figures.decompose_figure(payload, fig_path)
    elif task == "sequence":
        curve, classification = handle
        figures.sequence_figure(curve, classification, fig_path)
    elif task == "simulate":
        figures.simulate_figure(payload, fig_path)
    else:
        figures.validate_figure(payload, fig_path)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_SCHEMA
    _apply_threads(args.threads)

    from .errors import (
        AssumptionError,
        EstimationError,
        NumericAssertionError,
        SchemaError,
        StructuralError,
        ValidationError,
    )
    from .serialize import write_report

    runners = {
        "bound": _run_bound,
        "decompose": _run_decompose,
        "sequence": _run_sequence,
        "simulate": _run_simulate,
        "validate": _run_validate,
    }
    try:
        cfg = _load_config(args.config)
        payload, code, handle = runners[args.task](cfg, args)
        out = args.out or _default_out(args.config, args.task, args.format)
        write_report(payload, out, args.format)
        print(f"wrote {out}")
        if not args.no_figures:
            fig_path = os.path.splitext(out)[0] + ".png"
            _render_figure(args.task, payload, handle, fig_path)
            print(f"wrote {fig_path}")
    except (SchemaError, StructuralError) as exc:
        print(f"effbound: config error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ValidationError, AssumptionError) as exc:
        print(f"effbound: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericAssertionError as exc:
        print(f"effbound: numeric identity failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except EstimationError as exc:
        print(f"effbound: estimation failure: {exc}", file=sys.stderr)
        return EXIT_MC

    if args.task == "validate":
        print("validation PASS" if code == EXIT_OK else "validation FAIL")
    elif args.task == "simulate" and code == EXIT_MC:
        print("simulation check FAILED", file=sys.stderr)
    elif args.task == "sequence":
        print(f"limit verdict: {payload['classification']['verdict']}")
    return code


if __name__ == "__main__":
    sys.exit(main())

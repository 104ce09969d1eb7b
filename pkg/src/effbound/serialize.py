"""Configuration parsing and deterministic report serialization.

Configs are plain JSON. Support points, strata, and partition cells are
1-based on the wire and 0-based in memory. Reports are emitted with a
fixed layout and floats printed at 17 significant digits, so the same
payload always serializes to the same bytes; files are written to a
temporary name and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile

import numpy as np

from .asymptotics import SequenceSpec
from .core import DiscreteSupport, Dgp, DiscreteOutcome, Gaussian, TreatmentSet
from .errors import SchemaError, StructuralError, ValidationError
from .moments import MomentFamily
from .propensity import (
    DegenerateLogisticModel,
    FullRankLogisticModel,
    NestedPartition,
    NestedStratifiedModel,
    StratifiedModel,
    TabularModel,
    gamma_from_cell_probs,
)

PROPENSITY_KINDS = (
    "stratified",
    "tabular",
    "logistic_full",
    "logistic_degenerate",
    "nested_stratified",
)


def _require(cfg: dict, key: str, path: str):
    if not isinstance(cfg, dict):
        raise SchemaError(path.rstrip("."), "expected an object")
    if key not in cfg:
        raise SchemaError(f"{path}{key}", "missing required key")
    return cfg[key]


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected an integer, got {value!r}")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(path, f"expected a number, got {value!r}")
    return float(value)


def _as_list(value, path: str) -> list:
    if not isinstance(value, list):
        raise SchemaError(path, "expected an array")
    return value


def _number_vector(value, path: str) -> np.ndarray:
    items = _as_list(value, path)
    return np.array(
        [_as_number(v, f"{path}[{i}]") for i, v in enumerate(items)], dtype=float
    )


def _number_matrix(value, path: str) -> np.ndarray:
    rows = _as_list(value, path)
    if not rows:
        raise SchemaError(path, "matrix must not be empty")
    parsed = [_number_vector(row, f"{path}[{i}]") for i, row in enumerate(rows)]
    width = len(parsed[0])
    for i, row in enumerate(parsed):
        if len(row) != width:
            raise SchemaError(f"{path}[{i}]", "ragged matrix rows")
    return np.array(parsed)


def _outcome_from_dict(entry: dict, path: str):
    kind = _require(entry, "kind", f"{path}.")
    params = _require(entry, "params", f"{path}.")
    if not isinstance(params, dict):
        raise SchemaError(f"{path}.params", "expected an object")
    if kind == "gaussian":
        loc = _as_number(_require(params, "loc", f"{path}.params."), f"{path}.params.loc")
        scale = _as_number(
            _require(params, "scale", f"{path}.params."), f"{path}.params.scale"
        )
        try:
            return Gaussian(loc, scale)
        except (ValueError, StructuralError) as exc:
            raise SchemaError(f"{path}.params", str(exc)) from exc
    if kind == "discrete":
        values = _number_vector(
            _require(params, "values", f"{path}.params."), f"{path}.params.values"
        )
        probs = _number_vector(
            _require(params, "probs", f"{path}.params."), f"{path}.params.probs"
        )
        try:
            return DiscreteOutcome(values=values, probs=probs)
        except (ValueError, StructuralError) as exc:
            raise SchemaError(f"{path}.params", str(exc)) from exc
    raise SchemaError(f"{path}.kind", f"unknown outcome kind {kind!r}")


def _partition_vector(value, n_points: int, path: str) -> np.ndarray:
    labels = _as_list(value, path)
    if len(labels) != n_points:
        raise SchemaError(path, f"expected {n_points} cell labels")
    out = np.empty(n_points, dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = _as_int(lab, f"{path}[{i}]")
        if lab < 1:
            raise SchemaError(f"{path}[{i}]", "cell labels are 1-based")
        out[i] = lab - 1
    k_count = int(out.max()) + 1
    missing = set(range(k_count)) - set(out.tolist())
    if missing:
        raise SchemaError(
            path, f"cell labels must cover 1..K; missing {sorted(m + 1 for m in missing)}"
        )
    return out


def _propensity_from_dict(cfg: dict, n_points: int, j_count: int, path: str):
    kind = _require(cfg, "kind", f"{path}.")
    if kind not in PROPENSITY_KINDS:
        raise SchemaError(f"{path}.kind", f"unknown propensity kind {kind!r}")
    try:
        if kind == "stratified":
            partition = _partition_vector(
                _require(cfg, "partition", f"{path}."), n_points, f"{path}.partition"
            )
            cell_probs = _number_matrix(
                _require(cfg, "cell_probs", f"{path}."), f"{path}.cell_probs"
            )
            if cell_probs.shape != (int(partition.max()) + 1, j_count):
                raise SchemaError(
                    f"{path}.cell_probs",
                    f"expected shape ({int(partition.max()) + 1}, {j_count}): "
                    "one row per cell, one column per treated arm",
                )
            return StratifiedModel(partition=partition, cell_probs=cell_probs.T)
        if kind == "tabular":
            probs = _number_matrix(_require(cfg, "probs", f"{path}."), f"{path}.probs")
            if probs.shape != (n_points, j_count + 1):
                raise SchemaError(
                    f"{path}.probs",
                    f"expected shape ({n_points}, {j_count + 1})",
                )
            return TabularModel(probs=probs)
        if kind == "logistic_full":
            dictionary = _number_matrix(
                _require(cfg, "dictionary", f"{path}."), f"{path}.dictionary"
            )
            coefficients = _number_matrix(
                _require(cfg, "coefficients", f"{path}."), f"{path}.coefficients"
            )
            if dictionary.shape[0] != n_points:
                raise SchemaError(
                    f"{path}.dictionary", f"expected {n_points} rows"
                )
            if coefficients.shape != (dictionary.shape[1], j_count):
                raise SchemaError(
                    f"{path}.coefficients",
                    f"expected shape ({dictionary.shape[1]}, {j_count})",
                )
            return FullRankLogisticModel(
                dictionary=dictionary, coefficients=coefficients
            )
        if kind == "logistic_degenerate":
            dictionary = _number_matrix(
                _require(cfg, "dictionary", f"{path}."), f"{path}.dictionary"
            )
            coefficients = _number_vector(
                _require(cfg, "coefficients", f"{path}."), f"{path}.coefficients"
            )
            if dictionary.shape[0] != n_points:
                raise SchemaError(
                    f"{path}.dictionary", f"expected {n_points} rows"
                )
            if coefficients.shape != (dictionary.shape[1],):
                raise SchemaError(
                    f"{path}.coefficients",
                    f"expected {dictionary.shape[1]} entries",
                )
            return DegenerateLogisticModel(
                dictionary=dictionary,
                coefficients=coefficients,
                treatments=j_count,
            )
        # nested_stratified
        levels_cfg = _as_list(_require(cfg, "levels", f"{path}."), f"{path}.levels")
        levels = [
            _partition_vector(lv, n_points, f"{path}.levels[{i}]")
            for i, lv in enumerate(levels_cfg)
        ]
        partition = NestedPartition(levels=levels)
        level = _as_int(_require(cfg, "level", f"{path}."), f"{path}.level")
        if not 1 <= level <= partition.depth:
            raise SchemaError(
                f"{path}.level", f"level must be in 1..{partition.depth}"
            )
        cell_probs = _number_matrix(
            _require(cfg, "cell_probs", f"{path}."), f"{path}.cell_probs"
        )
        k_count = int(partition.assignment(level).max()) + 1
        if cell_probs.shape != (k_count, j_count):
            raise SchemaError(
                f"{path}.cell_probs", f"expected shape ({k_count}, {j_count})"
            )
        return NestedStratifiedModel(
            partition=partition,
            level=level,
            gamma=gamma_from_cell_probs(partition, level, cell_probs),
            treatments=j_count,
        )
    except SchemaError:
        raise
    except (TypeError, ValueError, StructuralError) as exc:
        raise SchemaError(path, str(exc)) from exc


def dgp_from_dict(cfg: dict) -> Dgp:
    """Build a population from its JSON form; key paths name what failed."""
    if not isinstance(cfg, dict):
        raise SchemaError("", "top-level config must be an object")
    j_count = _as_int(_require(cfg, "treatments", ""), "treatments")
    if j_count < 1:
        raise SchemaError("treatments", "need at least one treated arm")

    sub_raw = _as_list(_require(cfg, "subpopulation", ""), "subpopulation")
    sub = set()
    for i, v in enumerate(sub_raw):
        v = _as_int(v, f"subpopulation[{i}]")
        if not 0 <= v <= j_count:
            raise SchemaError(
                f"subpopulation[{i}]", f"treatment values run 0..{j_count}"
            )
        sub.add(v)
    if not sub:
        raise SchemaError("subpopulation", "must not be empty")

    support_raw = _as_list(_require(cfg, "support", ""), "support")
    if not support_raw:
        raise SchemaError("support", "must not be empty")
    labels = []
    probs = []
    embeddings = []
    for i, entry in enumerate(support_raw):
        if not isinstance(entry, dict):
            raise SchemaError(f"support[{i}]", "expected an object")
        label = _as_int(_require(entry, "label", f"support[{i}]."), f"support[{i}].label")
        if label != i + 1:
            raise SchemaError(
                f"support[{i}].label", f"labels are 1-based positions; expected {i + 1}"
            )
        labels.append(label)
        probs.append(
            _as_number(_require(entry, "prob", f"support[{i}]."), f"support[{i}].prob")
        )
        if "embedding" in entry:
            embeddings.append(_number_vector(entry["embedding"], f"support[{i}].embedding"))
    if embeddings:
        if len(embeddings) != len(support_raw):
            raise SchemaError(
                "support", "either all points carry an embedding or none"
            )
        widths = {len(e) for e in embeddings}
        if len(widths) != 1:
            raise SchemaError("support", "embeddings must share one dimension")

    outcomes_raw = _as_list(_require(cfg, "outcomes", ""), "outcomes")
    n_points = len(support_raw)
    table: list[list] = [[None] * n_points for _ in range(j_count + 1)]
    for i, entry in enumerate(outcomes_raw):
        if not isinstance(entry, dict):
            raise SchemaError(f"outcomes[{i}]", "expected an object")
        t = _as_int(_require(entry, "t", f"outcomes[{i}]."), f"outcomes[{i}].t")
        x = _as_int(_require(entry, "x", f"outcomes[{i}]."), f"outcomes[{i}].x")
        if not 0 <= t <= j_count:
            raise SchemaError(f"outcomes[{i}].t", f"treatment values run 0..{j_count}")
        if not 1 <= x <= n_points:
            raise SchemaError(f"outcomes[{i}].x", f"support labels run 1..{n_points}")
        if table[t][x - 1] is not None:
            raise SchemaError(
                f"outcomes[{i}]", f"duplicate law for treatment {t} at point {x}"
            )
        table[t][x - 1] = _outcome_from_dict(entry, f"outcomes[{i}]")
    for t in range(j_count + 1):
        for m in range(n_points):
            if table[t][m] is None:
                raise SchemaError(
                    "outcomes", f"missing law for treatment {t} at point {m + 1}"
                )

    propensity = _propensity_from_dict(
        _require(cfg, "propensity", ""), n_points, j_count, "propensity"
    )

    try:
        support = DiscreteSupport(
            labels=tuple(labels),
            probs=np.array(probs),
            embeddings=np.array(embeddings) if embeddings else None,
        )
        return Dgp(
            treatments=TreatmentSet(count_j=j_count, subpopulation=frozenset(sub)),
            support=support,
            outcome_table=tuple(tuple(row) for row in table),
            propensity=propensity,
        )
    except (TypeError, ValueError, StructuralError) as exc:
        raise SchemaError("", str(exc)) from exc


def _outcome_to_dict(law) -> dict:
    if isinstance(law, Gaussian):
        return {"kind": "gaussian", "params": {"loc": law.loc, "scale": law.scale}}
    if isinstance(law, DiscreteOutcome):
        return {
            "kind": "discrete",
            "params": {
                "values": np.asarray(law.values).tolist(),
                "probs": np.asarray(law.probs).tolist(),
            },
        }
    raise StructuralError(f"cannot serialize outcome law {type(law).__name__}")


def _propensity_to_dict(model) -> dict:
    if isinstance(model, StratifiedModel):
        return {
            "kind": "stratified",
            "partition": (np.asarray(model.partition) + 1).tolist(),
            "cell_probs": np.asarray(model.cell_probs).T.tolist(),
        }
    if isinstance(model, TabularModel):
        return {"kind": "tabular", "probs": np.asarray(model.probs).tolist()}
    if isinstance(model, FullRankLogisticModel):
        return {
            "kind": "logistic_full",
            "dictionary": np.asarray(model.dictionary).tolist(),
            "coefficients": np.asarray(model.coefficients).tolist(),
        }
    if isinstance(model, DegenerateLogisticModel):
        return {
            "kind": "logistic_degenerate",
            "dictionary": np.asarray(model.dictionary).tolist(),
            "coefficients": np.asarray(model.coefficients).tolist(),
        }
    if isinstance(model, NestedStratifiedModel):
        assign = model.partition.assignment(model.level)
        probs = model.prob_matrix()
        k_count = int(assign.max()) + 1
        cells = [probs[assign == k][0][1:].tolist() for k in range(k_count)]
        return {
            "kind": "nested_stratified",
            "levels": [
                (model.partition.assignment(lv) + 1).tolist()
                for lv in range(1, model.partition.depth + 1)
            ],
            "level": model.level,
            "cell_probs": cells,
        }
    raise StructuralError(f"cannot serialize propensity {type(model).__name__}")


def dgp_to_dict(dgp: Dgp) -> dict:
    """JSON form of a population; inverse of `dgp_from_dict`."""
    support = []
    for i in range(dgp.n_points):
        entry = {"label": i + 1, "prob": float(dgp.support.probs[i])}
        if dgp.support.embeddings is not None:
            entry["embedding"] = np.asarray(dgp.support.embeddings[i]).tolist()
        support.append(entry)
    outcomes = []
    for t in range(dgp.n_treatments):
        for m in range(dgp.n_points):
            entry = {"t": t, "x": m + 1}
            entry.update(_outcome_to_dict(dgp.outcome(t, m)))
            outcomes.append(entry)
    return {
        "treatments": dgp.treatments.count_j,
        "subpopulation": sorted(dgp.treatments.subpopulation),
        "support": support,
        "outcomes": outcomes,
        "propensity": _propensity_to_dict(dgp.propensity),
    }


def moment_from_dict(cfg) -> MomentFamily:
    """Moment family from its JSON form; {'kind': 'mean'} when absent."""
    if cfg is None:
        return MomentFamily("mean")
    if not isinstance(cfg, dict):
        raise SchemaError("moment", "expected an object")
    kind = _require(cfg, "kind", "moment.")
    if kind == "mean":
        if "tau" in cfg:
            raise SchemaError("moment.tau", "mean takes no quantile level")
        return MomentFamily("mean")
    if kind == "quantile":
        tau = _as_number(_require(cfg, "tau", "moment."), "moment.tau")
        if not 0.0 < tau < 1.0:
            raise SchemaError("moment.tau", "quantile level must be inside (0, 1)")
        return MomentFamily("quantile", tau=tau)
    raise SchemaError("moment.kind", f"unknown moment kind {kind!r}")


def sequence_spec_from_dict(cfg: dict, dgp: Dgp) -> SequenceSpec:
    """Refinement-sequence settings from their JSON form."""
    if not isinstance(cfg, dict):
        raise SchemaError("sequence", "expected an object")
    kind = _require(cfg, "kind", "sequence.")
    if kind == "stratified_nested":
        levels_cfg = _as_list(
            _require(cfg, "levels", "sequence."), "sequence.levels"
        )
        levels = [
            _partition_vector(lv, dgp.n_points, f"sequence.levels[{i}]")
            for i, lv in enumerate(levels_cfg)
        ]
        try:
            return SequenceSpec(kind=kind, partition=NestedPartition(levels=levels))
        except (ValueError, StructuralError) as exc:
            raise SchemaError("sequence.levels", str(exc)) from exc
    if kind in ("logistic_full", "logistic_degenerate"):
        dictionary = _number_matrix(
            _require(cfg, "dictionary", "sequence."), "sequence.dictionary"
        )
        if dictionary.shape[0] != dgp.n_points:
            raise SchemaError("sequence.dictionary", f"expected {dgp.n_points} rows")
        return SequenceSpec(kind=kind, dictionary=dictionary)
    raise SchemaError("sequence.kind", f"unknown sequence kind {kind!r}")


def format_float(x: float) -> str:
    """17 significant digits: enough to reproduce the double exactly."""
    if not math.isfinite(x):
        return "null"
    return "%.17g" % x


def _emit(obj, out: list[str], indent: int):
    pad = "  " * indent
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool) or isinstance(obj, np.bool_):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        for i, (key, value) in enumerate(obj.items()):
            out.append(f"{pad}  {json.dumps(str(key))}: ")
            _emit(value, out, indent + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else list(obj)
        if not items:
            out.append("[]")
            return
        flat = all(
            v is None or isinstance(v, (bool, int, float, str, np.integer, np.floating))
            for v in items
        )
        if flat:
            out.append("[")
            for i, value in enumerate(items):
                _emit(value, out, indent)
                if i < len(items) - 1:
                    out.append(", ")
            out.append("]")
        else:
            out.append("[\n")
            for i, value in enumerate(items):
                out.append(pad + "  ")
                _emit(value, out, indent + 1)
                out.append(",\n" if i < len(items) - 1 else "\n")
            out.append(pad + "]")
    else:
        raise StructuralError(f"cannot serialize {type(obj).__name__} to JSON")


def json_dumps(payload) -> str:
    """Deterministic JSON text with floats at 17 significant digits."""
    out: list[str] = []
    _emit(payload, out, 0)
    out.append("\n")
    return "".join(out)


def _flatten(obj, path: str, rows: list):
    if isinstance(obj, dict):
        for key, value in obj.items():
            _flatten(value, f"{path}.{key}" if path else str(key), rows)
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else list(obj)
        is_matrix = items and all(isinstance(v, (list, tuple)) for v in items)
        if is_matrix:
            for i, row in enumerate(items):
                for j, value in enumerate(row):
                    rows.append((path, str(i), str(j), _csv_value(value)))
        else:
            for i, value in enumerate(items):
                if isinstance(value, dict):
                    _flatten(value, f"{path}[{i}]", rows)
                else:
                    rows.append((path, str(i), "", _csv_value(value)))
    else:
        rows.append((path, "", "", _csv_value(obj)))


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        text = format_float(float(value))
        return "" if text == "null" else text
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def csv_dumps(payload: dict) -> str:
    """One row per scalar; matrices get explicit row and column indices."""
    rows: list = []
    _flatten(payload, "", rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("key", "row", "col", "value"))
    writer.writerows(rows)
    return buf.getvalue()


def write_text_atomic(path: str, text: str):
    """Write via a sibling temp file and rename, so readers never see halves."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-report-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report(payload: dict, path: str, fmt: str):
    if fmt == "json":
        write_text_atomic(path, json_dumps(payload))
    elif fmt == "csv":
        write_text_atomic(path, csv_dumps(payload))
    else:
        raise ValidationError(f"unknown report format {fmt!r}")

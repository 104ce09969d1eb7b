"""Config parsing, report serialization, atomic file writes."""

import json
import math
import os

import numpy as np
import pytest

from effbound.core import DiscreteOutcome, Gaussian
from effbound.errors import SchemaError, ValidationError
from effbound.propensity import (
    DegenerateLogisticModel,
    FullRankLogisticModel,
    NestedStratifiedModel,
    StratifiedModel,
    TabularModel,
)
from effbound.serialize import (
    csv_dumps,
    dgp_from_dict,
    dgp_to_dict,
    format_float,
    json_dumps,
    moment_from_dict,
    sequence_spec_from_dict,
    write_report,
    write_text_atomic,
)

from conftest import full_population


def _assert_same_population(a, b):
    assert a.treatments.count_j == b.treatments.count_j
    assert a.treatments.subpopulation == b.treatments.subpopulation
    assert np.max(np.abs(a.support.probs - b.support.probs)) < 1e-15
    assert np.max(np.abs(a.prob_matrix() - b.prob_matrix())) < 1e-15
    for t in range(a.n_treatments):
        for m in range(a.n_points):
            la, lb = a.outcome(t, m), b.outcome(t, m)
            assert type(la) is type(lb)
            assert la.mean() == pytest.approx(lb.mean(), abs=1e-15)
            assert la.variance() == pytest.approx(lb.variance(), abs=1e-15)


def test_round_trip_fixtures(d1, d2, d3):
    for dgp in (d1, d2, d3):
        clone = dgp_from_dict(dgp_to_dict(dgp))
        _assert_same_population(dgp, clone)
    assert isinstance(
        dgp_from_dict(dgp_to_dict(d3)).propensity, NestedStratifiedModel
    )


def test_round_trip_battery_covers_every_model_kind(battery):
    seen = set()
    for dgp in battery:
        kind = type(dgp.propensity).__name__
        if kind in seen:
            continue
        seen.add(kind)
        clone = dgp_from_dict(dgp_to_dict(dgp))
        _assert_same_population(dgp, clone)
        assert type(clone.propensity) is type(dgp.propensity)
    assert seen == {
        "StratifiedModel",
        "TabularModel",
        "FullRankLogisticModel",
        "DegenerateLogisticModel",
    }


def test_round_trip_preserves_discrete_laws(battery):
    discrete = next(
        d for d in battery
        if any(
            isinstance(d.outcome(t, m), DiscreteOutcome)
            for t in range(d.n_treatments)
            for m in range(d.n_points)
        )
    )
    clone = dgp_from_dict(dgp_to_dict(discrete))
    for t in range(discrete.n_treatments):
        for m in range(discrete.n_points):
            law = discrete.outcome(t, m)
            if isinstance(law, DiscreteOutcome):
                other = clone.outcome(t, m)
                assert np.array_equal(law.values, other.values)
                assert np.array_equal(law.probs, other.probs)


def test_round_trip_keeps_embeddings(d1):
    cfg = dgp_to_dict(d1)
    cfg["support"][0]["embedding"] = [0.0, 1.0]
    cfg["support"][1]["embedding"] = [1.0, -2.5]
    dgp = dgp_from_dict(cfg)
    assert dgp.support.embeddings.shape == (2, 2)
    payload = dgp_to_dict(dgp)
    assert payload["support"][1]["embedding"] == [1.0, -2.5]
    clone = dgp_from_dict(payload)
    assert np.max(np.abs(clone.support.embeddings - dgp.support.embeddings)) < 1e-15
    # all-or-none rule
    cfg["support"][1].pop("embedding")
    with pytest.raises(SchemaError, match="embedding"):
        dgp_from_dict(cfg)


def _schema_error(cfg) -> str:
    with pytest.raises(SchemaError) as err:
        dgp_from_dict(cfg)
    return str(err.value)


def test_schema_errors_name_the_key(d1):
    base = dgp_to_dict(d1)

    cfg = json.loads(json.dumps(base))
    del cfg["treatments"]
    assert "treatments" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["support"][1]["prob"] = "heavy"
    assert "support[1].prob" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["support"][0]["label"] = 7
    assert "support[0].label" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["outcomes"][1]["x"] = 1  # now duplicates entry 0
    assert "outcomes[1]" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["outcomes"] = cfg["outcomes"][:-1]
    assert "missing law" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["propensity"]["cell_probs"] = [[0.4], [0.6], [0.5]]
    assert "propensity" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["subpopulation"] = []
    assert "subpopulation" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["subpopulation"] = [5]
    assert "subpopulation[0]" in _schema_error(cfg)

    cfg = json.loads(json.dumps(base))
    cfg["propensity"]["kind"] = "oracle"
    assert "propensity.kind" in _schema_error(cfg)


def test_construction_failures_become_schema_errors(d1):
    cfg = dgp_to_dict(d1)
    cfg = json.loads(json.dumps(cfg))
    cfg["support"][0]["prob"] = 0.9  # sums past 1
    with pytest.raises(SchemaError):
        dgp_from_dict(cfg)


def test_moment_from_dict():
    assert moment_from_dict(None).kind == "mean"
    assert moment_from_dict({"kind": "mean"}).kind == "mean"
    q = moment_from_dict({"kind": "quantile", "tau": 0.3})
    assert q.tau == pytest.approx(0.3)
    with pytest.raises(SchemaError, match="moment.tau"):
        moment_from_dict({"kind": "mean", "tau": 0.5})
    with pytest.raises(SchemaError, match="moment.tau"):
        moment_from_dict({"kind": "quantile", "tau": 1.5})
    with pytest.raises(SchemaError, match="moment"):
        moment_from_dict({"kind": "mode"})
    with pytest.raises(SchemaError, match="tau"):
        moment_from_dict({"kind": "quantile"})


def test_sequence_spec_from_dict(d3, d3_partition, d3_dictionary):
    levels = [
        (d3_partition.assignment(level) + 1).tolist() for level in (1, 2, 3, 4)
    ]
    spec = sequence_spec_from_dict(
        {"kind": "stratified_nested", "levels": levels}, d3
    )
    assert spec.partition.depth == 4
    assert np.array_equal(spec.partition.assignment(4), np.arange(16))

    spec = sequence_spec_from_dict(
        {"kind": "logistic_full", "dictionary": d3_dictionary.tolist()}, d3
    )
    assert spec.dictionary.shape == (16, 16)

    with pytest.raises(SchemaError, match="sequence.kind"):
        sequence_spec_from_dict({"kind": "wavelet"}, d3)
    with pytest.raises(SchemaError, match="sequence.dictionary"):
        sequence_spec_from_dict(
            {"kind": "logistic_full", "dictionary": [[1.0], [1.0]]}, d3
        )
    with pytest.raises(SchemaError, match="sequence.levels"):
        sequence_spec_from_dict(
            {"kind": "stratified_nested",
             "levels": [[1] * 8 + [2] * 8, [1] * 4 + [2] * 8 + [1] * 4]},
            d3,
        )


def test_format_float_round_trips():
    for x in (1 / 3, 0.1, -0.0, 2.0**-52, 1e300, 4.563733333333333, math.pi):
        assert float(format_float(x)) == x
    assert format_float(math.nan) == "null"
    assert format_float(math.inf) == "null"


def test_json_dumps_is_deterministic_and_parseable():
    payload = {
        "name": "check",
        "flag": True,
        "matrix": np.array([[1.0, 0.5], [0.5, 2.0]]),
        "values": [1, 2.5, None],
        "nested": {"empty": {}, "blank": []},
        "nonfinite": float("nan"),
    }
    text = json_dumps(payload)
    assert text == json_dumps(payload)
    assert text.endswith("\n")
    parsed = json.loads(text)
    assert parsed["matrix"] == [[1.0, 0.5], [0.5, 2.0]]
    assert parsed["values"] == [1, 2.5, None]
    assert parsed["nonfinite"] is None
    # flat numeric lists stay on one line
    assert "[1, 2.5, null]" in text


def test_json_round_trips_full_precision():
    value = 4.813333333333333
    parsed = json.loads(json_dumps({"v": value}))
    assert parsed["v"] == value


def test_csv_layout():
    payload = {
        "scalar": 1.5,
        "vector": [1.0, 2.0],
        "matrix": [[1.0, 0.0], [0.0, 2.0]],
        "meta": {"passed": True, "label": "x"},
    }
    text = csv_dumps(payload)
    lines = text.strip().split("\n")
    assert lines[0] == "key,row,col,value"
    assert "scalar,,,1.5" in lines
    assert "vector,0,,1" in lines
    assert "matrix,1,1,2" in lines
    assert "meta.passed,,,true" in lines
    assert "meta.label,,,x" in lines


def test_write_text_atomic(tmp_path):
    target = tmp_path / "report.json"
    write_text_atomic(str(target), "first\n")
    assert target.read_text() == "first\n"
    write_text_atomic(str(target), "second\n")
    assert target.read_text() == "second\n"
    mode = os.stat(target).st_mode & 0o777
    assert mode == 0o644
    assert list(tmp_path.iterdir()) == [target]  # no temp leftovers


def test_write_report_formats(tmp_path, d1):
    payload = dgp_to_dict(d1)
    json_path = tmp_path / "out.json"
    write_report(payload, str(json_path), "json")
    assert json.loads(json_path.read_text())["treatments"] == 1
    csv_path = tmp_path / "out.csv"
    write_report(payload, str(csv_path), "csv")
    assert csv_path.read_text().startswith("key,row,col,value")
    with pytest.raises(ValidationError):
        write_report(payload, str(tmp_path / "out.xml"), "xml")


def test_full_population_round_trip(d1):
    full = full_population(d1)
    clone = dgp_from_dict(dgp_to_dict(full))
    assert clone.treatments.subpopulation == frozenset({0, 1})

import json
import math
from pathlib import Path

import jsonschema
import pytest

from cubesparse.harness import dump_json, report_schema, run
from cubesparse.selection import TopP

from conftest import small_config

GOLDEN = Path(__file__).parent / "golden" / "run_both_small.json"


def golden_config():
    return small_config(mode="both", strategy=TopP(0.7), seed=5)


def assert_close(actual, expected, path="$"):
    """Same keys and types; integers and strings exact, floats to 1e-9 relative."""
    if isinstance(expected, dict):
        assert sorted(actual) == sorted(expected), path
        for key in expected:
            assert_close(actual[key], expected[key], f"{path}.{key}")
    elif isinstance(expected, list):
        assert len(actual) == len(expected), path
        for i, (a, e) in enumerate(zip(actual, expected)):
            assert_close(a, e, f"{path}[{i}]")
    elif isinstance(expected, float):
        assert isinstance(actual, float) and math.isclose(actual, expected, rel_tol=1e-9, abs_tol=1e-15), path
    else:
        assert actual == expected and type(actual) is type(expected), path


def test_matches_golden_file():
    assert_close(json.loads(dump_json(run(golden_config()))), json.loads(GOLDEN.read_text()))


def test_golden_file_is_valid():
    jsonschema.validate(json.loads(GOLDEN.read_text()), report_schema())


@pytest.mark.parametrize("overrides", [dict(mode="sparse"), dict(mode="dense"), dict(num_text_tokens=0),
                                       dict(mode="both", strategy=TopP(1.0))])
def test_reports_validate(overrides):
    report = json.loads(dump_json(run(small_config(num_layers=1, **overrides), timing=True)))
    jsonschema.validate(report, report_schema())


def test_schema_rejects_unknown_fields():
    report = json.loads(GOLDEN.read_text())
    report["extra"] = 1
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(report, report_schema())

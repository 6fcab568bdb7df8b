import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lmobilenet.analysis import (
    CostReport,
    OpCensus,
    cost_report,
    count_madds,
    count_params,
    estimate_mac,
    op_census,
    pointwise_mac,
    report_parse,
    report_serialize,
)
from lmobilenet.errors import ConfigurationError, StateError
from lmobilenet.graph import ModelGraph
from lmobilenet.kernels import ConvParams
from lmobilenet.nodes import INPUT, NodeSpec, conv_node
from lmobilenet.presets import preset_lmobilenet, preset_mobilenetv2, preset_shufflenetv2

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def single(node, shape):
    return ModelGraph([node], shape, "single")


def pw_graph(h, w, c1, c2):
    return single(conv_node("pw", INPUT, ConvParams(c1, c2)), (c1, h, w))


def test_param_examples():
    assert count_params(single(conv_node("c", INPUT, ConvParams(16, 32, 3, 1, 1)), (16, 8, 8))) == 4608
    assert count_params(single(conv_node("d", INPUT, ConvParams(64, 64, 3, 1, 1, 64)), (64, 8, 8))) == 576
    for node in (
        NodeSpec("r", "relu", (INPUT,)),
        NodeSpec("p", "maxpool", (INPUT,), {"kernel": 3, "stride": 2, "pad": 1}),
        NodeSpec("s", "shuffle", (INPUT,), {"groups": 2}),
    ):
        assert count_params(single(node, (4, 8, 8))) == 0
    cat = ModelGraph([NodeSpec("c", "concat", (INPUT, INPUT))], (4, 8, 8))
    assert count_params(cat) == 0


def test_madds_examples():
    h, w, c1, c2 = 16, 16, 32, 128
    assert count_madds(pw_graph(h, w, c1, c2)) == h * w * c1 * c2 == 1_048_576
    dw = single(conv_node("d", INPUT, ConvParams(64, 64, 3, 1, 1, 64)), (64, 16, 16))
    assert count_madds(dw) == 147456
    assert count_madds(single(NodeSpec("r", "relu", (INPUT,)), (3, 8, 8))) == 0


def test_madds_follow_input_shape():
    g = pw_graph(16, 16, 8, 8)
    assert count_madds(g, (8, 8, 8)) * 4 == count_madds(g)


def test_mac_examples():
    assert estimate_mac(pw_graph(16, 16, 64, 64)) == 36864
    assert estimate_mac(pw_graph(16, 16, 32, 128)) == 45056
    assert estimate_mac(single(NodeSpec("r", "relu", (INPUT,)), (64, 16, 16))) == 32768


@settings(max_examples=100, deadline=None)
@given(h=st.integers(1, 64), w=st.integers(1, 64), c1=st.integers(1, 512), c2=st.integers(1, 512))
def test_mac_closed_form(h, w, c1, c2):
    assert estimate_mac(pw_graph(h, w, c1, c2)) == h * w * (c1 + c2) + c1 * c2 == pointwise_mac(h, w, c1, c2)


@pytest.mark.parametrize("k", range(17))
def test_balanced_split_minimises_mac(k):
    macs = {a: estimate_mac(pw_graph(16, 16, 2**a, 2 ** (k - a))) for a in range(k + 1)}
    best = min(macs.values())
    assert macs[k // 2] == best and macs[(k + 1) // 2] == best
    # unbalanced splits are strictly worse
    assert all(v > best for a, v in macs.items() if a not in (k // 2, (k + 1) // 2))


def test_census_presets():
    assert op_census(preset_lmobilenet()).table_row() == (46, 35, 7, 11)
    assert op_census(preset_mobilenetv2()).table_row() == (54, 36, 10, 0)
    c = op_census(preset_shufflenetv2())
    assert c.table_row() == (56, 37, 0, 16) and c.Shuffle == 16


def test_census_empty_graph():
    assert op_census(ModelGraph([], (3, 4, 4))) == OpCensus()


def lmobilenet_closed_form(classes):
    """Parameter count rebuilt stage by stage from per-layer formulas."""
    total = 9 * 3 * 16 + 2 * 16
    for c in (16, 32, 64, 128):  # stride-2 transitions
        total += c * c + 9 * c + 2 * c * 3 + 2 * (2 * c)
    for c in (32, 32, 64, 64, 128, 128, 256):  # stride-1 blocks
        total += 2 * c * 2 * c + 9 * 2 * c + 4 * c * c + 2 * (2 * c) * 3 + 2 * c
    return total + 2 * 256 + 256 * classes + classes


@pytest.mark.parametrize("classes", [10, 100])
def test_lmobilenet_params_closed_form(classes):
    assert count_params(preset_lmobilenet(classes)) == lmobilenet_closed_form(classes)


def test_param_budgets():
    assert count_params(preset_lmobilenet(100)) == 943_876
    assert count_params(preset_mobilenetv2()) == 3_505_966
    assert count_params(preset_shufflenetv2()) == 2_278_604


def test_lmobilenet_madds():
    # fixed by the 32x32 input: every block's cost is independent of stage
    assert count_madds(preset_lmobilenet()) == 16_777_216


def test_uninferred_graph():
    g = pw_graph(4, 4, 2, 2)
    g.shapes = {}
    with pytest.raises(StateError):
        cost_report(g)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_roundtrip(fmt):
    g = preset_shufflenetv2()
    report = cost_report(g)
    assert report_parse(report_serialize(report, fmt), fmt) == report
    census = op_census(g)
    assert report_parse(report_serialize(census, fmt), fmt) == census
    if fmt == "json":
        assert report_parse(report_serialize(report, fmt, census), fmt) == (report, census)


def test_empty_census_document():
    for fmt in ("json", "csv"):
        data = report_serialize(OpCensus(), fmt)
        assert report_parse(data, fmt) == OpCensus()
    assert all(v == 0 for v in json.loads(report_serialize(OpCensus()))["census"].values())


def test_unknown_format():
    with pytest.raises(ConfigurationError):
        report_serialize(OpCensus(), "xml")
    with pytest.raises(ConfigurationError):
        report_parse(b"{}", "xml")


def test_serialization_is_deterministic():
    a = report_serialize(cost_report(preset_lmobilenet()), "json", op_census(preset_lmobilenet()))
    b = report_serialize(cost_report(preset_lmobilenet()), "json", op_census(preset_lmobilenet()))
    assert a == b


def test_json_report_validates_against_schema():
    g = preset_lmobilenet()
    doc = json.loads(report_serialize(cost_report(g), "json", op_census(g), {"weighted_layers": 38}))
    schema = json.loads((SCHEMAS / "cost_report.schema.json").read_text())
    jsonschema.validate(doc, schema)
    assert doc["totals"]["params"] == sum(n["params"] for n in doc["nodes"])


def test_totals_are_node_sums():
    r = cost_report(preset_mobilenetv2())
    assert isinstance(r, CostReport)
    assert r.totals["mac"] == sum(n.mac for n in r.nodes)
    assert all(n.params == 0 for n in r.nodes if n.kind in ("relu", "maxpool", "gap", "eltwise", "concat"))
    assert np.all([n.mac > 0 for n in r.nodes])

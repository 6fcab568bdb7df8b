"""Static cost analysis of model graphs.

Three per-node quantities are computed from inferred shapes alone:

params
    learnable entries: conv ``kh*kw*in/g*out`` (+bias), fc ``in*out + out``,
    batch norm ``2*c`` (running statistics are not counted).
madds
    multiply-accumulates per sample for conv and fc layers only.
mac
    memory access cost: feature-map elements read plus written, plus the
    weights read.  For a 1x1 stride-1 convolution this is exactly
    ``h*w*(c1 + c2) + c1*c2``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigurationError, StateError
from .graph import ModelGraph
from .nodes import INPUT

MADDS_CONVENTION = "multiply-accumulate (one per weight use; FLOPs ~ 2x)"


@dataclass
class NodeCost:
    node_id: str
    kind: str
    out_shape: tuple[int, int, int]
    params: int
    madds: int
    mac: int


@dataclass
class CostReport:
    model: str
    input_shape: tuple[int, int, int]
    nodes: list[NodeCost] = field(default_factory=list)

    @property
    def totals(self) -> dict[str, int]:
        return {
            "params": sum(n.params for n in self.nodes),
            "madds": sum(n.madds for n in self.nodes),
            "mac": sum(n.mac for n in self.nodes),
        }


@dataclass
class OpCensus:
    BatchNorm: int = 0
    ReLU: int = 0
    Eltwise: int = 0
    Concat: int = 0
    Conv: int = 0
    DepthwiseConv: int = 0
    Pool: int = 0
    FC: int = 0
    Shuffle: int = 0
    Split: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)

    def table_row(self) -> tuple[int, int, int, int]:
        return self.BatchNorm, self.ReLU, self.Eltwise, self.Concat


_CENSUS_KEY = {
    "bn": "BatchNorm",
    "relu": "ReLU",
    "eltwise": "Eltwise",
    "concat": "Concat",
    "conv": "Conv",
    "dwconv": "DepthwiseConv",
    "maxpool": "Pool",
    "avgpool": "Pool",
    "gap": "Pool",
    "fc": "FC",
    "shuffle": "Shuffle",
    "slice": "Split",
}


def _vol(shape) -> int:
    c, h, w = shape
    return c * h * w


def _node_cost(graph: ModelGraph, node) -> NodeCost:
    shapes = graph.shapes
    out = shapes[node.id]
    reads = sum(_vol(shapes[s]) for s in node.inputs)
    writes = _vol(out)
    params = madds = 0
    if node.kind in ("conv", "dwconv"):
        p = node.conv
        kh, kw = p.kernel
        weights = kh * kw * (p.in_channels // p.groups) * p.out_channels
        params = weights + (p.out_channels if p.has_bias else 0)
        madds = out[1] * out[2] * weights
    elif node.kind == "fc":
        cin = shapes[node.inputs[0]][0]
        params = cin * out[0] + out[0]
        madds = cin * out[0]
    elif node.kind == "bn":
        params = 2 * out[0]
    return NodeCost(node.id, node.kind, out, params, madds, reads + writes + params)


def cost_report(graph: ModelGraph, input_shape=None) -> CostReport:
    if input_shape is not None and tuple(input_shape) != graph.input_shape:
        graph = ModelGraph(graph.nodes, tuple(input_shape), graph.name, graph.config)
    if not graph.shapes or INPUT not in graph.shapes:
        raise StateError("graph shapes have not been inferred")
    return CostReport(graph.name, graph.input_shape, [_node_cost(graph, n) for n in graph.nodes])


def count_params(graph: ModelGraph) -> int:
    return cost_report(graph).totals["params"]


def count_madds(graph: ModelGraph, input_shape=None) -> int:
    return cost_report(graph, input_shape).totals["madds"]


def estimate_mac(graph: ModelGraph, input_shape=None) -> int:
    return cost_report(graph, input_shape).totals["mac"]


def op_census(graph: ModelGraph) -> OpCensus:
    census = OpCensus()
    for node in graph.nodes:
        key = _CENSUS_KEY[node.kind]
        setattr(census, key, getattr(census, key) + 1)
    return census


def pointwise_mac(h: int, w: int, c1: int, c2: int) -> int:
    """Closed form for a 1x1 stride-1 convolution."""
    return h * w * (c1 + c2) + c1 * c2


# -- serialization --------------------------------------------------------------


def _report_dict(report: CostReport, census: OpCensus | None, extra: dict | None) -> dict:
    doc = {
        "model": report.model,
        "input_shape": list(report.input_shape),
        "madds_convention": MADDS_CONVENTION,
        "totals": report.totals,
        "census": census.as_dict() if census is not None else None,
        "nodes": [
            {**asdict(n), "out_shape": list(n.out_shape)} for n in report.nodes
        ],
    }
    if census is None:
        del doc["census"]
    doc.update(extra or {})
    return doc


CSV_COLUMNS = ("node_id", "kind", "out_shape", "params", "madds", "mac")


def report_serialize(report, fmt: str = "json", census: OpCensus | None = None, extra: dict | None = None) -> bytes:
    """Serialize a CostReport (optionally with its census) or an OpCensus."""
    if fmt not in ("json", "csv"):
        raise ConfigurationError(f"unknown report format {fmt!r}")
    if isinstance(report, OpCensus):
        if fmt == "json":
            return (json.dumps({"census": report.as_dict()}, indent=2) + "\n").encode()
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(("kind", "count"))
        wr.writerows(report.as_dict().items())
        return buf.getvalue().encode()
    if fmt == "json":
        return (json.dumps(_report_dict(report, census, extra), indent=2) + "\n").encode()
    buf = io.StringIO()
    buf.write(f"# model={report.model}\n")
    buf.write(f"# input_shape={'x'.join(str(v) for v in report.input_shape)}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_COLUMNS)
    for n in report.nodes:
        wr.writerow((n.node_id, n.kind, "x".join(map(str, n.out_shape)), n.params, n.madds, n.mac))
    t = report.totals
    wr.writerow(("TOTAL", "", "", t["params"], t["madds"], t["mac"]))
    return buf.getvalue().encode()


def report_parse(data: bytes, fmt: str = "json"):
    """Inverse of :func:`report_serialize`; returns a CostReport or OpCensus
    (JSON cost reports carrying a census return ``(report, census)``)."""
    text = data.decode()
    if fmt == "json":
        doc = json.loads(text)
        census = OpCensus(**doc["census"]) if doc.get("census") is not None else None
        if "nodes" not in doc:
            return census
        nodes = [NodeCost(**{**n, "out_shape": tuple(n["out_shape"])}) for n in doc["nodes"]]
        report = CostReport(doc["model"], tuple(doc["input_shape"]), nodes)
        return (report, census) if census is not None else report
    if fmt != "csv":
        raise ConfigurationError(f"unknown report format {fmt!r}")
    lines = text.splitlines()
    if lines and lines[0] == "kind,count":
        rows = list(csv.reader(lines[1:]))
        return OpCensus(**{k: int(v) for k, v in rows})
    meta = dict(line[2:].split("=", 1) for line in lines if line.startswith("# "))
    body = list(csv.DictReader(line for line in lines if not line.startswith("#")))
    nodes = [
        NodeCost(r["node_id"], r["kind"], tuple(int(v) for v in r["out_shape"].split("x")),
                 int(r["params"]), int(r["madds"]), int(r["mac"]))
        for r in body if r["node_id"] != "TOTAL"
    ]
    return CostReport(meta["model"], tuple(int(v) for v in meta["input_shape"].split("x")), nodes)


def census_fields() -> list[str]:
    return [f.name for f in fields(OpCensus)]

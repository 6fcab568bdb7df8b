"""A fixed battery of toy graphs, one per layer kind, for gradient checks."""

from __future__ import annotations

import numpy as np

from .blocks import LmbConfig, make_lmb_s1, make_lmb_s2
from .graph import ModelGraph
from .kernels import ConvParams
from .nodes import INPUT, NodeSpec, conv_node
from .training import GradCheckReport, grad_check

CLASSES = 3


def _head(nodes, src):
    nodes.append(NodeSpec("gap", "gap", (src,)))
    nodes.append(NodeSpec("fc", "fc", ("gap",), {"classes": CLASSES}))
    return nodes


def _stem(c_out=4, k=3, stride=1, bias=True, cin=3, name="stem", src=INPUT):
    return conv_node(name, src, ConvParams(cin, c_out, k, stride, k // 2, has_bias=bias))


def _pool(kind):
    return NodeSpec("pool", kind, ("stem",), {"kernel": (3, 3), "stride": (2, 2), "pad": (1, 1)})


def battery_graphs(spatial: int = 6) -> dict[str, ModelGraph]:
    shape = (3, spatial, spatial)
    g: dict[str, list[NodeSpec]] = {}
    g["conv"] = _head([_stem()], "stem")
    g["conv_stride2"] = _head([_stem(k=3, stride=2)], "stem")
    g["dwconv"] = _head(
        [_stem(4, 1), conv_node("dw", "stem", ConvParams(4, 4, 3, 2, 1, groups=4))], "dw"
    )
    g["maxpool"] = _head([_stem(), _pool("maxpool")], "pool")
    g["avgpool"] = _head([_stem(), _pool("avgpool")], "pool")
    g["gap"] = _head([_stem()], "stem")
    g["bn"] = _head([_stem(), NodeSpec("bn", "bn", ("stem",))], "bn")
    g["relu"] = _head([_stem(), NodeSpec("relu", "relu", ("stem",))], "relu")
    g["eltwise"] = _head(
        [_stem(), _stem(name="other"), NodeSpec("add", "eltwise", ("stem", "other"))], "add"
    )
    g["concat"] = _head(
        [_stem(), _stem(2, name="other"), NodeSpec("cat", "concat", ("stem", "other"))], "cat"
    )
    g["shuffle"] = _head(
        [_stem(), NodeSpec("shuf", "shuffle", ("stem",), {"groups": 2}),
         _stem(3, 1, cin=4, name="mix", src="shuf")],
        "mix",
    )
    g["slice"] = _head([_stem(), NodeSpec("half", "slice", ("stem",), {"start": 1, "stop": 3})], "half")
    g["fc"] = _head([], INPUT)
    graphs = {name: ModelGraph(nodes, shape, name) for name, nodes in g.items()}

    # one full L-Mobilenet block of each stride behind a small stem
    nodes = [_stem(4, bias=False)]
    s2 = make_lmb_s2(LmbConfig(4, 2), "stem", "s2")
    s1 = make_lmb_s1(LmbConfig(8, 1), s2.exit, "s1")
    nodes += list(s2.nodes) + list(s1.nodes)
    graphs["lmb_block"] = ModelGraph(_head(nodes, s1.exit), (3, 8, 8), "lmb_block")
    return graphs


def run_battery(seed: int = 0, tolerance: float = 1e-4, samples: int = 200, batch: int = 4) -> dict[str, GradCheckReport]:
    reports = {}
    for i, (name, graph) in enumerate(battery_graphs().items()):
        graph.init_params(seed + i, np.float64)
        rng = np.random.default_rng(seed + 1000 + i)
        # nonzero BN shift/scale so their gradients are not trivially symmetric
        for key in graph.params:
            if key.endswith((".gamma", ".beta", ".bias")):
                graph.params[key][...] = rng.uniform(0.5, 1.5, graph.params[key].shape)
        x = rng.standard_normal((batch, *graph.input_shape))
        y = rng.integers(0, CLASSES, batch)
        reports[name] = grad_check(graph, x, y, tolerance, samples=samples, seed=seed + i)
    return reports

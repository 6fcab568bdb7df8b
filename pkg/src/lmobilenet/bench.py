"""Per-layer latency profiling of a forward pass."""

from __future__ import annotations

import os
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .graph import ModelGraph
from .nodes import INPUT


@dataclass
class NodeTiming:
    node_id: str
    kind: str
    mean_s: float
    std_s: float
    calls: int


@dataclass
class BenchReport:
    model: str
    nodes: list[NodeTiming]
    per_kind: dict[str, float]  # summed mean seconds
    node_sum_s: float
    end_to_end_s: float  # mean wall time of a whole timed forward
    meta: dict = field(default_factory=dict)

    @property
    def per_kind_share(self) -> dict[str, float]:
        total = sum(self.per_kind.values()) or 1.0
        return {k: v / total for k, v in self.per_kind.items()}

    @property
    def additivity_gap(self) -> float:
        """Relative difference between summed node times and end-to-end time."""
        return abs(self.end_to_end_s - self.node_sum_s) / self.end_to_end_s

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "meta": self.meta,
            "totals": {"node_sum_s": self.node_sum_s, "end_to_end_s": self.end_to_end_s},
            "per_kind": {
                k: {"total_s": v, "share": self.per_kind_share[k]} for k, v in self.per_kind.items()
            },
            "nodes": [vars(n) for n in self.nodes],
        }


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def bench_forward(
    graph: ModelGraph,
    batch: int = 8,
    reps: int = 50,
    warmup: int = 5,
    kernel: str = "gemm",
    threads: int | None = None,
    seed: int = 0,
) -> BenchReport:
    """Time every node of an inference forward pass.

    Each timed repetition walks the graph node by node with a monotonic
    clock; the same repetition's start-to-finish time is the end-to-end
    figure, so node times and total come from one run.
    """
    if reps < 1:
        raise ConfigurationError("reps must be >= 1")
    if warmup < 0:
        raise ConfigurationError("warmup must be >= 0")
    if threads is not None and threads < 1:
        raise ConfigurationError("threads must be >= 1")
    if not graph.initialized:
        graph.init_params(seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, *graph.input_shape)).astype(graph.dtype)
    samples = np.zeros((reps, len(graph.nodes)))
    totals = np.zeros(reps)
    clock = time.perf_counter
    # the naive path is single-threaded by contract
    limit = _thread_limit(threads if kernel == "gemm" else 1)
    with limit:
        for r in range(-warmup, reps):
            values = {INPUT: x}
            row = np.zeros(len(graph.nodes))
            t_start = clock()
            for i, node in enumerate(graph.nodes):
                args = [values[s] for s in node.inputs]
                t0 = clock()
                out, _ = graph.run_node(node, args, "inference", kernel)
                row[i] = clock() - t0
                values[node.id] = out
            t_end = clock()
            if r >= 0:
                samples[r] = row
                totals[r] = t_end - t_start
    means, stds = samples.mean(axis=0), samples.std(axis=0)
    nodes = [
        NodeTiming(n.id, n.kind, float(m), float(s), reps)
        for n, m, s in zip(graph.nodes, means, stds)
    ]
    per_kind: dict[str, float] = {}
    for t in nodes:
        per_kind[t.kind] = per_kind.get(t.kind, 0.0) + t.mean_s
    meta = {
        "reps": reps,
        "warmup": warmup,
        "kernel": kernel,
        "threads": threads if threads is not None else os.cpu_count(),
        "batch": batch,
        "input_shape": list(graph.input_shape),
        "clock": "perf_counter",
    }
    return BenchReport(graph.name, nodes, per_kind, float(means.sum()), float(totals.mean()), meta)

"""Model graphs: construction from architecture rows, shape inference,
parameter storage and forward/backward execution."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels as K
from .blocks import (
    BlockFragment,
    LmbConfig,
    make_lmb,
    make_mbv2_bottleneck,
    make_snv2_unit,
    resolve_flags,
)
from .errors import ConfigurationError, DimensionError, StateError
from .kernels import BnParams, ConvParams, OpContext
from .nodes import INPUT, NodeSpec, conv_node

Shape = tuple[int, int, int]  # (c, h, w), batch excluded

ROW_OPS = ("input_bn", "conv3x3", "conv1x1", "lmb", "mbv2", "snv2")


@dataclass(frozen=True)
class ArchRow:
    op: str
    expand: int = 1
    c: int = 0
    n: int = 1
    s: int = 1

    def __post_init__(self):
        if self.op not in ROW_OPS:
            raise ConfigurationError(f"unknown operator {self.op!r} (known: {', '.join(ROW_OPS)})")
        if self.n < 1:
            raise ConfigurationError(f"{self.op}: repeat count n must be >= 1, got {self.n}")
        if self.s not in (1, 2):
            raise ConfigurationError(f"{self.op}: stride s must be 1 or 2, got {self.s}")
        if self.expand < 1:
            raise ConfigurationError(f"{self.op}: expand must be >= 1, got {self.expand}")


@dataclass(frozen=True)
class HeadSpec:
    """Global average pool, optional BN/ReLU, then a fully connected layer."""

    classes: int = 10
    bn: bool = False
    relu: bool = False

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigurationError(f"classes must be >= 2, got {self.classes}")


@dataclass(frozen=True)
class ArchConfig:
    name: str
    input_shape: Shape
    rows: tuple[ArchRow, ...]
    head: HeadSpec
    flags: Mapping[str, bool] = field(default_factory=dict)

    def build(self) -> "ModelGraph":
        return build_graph(self.rows, self.head, self.flags, self.input_shape, self.name, config=self)


def _param_slots(node: NodeSpec, shapes: Mapping[str, Shape]) -> list[tuple[str, tuple[int, ...]]]:
    """(name, shape) of each array a node owns; running stats included."""
    if node.kind in ("conv", "dwconv"):
        p = node.conv
        slots = [("weight", p.weight_shape)]
        if p.has_bias:
            slots.append(("bias", (p.out_channels,)))
        return slots
    if node.kind == "bn":
        c = shapes[node.id][0]
        return [("gamma", (c,)), ("beta", (c,)), ("running_mean", (c,)), ("running_var", (c,))]
    if node.kind == "fc":
        c = shapes[node.inputs[0]][0]
        return [("weight", (c, node.attrs["classes"])), ("bias", (node.attrs["classes"],))]
    return []


LEARNABLE = ("weight", "bias", "gamma", "beta")


def shape_infer(nodes: Sequence[NodeSpec], input_shape: Shape) -> dict[str, Shape]:
    """Annotate every node with its (c, h, w) output shape.

    Nodes must be listed in topological order; the first inconsistency raises.
    """
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise DimensionError(f"input shape must be (c, h, w) with positive sizes, got {input_shape}")
    shapes: dict[str, Shape] = {INPUT: tuple(int(v) for v in input_shape)}
    for node in nodes:
        if node.id in shapes:
            raise ConfigurationError(f"duplicate node id {node.id!r}")
        for src in node.inputs:
            if src not in shapes:
                raise ConfigurationError(f"node {node.id}: input {src!r} is not defined before it")
        ins = [shapes[s] for s in node.inputs]
        c, h, w = ins[0]
        try:
            if node.kind in ("conv", "dwconv"):
                p = node.conv
                if c != p.in_channels:
                    raise DimensionError(f"input has {c} channels, conv expects {p.in_channels}")
                out = (p.out_channels, *p.output_hw(h, w))
            elif node.kind in ("maxpool", "avgpool"):
                (kh, kw), (sh, sw), (ph, pw) = node.attrs["kernel"], node.attrs["stride"], node.attrs["pad"]
                if ph >= kh or pw >= kw:
                    raise DimensionError("pool window can lie entirely in padding")
                out = (c, K.pooled_size(h, kh, sh, ph, "h"), K.pooled_size(w, kw, sw, pw, "w"))
            elif node.kind == "gap":
                out = (c, 1, 1)
            elif node.kind in ("bn", "relu"):
                out = (c, h, w)
            elif node.kind == "eltwise":
                if ins[0] != ins[1]:
                    raise DimensionError(
                        f"parents {node.inputs[0]} {ins[0]} and {node.inputs[1]} {ins[1]} differ"
                    )
                out = ins[0]
            elif node.kind == "concat":
                for src, s in zip(node.inputs, ins):
                    if s[1:] != (h, w):
                        raise DimensionError(
                            f"parent {src} has spatial {s[1:]}, {node.inputs[0]} has {(h, w)}"
                        )
                out = (sum(s[0] for s in ins), h, w)
            elif node.kind == "shuffle":
                if c % node.attrs["groups"]:
                    raise ConfigurationError(f"{c} channels not divisible by {node.attrs['groups']} groups")
                out = (c, h, w)
            elif node.kind == "slice":
                start, stop = node.attrs["start"], node.attrs["stop"]
                if not 0 <= start < stop <= c:
                    raise DimensionError(f"slice [{start}:{stop}] outside {c} channels")
                out = (stop - start, h, w)
            elif node.kind == "fc":
                if (h, w) != (1, 1):
                    raise DimensionError(f"fully connected layer needs 1x1 input, got {h}x{w}")
                out = (node.attrs["classes"], 1, 1)
            else:  # pragma: no cover - NodeSpec validates kinds
                raise ConfigurationError(f"unknown kind {node.kind}")
        except DimensionError as exc:
            raise DimensionError(f"node {node.id}: {exc}") from None
        shapes[node.id] = out
    return shapes


class ModelGraph:
    """A single-input, single-output DAG of layer nodes plus its parameters.

    Parameters live in ``params`` keyed ``"<node id>.<slot>"``; slots are
    declared at construction but arrays only exist after :meth:`init_params`
    (or a checkpoint load).
    """

    def __init__(
        self,
        nodes: Iterable[NodeSpec],
        input_shape: Shape,
        name: str = "model",
        config: ArchConfig | None = None,
    ):
        self.nodes: list[NodeSpec] = list(nodes)
        self.name = name
        self.config = config
        self.input_shape: Shape = tuple(int(v) for v in input_shape)
        self.shapes = shape_infer(self.nodes, self.input_shape)
        self.by_id = {n.id: n for n in self.nodes}
        self.output = self.nodes[-1].id if self.nodes else INPUT
        consumed = {src for n in self.nodes for src in n.inputs}
        dangling = [n.id for n in self.nodes[:-1] if n.id not in consumed]
        if dangling:
            raise ConfigurationError(f"graph has more than one output: {dangling + [self.output]}")
        self.slots: dict[str, tuple[int, ...]] = {}
        for node in self.nodes:
            for slot, shape in _param_slots(node, self.shapes):
                self.slots[f"{node.id}.{slot}"] = shape
        self.params: dict[str, np.ndarray] = {}

    # -- parameters -------------------------------------------------------

    @property
    def output_shape(self) -> Shape:
        return self.shapes[self.output]

    @property
    def initialized(self) -> bool:
        return len(self.params) == len(self.slots)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype if self.params else np.dtype(np.float32)

    def learnable_keys(self) -> list[str]:
        return [k for k in self.slots if k.rsplit(".", 1)[1] in LEARNABLE]

    def init_params(self, seed: int = 0, dtype=np.float32) -> "ModelGraph":
        from .training import initialize

        initialize(self, seed, dtype)
        return self

    def astype(self, dtype) -> "ModelGraph":
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return self

    def copy(self) -> "ModelGraph":
        other = ModelGraph(self.nodes, self.input_shape, self.name, self.config)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def bn_params(self, node_id: str, mode: str) -> BnParams:
        p = self.params
        return BnParams(
            p[f"{node_id}.gamma"],
            p[f"{node_id}.beta"],
            p[f"{node_id}.running_mean"],
            p[f"{node_id}.running_var"],
            mode=mode,
        )

    def weighted_layers(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.is_weighted]

    # -- execution --------------------------------------------------------

    def run_node(
        self,
        node: NodeSpec,
        inputs: Sequence[np.ndarray],
        mode: str = "inference",
        kernel: str = "naive",
        update_running: bool = True,
    ) -> tuple[np.ndarray, OpContext]:
        """Execute one node; returns its output and a backward context."""
        p = self.params
        x = inputs[0]
        kind = node.kind
        prm: dict = {}
        saved: dict = {}
        if kind in ("conv", "dwconv"):
            cp: ConvParams = node.conv
            w = p[f"{node.id}.weight"]
            b = p.get(f"{node.id}.bias")
            prm = {"weight": w}
            conv = K.conv2d_gemm if kernel == "gemm" else K.conv2d_forward
            out = conv(x, w, b, cp)
        elif kind == "maxpool":
            out, saved["argmax"] = K.maxpool2d(x, node.attrs["kernel"], node.attrs["stride"], node.attrs["pad"])
        elif kind == "avgpool":
            out = K.avgpool2d(x, node.attrs["kernel"], node.attrs["stride"], node.attrs["pad"])
        elif kind == "gap":
            out = K.global_avg_pool(x)
        elif kind == "bn":
            bn = self.bn_params(node.id, "training" if mode == "training" else "inference")
            prm = {"bn": bn}
            out = K.batch_norm(x, bn, update_running=update_running)
        elif kind == "relu":
            out = K.relu(x)
        elif kind == "eltwise":
            out = K.eltwise_add(inputs[0], inputs[1])
        elif kind == "concat":
            out = K.concat_channels(inputs)
        elif kind == "shuffle":
            out = K.channel_shuffle(x, node.attrs["groups"])
        elif kind == "slice":
            out = K.slice_channels(x, node.attrs["start"], node.attrs["stop"])
        elif kind == "fc":
            w, b = p[f"{node.id}.weight"], p[f"{node.id}.bias"]
            prm = {"weight": w}
            out = K.fully_connected(x, w, b)
        else:  # pragma: no cover
            raise ConfigurationError(f"cannot execute kind {kind}")
        return out, OpContext(list(inputs), node.attrs, prm, saved)

    def _check_ready(self, x: np.ndarray):
        if not self.initialized:
            missing = [k for k in self.slots if k not in self.params]
            raise StateError(f"parameters not initialized (first missing: {missing[0]})")
        K.check_tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} != graph input {self.input_shape}")

    def run(
        self,
        x: np.ndarray,
        mode: str = "inference",
        kernel: str = "naive",
        keep_context: bool = False,
        update_running: bool = True,
        hook: Callable[[NodeSpec, np.ndarray], None] | None = None,
    ):
        """Execute all nodes in order.  Returns ``(output, tape)``; the tape
        maps node id to its backward context when ``keep_context`` is set."""
        if mode not in ("training", "inference"):
            raise ConfigurationError(f"unknown mode {mode!r}")
        if kernel not in ("naive", "gemm"):
            raise ConfigurationError(f"unknown kernel path {kernel!r}")
        self._check_ready(x)
        values = {INPUT: x}
        remaining = {}
        for node in self.nodes:
            for src in node.inputs:
                remaining[src] = remaining.get(src, 0) + 1
        tape: dict[str, OpContext] = {}
        for node in self.nodes:
            out, ctx = self.run_node(node, [values[s] for s in node.inputs], mode, kernel, update_running)
            values[node.id] = out
            if hook is not None:
                hook(node, out)
            if keep_context:
                tape[node.id] = ctx
            else:
                for src in node.inputs:
                    remaining[src] -= 1
                    if remaining[src] == 0 and src != INPUT:
                        del values[src]
        return values[self.output], tape

    def forward(self, x: np.ndarray, mode: str = "inference", kernel: str = "naive") -> np.ndarray:
        """Logits ``(n, classes)`` when the graph ends in a classifier,
        otherwise the raw output tensor."""
        out, _ = self.run(x, mode, kernel)
        return self._squeeze(out)

    def _squeeze(self, out):
        if self.nodes and self.nodes[-1].kind == "fc":
            return out.reshape(out.shape[0], -1)
        return out

    def backward(self, tape: Mapping[str, OpContext], grad_out: np.ndarray):
        """Reverse pass over a tape from :meth:`run`.

        Returns ``(param_grads, input_grad)``; ``param_grads`` is keyed like
        ``params`` and covers learnable slots only.
        """
        if not tape:
            raise StateError("backward needs a tape recorded with keep_context=True")
        if self.nodes and grad_out.ndim == 2:
            grad_out = grad_out.reshape(*grad_out.shape, 1, 1)
        grads: dict[str, np.ndarray] = {self.output: grad_out}
        pgrads: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            gin, gp = K.op_backward(node.kind, g, tape.get(node.id))
            for slot, val in gp.items():
                pgrads[f"{node.id}.{slot}"] = val
            for src, gi in zip(node.inputs, gin):
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return pgrads, grads.get(INPUT)


# -- construction from rows --------------------------------------------------


def _append(nodes: list[NodeSpec], frag: BlockFragment) -> str:
    nodes.extend(frag.nodes)
    return frag.exit


def _conv_layer(nodes, src, name, cin, cout, k, s, bn=True, relu=True) -> str:
    p = ConvParams(cin, cout, kernel=k, stride=s, padding=k // 2)
    nodes.append(conv_node(name, src, p, block=name, role="layer"))
    out = name
    if bn:
        nodes.append(NodeSpec(f"{name}_bn", "bn", (out,), block=name))
        out = f"{name}_bn"
    if relu:
        nodes.append(NodeSpec(f"{name}_relu", "relu", (out,), block=name))
        out = f"{name}_relu"
    return out


def build_graph(
    rows: Sequence[ArchRow],
    head: HeadSpec,
    flags: Mapping[str, bool] | None = None,
    input_shape: Shape = (3, 32, 32),
    name: str = "model",
    config: ArchConfig | None = None,
) -> ModelGraph:
    """Expand architecture rows into a graph.

    Each row becomes ``n`` copies of its unit; the row stride applies to the
    first copy and the repeats use stride 1.
    """
    flags = resolve_flags(flags)
    nodes: list[NodeSpec] = []
    src, ch = INPUT, int(input_shape[0])
    for r, row in enumerate(rows):
        for i in range(row.n):
            stride = row.s if i == 0 else 1
            tag = f"r{r}b{i}"
            if row.op == "input_bn":
                nodes.append(NodeSpec(f"{tag}.bn", "bn", (src,), block=tag))
                src = f"{tag}.bn"
            elif row.op in ("conv3x3", "conv1x1"):
                k = 3 if row.op == "conv3x3" else 1
                src = _conv_layer(nodes, src, f"{tag}.conv", ch, row.c, k, stride)
                ch = row.c
            elif row.op == "lmb":
                cfg = LmbConfig(ch, stride, branch_expand=max(1, row.expand // 2), t=row.expand, flags=flags) \
                    if stride == 1 else LmbConfig(ch, 2, flags=flags)
                frag = make_lmb(cfg, src, tag)
                if frag.out_channels != row.c:
                    raise ConfigurationError(
                        f"row {r} ({row.op}): block {i} produces {frag.out_channels} channels, row declares c={row.c}"
                    )
                src, ch = _append(nodes, frag), frag.out_channels
            elif row.op == "mbv2":
                src = _append(nodes, make_mbv2_bottleneck(ch, row.c, stride, row.expand, src, tag))
                ch = row.c
            elif row.op == "snv2":
                frag = make_snv2_unit(ch, stride, src, tag, out_ch=row.c, downsample=(i == 0))
                src, ch = _append(nodes, frag), row.c
    nodes.append(NodeSpec("head.gap", "gap", (src,), block="head"))
    src = "head.gap"
    if head.bn:
        nodes.append(NodeSpec("head.bn", "bn", (src,), block="head"))
        src = "head.bn"
    if head.relu:
        nodes.append(NodeSpec("head.relu", "relu", (src,), block="head"))
        src = "head.relu"
    nodes.append(NodeSpec("head.fc", "fc", (src,), {"classes": head.classes}, block="head"))
    return ModelGraph(nodes, input_shape, name, config)


def block_strides(graph: ModelGraph, block_kind: str) -> list[int]:
    """Stride of each bottleneck block of ``block_kind`` in graph order."""
    seen: dict[str, int] = {}
    for n in graph.nodes:
        if n.block == block_kind:
            tag = n.id.split(".")[0]
            seen.setdefault(tag, 1)
            if n.kind == "dwconv":
                seen[tag] = max(seen[tag], n.conv.stride[0])
    return list(seen.values())

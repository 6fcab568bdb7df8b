"""Typed layer nodes shared by the block builders and the model graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigurationError
from .kernels import ConvParams

INPUT = "input"

KINDS = (
    "conv",
    "dwconv",
    "maxpool",
    "avgpool",
    "gap",
    "bn",
    "relu",
    "eltwise",
    "concat",
    "shuffle",
    "slice",
    "fc",
)
WEIGHTED_KINDS = ("conv", "dwconv", "fc")


@dataclass(frozen=True, eq=False)
class NodeSpec:
    """One layer in a model graph.

    ``attrs`` carries the kind-specific settings: ``conv`` (a ConvParams) for
    conv/dwconv, ``kernel``/``stride``/``pad`` for pools, ``groups`` for
    shuffle, ``start``/``stop`` for slice, ``classes`` for fc.  ``block`` and
    ``role`` are free-form tags used by structural checks and reports.
    """

    id: str
    kind: str
    inputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)
    block: str | None = None
    role: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"node {self.id}: unknown kind {self.kind!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.kind in ("conv", "dwconv"):
            p = self.attrs.get("conv")
            if not isinstance(p, ConvParams):
                raise ConfigurationError(f"node {self.id}: conv node needs a ConvParams")
            if self.kind == "dwconv" and not p.is_depthwise:
                raise ConfigurationError(f"node {self.id}: dwconv requires groups == channels")
        if self.kind in ("maxpool", "avgpool"):
            attrs = dict(self.attrs)
            for key, default in (("kernel", 3), ("stride", 2), ("pad", 1)):
                v = attrs.get(key, default)
                attrs[key] = (int(v), int(v)) if isinstance(v, (int, np.integer)) else tuple(int(u) for u in v)
            object.__setattr__(self, "attrs", attrs)
        arity = len(self.inputs)
        if self.kind in ("eltwise",) and arity != 2:
            raise ConfigurationError(f"node {self.id}: eltwise takes exactly two inputs")
        if self.kind == "concat" and arity < 2:
            raise ConfigurationError(f"node {self.id}: concat takes at least two inputs")
        if self.kind not in ("eltwise", "concat") and arity != 1:
            raise ConfigurationError(f"node {self.id}: {self.kind} takes exactly one input")

    @property
    def conv(self) -> ConvParams:
        return self.attrs["conv"]

    @property
    def is_weighted(self) -> bool:
        return self.kind in WEIGHTED_KINDS


def conv_node(nid: str, src: str, p: ConvParams, **tags) -> NodeSpec:
    kind = "dwconv" if p.is_depthwise else "conv"
    return NodeSpec(nid, kind, (src,), {"conv": p}, **tags)

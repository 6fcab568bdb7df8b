"""Subgraph builders for the bottleneck units of the three networks.

Each builder returns a :class:`BlockFragment`: an ordered node list that reads
from one external tensor (``entry``) and produces one tensor (``exit``).
Node ids are prefixed so several fragments can live in one graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .errors import ConfigurationError
from .kernels import ConvParams
from .nodes import INPUT, NodeSpec, conv_node

# Norm/activation placement for L-Mobilenet blocks.  The defaults are the
# assignment that reproduces the non-convolution op counts of the full
# network: BN after every conv, ReLU after every conv except the stride-1
# projection, BN on the pooling branch, BN+ReLU on the stride-2 output.
DEFAULT_LMB_FLAGS: dict[str, bool] = {
    "conv_bn": True,
    "conv_relu": True,
    "proj_relu": False,
    "pool_bn": True,
    "s1_out_bn": False,
    "s1_out_relu": False,
    "s2_out_bn": True,
    "s2_out_relu": True,
}


def resolve_flags(flags: Mapping[str, bool] | None) -> dict[str, bool]:
    merged = dict(DEFAULT_LMB_FLAGS)
    for key, value in (flags or {}).items():
        if key not in DEFAULT_LMB_FLAGS:
            raise ConfigurationError(f"unknown norm/act flag {key!r}")
        if not isinstance(value, bool):
            raise ConfigurationError(f"flag {key!r} must be a boolean, got {value!r}")
        merged[key] = value
    return merged


@dataclass(frozen=True)
class LmbConfig:
    in_channels: int
    stride: int = 1
    branch_expand: int = 2
    t: int = 4
    flags: Mapping[str, bool] = field(default_factory=lambda: dict(DEFAULT_LMB_FLAGS))
    pool: str = "max"

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"L-Mobilenet block stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if self.branch_expand < 1 or self.t < 1:
            raise ConfigurationError("expansion ratios must be >= 1")
        if self.stride == 1 and 2 * self.branch_expand != self.t:
            raise ConfigurationError(
                f"two branches of x{self.branch_expand} cannot concat to x{self.t} channels"
            )
        if self.pool not in ("max", "avg"):
            raise ConfigurationError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        object.__setattr__(self, "flags", resolve_flags(self.flags))


@dataclass(frozen=True)
class BlockFragment:
    nodes: tuple[NodeSpec, ...]
    entry: str
    exit: str
    out_channels: int
    scale: int  # spatial downsampling factor

    def by_kind(self, kind: str) -> list[NodeSpec]:
        return [n for n in self.nodes if n.kind == kind]


class _Emitter:
    """Appends nodes with prefixed ids and tracks the last one."""

    def __init__(self, prefix: str, block: str):
        self.prefix = prefix
        self.block = block
        self.nodes: list[NodeSpec] = []

    def add(self, name: str, kind: str, inputs, role=None, **attrs) -> str:
        nid = f"{self.prefix}.{name}"
        self.nodes.append(NodeSpec(nid, kind, tuple(inputs), attrs, block=self.block, role=role))
        return nid

    def conv(self, name: str, src: str, p: ConvParams, bn: bool, act: bool, role=None) -> str:
        nid = f"{self.prefix}.{name}"
        self.nodes.append(conv_node(nid, src, p, block=self.block, role=role))
        if bn:
            nid = self.add(f"{name}_bn", "bn", [nid], role=role)
        if act:
            nid = self.add(f"{name}_relu", "relu", [nid], role=role)
        return nid


def _pw(cin: int, cout: int) -> ConvParams:
    return ConvParams(cin, cout, kernel=1)


def _dw(c: int, stride: int) -> ConvParams:
    return ConvParams(c, c, kernel=3, stride=stride, padding=1, groups=c)


def make_lmb_s1(cfg: LmbConfig, src: str = INPUT, prefix: str = "lmb") -> BlockFragment:
    """Stride-1 L-Mobilenet block: two expanding branches, concat, project, add."""
    if cfg.stride != 1:
        raise ConfigurationError(f"make_lmb_s1 needs stride 1, got {cfg.stride}")
    f = cfg.flags
    c = cfg.in_channels
    wide = cfg.branch_expand * c
    e = _Emitter(prefix, "lmb_s1")
    a = e.conv("a_pw", src, _pw(c, wide), f["conv_bn"], f["conv_relu"], role="branch_a")
    b = e.conv("b_pw", src, _pw(c, wide), f["conv_bn"], f["conv_relu"], role="branch_b")
    b = e.conv("b_dw", b, _dw(wide, 1), f["conv_bn"], f["conv_relu"], role="branch_b")
    cat = e.add("concat", "concat", [a, b])
    proj = e.conv("proj", cat, _pw(2 * wide, c), f["conv_bn"], f["proj_relu"], role="proj")
    out = e.add("add", "eltwise", [proj, src])
    if f["s1_out_bn"]:
        out = e.add("out_bn", "bn", [out])
    if f["s1_out_relu"]:
        out = e.add("out_relu", "relu", [out])
    return BlockFragment(tuple(e.nodes), src, out, c, 1)


def make_lmb_s2(cfg: LmbConfig, src: str = INPUT, prefix: str = "lmb") -> BlockFragment:
    """Stride-2 L-Mobilenet block: parameter-free pooling branch beside a
    pointwise + strided depthwise branch, concatenated to twice the width."""
    if cfg.stride != 2:
        raise ConfigurationError(f"make_lmb_s2 needs stride 2, got {cfg.stride}")
    f = cfg.flags
    c = cfg.in_channels
    e = _Emitter(prefix, "lmb_s2")
    a = e.add("pool", f"{cfg.pool}pool", [src], role="branch_a", kernel=(3, 3), stride=(2, 2), pad=(1, 1))
    if f["pool_bn"]:
        a = e.add("pool_bn", "bn", [a], role="branch_a")
    b = e.conv("b_pw", src, _pw(c, c), f["conv_bn"], f["conv_relu"], role="branch_b")
    b = e.conv("b_dw", b, _dw(c, 2), f["conv_bn"], f["conv_relu"], role="branch_b")
    out = e.add("concat", "concat", [a, b])
    if f["s2_out_bn"]:
        out = e.add("out_bn", "bn", [out])
    if f["s2_out_relu"]:
        out = e.add("out_relu", "relu", [out])
    return BlockFragment(tuple(e.nodes), src, out, 2 * c, 2)


def make_lmb(cfg: LmbConfig, src: str = INPUT, prefix: str = "lmb") -> BlockFragment:
    return (make_lmb_s1 if cfg.stride == 1 else make_lmb_s2)(cfg, src, prefix)


def make_mbv2_bottleneck(
    in_ch: int, out_ch: int, stride: int, t: int, src: str = INPUT, prefix: str = "mbv2"
) -> BlockFragment:
    """Inverted residual: 1x1 expand, 3x3 depthwise, linear 1x1 projection."""
    if stride not in (1, 2):
        raise ConfigurationError(f"bottleneck stride must be 1 or 2, got {stride}")
    if t < 1:
        raise ConfigurationError(f"expansion t must be >= 1, got {t}")
    hidden = t * in_ch
    e = _Emitter(prefix, "mbv2")
    x = e.conv("expand", src, _pw(in_ch, hidden), True, True)
    x = e.conv("dw", x, _dw(hidden, stride), True, True)
    x = e.conv("proj", x, _pw(hidden, out_ch), True, False, role="proj")
    if stride == 1 and in_ch == out_ch:
        x = e.add("add", "eltwise", [x, src])
    return BlockFragment(tuple(e.nodes), src, x, out_ch, stride)


def make_snv2_unit(
    in_ch: int,
    stride: int,
    src: str = INPUT,
    prefix: str = "snv2",
    out_ch: int | None = None,
    downsample: bool | None = None,
) -> BlockFragment:
    """ShuffleNetV2 unit.

    The basic form splits channels in half and convolves one half; the
    downsample form (default when ``stride == 2``) feeds the whole input to two
    convolutional branches.  Stage-opening units that keep stride 1 but change
    width use ``downsample=True`` with an explicit ``out_ch``.
    """
    if stride not in (1, 2):
        raise ConfigurationError(f"unit stride must be 1 or 2, got {stride}")
    if downsample is None:
        downsample = stride == 2
    if out_ch is None:
        out_ch = 2 * in_ch if downsample else in_ch
    e = _Emitter(prefix, "snv2")
    if not downsample:
        if in_ch % 2:
            raise ConfigurationError(f"basic ShuffleNetV2 unit needs even channels, got {in_ch}")
        if out_ch != in_ch:
            raise ConfigurationError("basic ShuffleNetV2 unit cannot change width")
        half = in_ch // 2
        left = e.add("split_l", "slice", [src], start=0, stop=half)
        right = e.add("split_r", "slice", [src], start=half, stop=in_ch)
        r = e.conv("pw1", right, _pw(half, half), True, True)
        r = e.conv("dw", r, _dw(half, 1), True, False)
        r = e.conv("pw2", r, _pw(half, half), True, True)
        cat = e.add("concat", "concat", [left, r])
    else:
        if out_ch % 2:
            raise ConfigurationError(f"downsample unit needs even out_ch, got {out_ch}")
        half = out_ch // 2
        left = e.conv("l_dw", src, _dw(in_ch, stride), True, False)
        left = e.conv("l_pw", left, _pw(in_ch, half), True, True)
        r = e.conv("pw1", src, _pw(in_ch, half), True, True)
        r = e.conv("dw", r, _dw(half, stride), True, False)
        r = e.conv("pw2", r, _pw(half, half), True, True)
        cat = e.add("concat", "concat", [left, r])
    out = e.add("shuffle", "shuffle", [cat], groups=2)
    return BlockFragment(tuple(e.nodes), src, out, out_ch, stride)


def parallel_branches(frag: BlockFragment) -> int:
    """Widest merge in the fragment: the largest input count of any concat
    or eltwise node (a residual skip counts as one branch)."""
    return max((len(n.inputs) for n in frag.nodes if n.kind in ("concat", "eltwise")), default=1)


def lmb_conv_weight_count(c: int, stride: int, branch_expand: int = 2) -> int:
    """Closed-form bias-free conv weight count of one L-Mobilenet block."""
    if stride == 1:
        wide = branch_expand * c
        return 2 * c * wide + 9 * wide + 2 * wide * c
    return c * c + 9 * c

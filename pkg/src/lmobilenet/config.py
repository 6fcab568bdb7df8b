"""Architecture config files (UTF-8 YAML).

Example::

    name: l-mobilenet
    input: [3, 32, 32]
    rows:
      - {op: conv3x3, expand: 1, c: 16, n: 1, s: 1}
      - {op: lmb, expand: 4, c: 32, n: 3, s: 2}
    head: {classes: 10, bn: true, relu: true}
    flags: {conv_bn: true, proj_relu: false}

Schema violations raise ConfigurationError carrying the 1-based line number.
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .blocks import DEFAULT_LMB_FLAGS
from .errors import ConfigurationError
from .graph import ArchConfig, ArchRow, HeadSpec

ROW_FIELDS = ("op", "expand", "c", "n", "s")
HEAD_FIELDS = {"classes": int, "bn": bool, "relu": bool}


def _b(v: bool) -> str:
    return "true" if v else "false"


def dump_config(cfg: ArchConfig) -> str:
    lines = [f"name: {cfg.name}", f"input: [{', '.join(str(v) for v in cfg.input_shape)}]", "rows:"]
    for r in cfg.rows:
        lines.append(f"  - {{op: {r.op}, expand: {r.expand}, c: {r.c}, n: {r.n}, s: {r.s}}}")
    if not cfg.rows:
        lines[-1] = "rows: []"
    h = cfg.head
    lines.append(f"head: {{classes: {h.classes}, bn: {_b(h.bn)}, relu: {_b(h.relu)}}}")
    if cfg.flags:
        lines.append("flags:")
        lines.extend(f"  {k}: {_b(v)}" for k, v in cfg.flags.items())
    else:
        lines.append("flags: {}")
    return "\n".join(lines) + "\n"


class _Bad(Exception):
    def __init__(self, node, msg):
        self.line = node.start_mark.line + 1
        super().__init__(msg)


def _scalar(node, typ, what):
    if not isinstance(node, yaml.ScalarNode):
        raise _Bad(node, f"{what}: expected a scalar")
    value = yaml.safe_load(node.value) if node.tag != "tag:yaml.org,2002:str" else node.value
    if typ is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise _Bad(node, f"{what}: expected an integer, got {node.value!r}")
    if typ is bool and not isinstance(value, bool):
        raise _Bad(node, f"{what}: expected true/false, got {node.value!r}")
    if typ is str:
        value = str(node.value)
    return value


def _mapping(node, what) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise _Bad(node, f"{what}: expected a mapping")
    out = {}
    for k, v in node.value:
        key = _scalar(k, str, what)
        if key in out:
            raise _Bad(k, f"{what}: duplicate key {key!r}")
        out[key] = (k, v)
    return out


def _sequence(node, what) -> list:
    if not isinstance(node, yaml.SequenceNode):
        raise _Bad(node, f"{what}: expected a list")
    return node.value


def _parse(root) -> ArchConfig:
    if root is None:
        raise ConfigurationError("line 1: empty config")
    top = _mapping(root, "config")
    for key, (knode, _) in top.items():
        if key not in ("name", "input", "rows", "head", "flags"):
            raise _Bad(knode, f"unknown top-level field {key!r}")
    for key in ("input", "rows", "head"):
        if key not in top:
            raise _Bad(root, f"missing required field {key!r}")
    name = _scalar(top["name"][1], str, "name") if "name" in top else "model"
    inp = [_scalar(v, int, "input") for v in _sequence(top["input"][1], "input")]
    if len(inp) != 3 or min(inp) < 1:
        raise _Bad(top["input"][1], "input: expected [c, h, w] with positive entries")
    rows = []
    for i, rnode in enumerate(_sequence(top["rows"][1], "rows")):
        fields = _mapping(rnode, f"rows[{i}]")
        for key, (knode, _) in fields.items():
            if key not in ROW_FIELDS:
                raise _Bad(knode, f"rows[{i}]: unknown field {key!r}")
        if "op" not in fields or "c" not in fields:
            raise _Bad(rnode, f"rows[{i}]: 'op' and 'c' are required")
        kw = {"op": _scalar(fields["op"][1], str, f"rows[{i}].op")}
        for key in ROW_FIELDS[1:]:
            if key in fields:
                kw[key] = _scalar(fields[key][1], int, f"rows[{i}].{key}")
        try:
            rows.append(ArchRow(**kw))
        except ConfigurationError as exc:
            raise _Bad(rnode, f"rows[{i}]: {exc}") from None
    hfields = _mapping(top["head"][1], "head")
    hkw = {}
    for key, (knode, vnode) in hfields.items():
        if key not in HEAD_FIELDS:
            raise _Bad(knode, f"head: unknown field {key!r}")
        hkw[key] = _scalar(vnode, HEAD_FIELDS[key], f"head.{key}")
    try:
        head = HeadSpec(**hkw)
    except ConfigurationError as exc:
        raise _Bad(top["head"][1], f"head: {exc}") from None
    flags = {}
    if "flags" in top:
        for key, (knode, vnode) in _mapping(top["flags"][1], "flags").items():
            if key not in DEFAULT_LMB_FLAGS:
                raise _Bad(knode, f"flags: unknown flag {key!r}")
            flags[key] = _scalar(vnode, bool, f"flags.{key}")
    return ArchConfig(name, tuple(inp), tuple(rows), head, flags)


def parse_config(text: str) -> ArchConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        return _parse(root)
    except _Bad as exc:
        raise ConfigurationError(f"line {exc.line}: {exc}") from None
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else 1
        raise ConfigurationError(f"line {line}: {exc.problem}") from None


def load_config(path) -> ArchConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))

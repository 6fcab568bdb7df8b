"""The shipped architectures, expressed as architecture rows."""

from __future__ import annotations

from .blocks import DEFAULT_LMB_FLAGS
from .errors import ConfigurationError
from .graph import ArchConfig, ArchRow, HeadSpec, ModelGraph

CIFAR_INPUT = (3, 32, 32)


def lmobilenet_config(num_classes: int = 10, name: str = "l-mobilenet") -> ArchConfig:
    # stem 16, then four stages opened by a stride-2 block (width doubles) and
    # followed by stride-1 blocks: 2, 2, 2, 1.
    rows = (
        ArchRow("conv3x3", 1, 16, 1, 1),
        ArchRow("lmb", 4, 32, 3, 2),
        ArchRow("lmb", 4, 64, 3, 2),
        ArchRow("lmb", 4, 128, 3, 2),
        ArchRow("lmb", 4, 256, 2, 2),
    )
    return ArchConfig(name, CIFAR_INPUT, rows, HeadSpec(num_classes, bn=True, relu=True), dict(DEFAULT_LMB_FLAGS))


def lmobilenet_narrow_config(num_classes: int = 10, name: str = "l-mobilenet-narrow") -> ArchConfig:
    rows = (
        ArchRow("conv3x3", 1, 8, 1, 1),
        ArchRow("lmb", 4, 16, 2, 2),
        ArchRow("lmb", 4, 32, 2, 2),
    )
    return ArchConfig(name, CIFAR_INPUT, rows, HeadSpec(num_classes, bn=True, relu=True), dict(DEFAULT_LMB_FLAGS))


def mobilenetv2_config(num_classes: int = 1000, name: str = "mobilenetv2") -> ArchConfig:
    # width 1.0; on 32x32 inputs only the 64- and 160-channel stages stride.
    rows = (
        ArchRow("input_bn", 1, 3, 1, 1),
        ArchRow("conv3x3", 1, 32, 1, 1),
        ArchRow("mbv2", 1, 16, 1, 1),
        ArchRow("mbv2", 6, 24, 2, 1),
        ArchRow("mbv2", 6, 32, 3, 1),
        ArchRow("mbv2", 6, 64, 4, 2),
        ArchRow("mbv2", 6, 96, 3, 1),
        ArchRow("mbv2", 6, 160, 3, 2),
        ArchRow("mbv2", 6, 320, 1, 1),
        ArchRow("conv1x1", 1, 1280, 1, 1),
    )
    return ArchConfig(name, CIFAR_INPUT, rows, HeadSpec(num_classes), {})


def shufflenetv2_config(num_classes: int = 1000, name: str = "shufflenetv2") -> ArchConfig:
    # 1x widths; stage 2 keeps stride 1 on CIFAR, stages 3 and 4 stride 2.
    rows = (
        ArchRow("conv3x3", 1, 24, 1, 1),
        ArchRow("snv2", 1, 116, 4, 1),
        ArchRow("snv2", 1, 232, 8, 2),
        ArchRow("snv2", 1, 464, 4, 2),
        ArchRow("conv1x1", 1, 1024, 1, 1),
    )
    return ArchConfig(name, CIFAR_INPUT, rows, HeadSpec(num_classes), {})


PRESETS = {
    "l-mobilenet": lmobilenet_config,
    "l-mobilenet-narrow": lmobilenet_narrow_config,
    "mobilenetv2": mobilenetv2_config,
    "shufflenetv2": shufflenetv2_config,
}


def preset_config(name: str, num_classes: int | None = None) -> ArchConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r} (known: {', '.join(PRESETS)})") from None
    return factory() if num_classes is None else factory(num_classes)


def preset_lmobilenet(num_classes: int = 10) -> ModelGraph:
    return lmobilenet_config(num_classes).build()


def preset_mobilenetv2(num_classes: int = 1000) -> ModelGraph:
    return mobilenetv2_config(num_classes).build()


def preset_shufflenetv2(num_classes: int = 1000) -> ModelGraph:
    return shufflenetv2_config(num_classes).build()

"""Precision planning and cost accounting over layer manifests.

A manifest lists a model's layers with parameter counts (and, for
convolutions, the dimensions needed for MAC counting).  The partition
rule assigns compute precision by operator kind:

  * Conv / DepthwiseConv / PointwiseConv / Linear -> binary16
  * BatchNorm and Loss -> binary32 (always)
  * Parameter-free kinds (ReLU, AvgPool, ResidualAdd) are tagged
    binary16 for bookkeeping but contribute zero bytes.

Model bytes are ``sum(param_count * width)`` with width 2 for binary16
and 4 for binary32.  A batch norm's parameter count covers all four of
its per-channel vectors (scale, shift, running mean, running variance):
serialized models store the running statistics alongside the trained
vectors, and all four stay in binary32.

The ``Metadata`` kind models precision-independent serialization
overhead (graph structure, tensor names, node attributes) observed in
on-disk model files; it always counts at 4 bytes and never quantizes.

Multiply-accumulate counts per output map of ``out_h * out_w``:

  * standard conv:   k*k * in * out * out_h * out_w
  * depthwise conv:  k*k * in * out_h * out_w
  * pointwise conv:  in * out * out_h * out_w

Manifest files are comma-separated text, one layer per line::

    name,op_kind,param_count[,k,in,out,stride,out_h,out_w]

Plan files map layers to precisions: ``name,Binary16|Binary32``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .io import atomic_write_bytes
from .layers import ConvKind, ConvSpec
from .tensor import Precision

__all__ = [
    "OpKind",
    "ConvDims",
    "ManifestEntry",
    "LayerManifest",
    "partition",
    "binary32_plan",
    "model_size_bytes",
    "mac_count",
    "manifest_macs",
    "load_manifest",
    "save_manifest",
    "load_plan",
    "save_plan",
]


class OpKind(enum.Enum):
    CONV = "Conv"
    DEPTHWISE_CONV = "DepthwiseConv"
    POINTWISE_CONV = "PointwiseConv"
    LINEAR = "Linear"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    AVG_POOL = "AvgPool"
    RESIDUAL_ADD = "ResidualAdd"
    LOSS = "Loss"
    METADATA = "Metadata"

    @classmethod
    def parse(cls, text: str) -> "OpKind":
        for kind in cls:
            if kind.value == text.strip():
                return kind
        raise ValueError(f"unknown op kind {text!r}")


PARAM_FREE = {OpKind.RELU, OpKind.AVG_POOL, OpKind.RESIDUAL_ADD}
HALF_KINDS = {OpKind.CONV, OpKind.DEPTHWISE_CONV, OpKind.POINTWISE_CONV, OpKind.LINEAR}
CONV_KINDS = {OpKind.CONV, OpKind.DEPTHWISE_CONV, OpKind.POINTWISE_CONV}


@dataclass(frozen=True)
class ConvDims:
    """Shape columns a conv entry carries for MAC accounting."""

    k: int
    in_channels: int
    out_channels: int
    stride: int
    out_h: int
    out_w: int


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    kind: OpKind
    param_count: int
    conv: ConvDims | None = None

    def __post_init__(self) -> None:
        if self.param_count < 0:
            raise ValueError(f"{self.name}: negative parameter count")
        if self.kind in PARAM_FREE and self.param_count != 0:
            raise ValueError(f"{self.name}: {self.kind.value} carries no parameters")
        if self.conv is not None and self.kind not in CONV_KINDS:
            raise ValueError(f"{self.name}: shape columns only apply to convolutions")


@dataclass
class LayerManifest:
    entries: list[ManifestEntry]

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("manifest layer names must be unique")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def total_params(self) -> int:
        return sum(e.param_count for e in self.entries)


def partition(manifest: LayerManifest) -> dict[str, Precision]:
    """Assign each layer its compute precision by operator kind."""
    plan: dict[str, Precision] = {}
    for e in manifest:
        if e.kind in HALF_KINDS or e.kind in PARAM_FREE:
            plan[e.name] = Precision.BINARY16
        else:  # BatchNorm, Loss, Metadata stay wide
            plan[e.name] = Precision.BINARY32
    return plan


def binary32_plan(manifest: LayerManifest) -> dict[str, Precision]:
    """The all-binary32 baseline plan."""
    return {e.name: Precision.BINARY32 for e in manifest}


def model_size_bytes(manifest: LayerManifest, plan: dict[str, Precision]
                     ) -> tuple[int, list[tuple[str, Precision, int]]]:
    """Serialized parameter bytes under a plan.

    Returns the total and per-layer ``(name, precision, bytes)`` rows.
    Metadata rows always count at 4 bytes per unit regardless of plan.
    """
    rows: list[tuple[str, Precision, int]] = []
    total = 0
    for e in manifest:
        try:
            precision = plan[e.name]
        except KeyError:
            raise ValueError(f"plan does not cover layer {e.name!r}") from None
        if e.kind is OpKind.METADATA:
            width = 4
        else:
            width = 2 if precision is Precision.BINARY16 else 4
        nbytes = e.param_count * width
        rows.append((e.name, precision, nbytes))
        total += nbytes
    return total, rows


def mac_count(spec: ConvSpec, out_h: int, out_w: int) -> int:
    """Multiply-accumulates for one convolution over an output map."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output map must be at least 1x1")
    area = out_h * out_w
    if spec.kind is ConvKind.STANDARD:
        return spec.k * spec.k * spec.in_channels * spec.out_channels * area
    if spec.kind is ConvKind.DEPTHWISE:
        return spec.k * spec.k * spec.in_channels * area
    return spec.in_channels * spec.out_channels * area


_KIND_TO_CONV = {
    OpKind.CONV: ConvKind.STANDARD,
    OpKind.DEPTHWISE_CONV: ConvKind.DEPTHWISE,
    OpKind.POINTWISE_CONV: ConvKind.POINTWISE,
}


def manifest_macs(manifest: LayerManifest) -> int:
    """Total MACs over all conv entries that carry shape columns."""
    total = 0
    for e in manifest:
        if e.kind in CONV_KINDS and e.conv is not None:
            spec = ConvSpec(_KIND_TO_CONV[e.kind], e.conv.k, e.conv.in_channels,
                            e.conv.out_channels, e.conv.stride)
            total += mac_count(spec, e.conv.out_h, e.conv.out_w)
    return total


def save_manifest(path: str, manifest: LayerManifest) -> None:
    lines = ["# name,op_kind,param_count[,k,in,out,stride,out_h,out_w]"]
    for e in manifest:
        cols = [e.name, e.kind.value, str(e.param_count)]
        if e.conv is not None:
            c = e.conv
            cols += [str(v) for v in (c.k, c.in_channels, c.out_channels,
                                      c.stride, c.out_h, c.out_w)]
        lines.append(",".join(cols))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_manifest(path: str) -> LayerManifest:
    entries: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = [c.strip() for c in line.split(",")]
            if len(cols) not in (3, 9):
                raise ValueError(f"{path}:{lineno}: expected 3 or 9 columns, got {len(cols)}")
            kind = OpKind.parse(cols[1])
            conv = None
            if len(cols) == 9:
                conv = ConvDims(*(int(c) for c in cols[3:9]))
            entries.append(ManifestEntry(cols[0], kind, int(cols[2]), conv))
    return LayerManifest(entries)


def save_plan(path: str, plan: dict[str, Precision]) -> None:
    label = {Precision.BINARY16: "Binary16", Precision.BINARY32: "Binary32"}
    lines = ["# name,precision"]
    lines += [f"{name},{label[mode]}" for name, mode in plan.items()]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_plan(path: str) -> dict[str, Precision]:
    plan: dict[str, Precision] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            cols = [c.strip() for c in line.split(",")]
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected name,precision")
            if cols[0] in plan:
                raise ValueError(f"{path}:{lineno}: duplicate layer {cols[0]!r}")
            plan[cols[0]] = Precision.parse(cols[1])
    return plan

"""Mode-tagged dense tensors.

A :class:`Tensor` is a float32 buffer plus a precision mode.  Binary32
tensors hold their values as-is.  Binary16 tensors are *emulated*: the
buffer stays float32 (stored wide), but every store rounds the values
through binary16 first, so the buffer only ever contains values that
survive a binary16 round trip bit-exactly.  Accumulations inside kernels
always run in binary32.

Kernels are pure functions of their inputs, so batch-level parallelism
is safe; nothing here mutates shared state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .half import is_f16_exact, quantize_f16

__all__ = ["Precision", "PrecisionViolation", "Tensor", "tensor32", "tensor16"]


class Precision(enum.Enum):
    """Numeric mode of a tensor or a planned layer.

    BINARY16 is software-emulated: storage stays float32 and every store
    quantizes through binary16 (see module docstring).
    """

    BINARY32 = "binary32"
    BINARY16 = "binary16"

    @classmethod
    def parse(cls, text: str) -> "Precision":
        t = text.strip().lower()
        for p in cls:
            if p.value == t:
                return p
        raise ValueError(f"unknown precision {text!r}; expected binary32 or binary16")

    def __str__(self) -> str:
        return self.value


class PrecisionViolation(Exception):
    """An operation received a tensor in a precision it refuses to run at."""


@dataclass
class Tensor:
    """Dense float32 buffer with a precision mode tag."""

    data: np.ndarray
    mode: Precision = Precision.BINARY32

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float32))
        if self.mode is Precision.BINARY16:
            arr = quantize_f16(arr)
        self.data = arr

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def to(self, mode: Precision) -> "Tensor":
        """Retag (and for binary16, re-quantize) without copying semantics.

        Widening binary16 -> binary32 is exact: the stored values do not
        change, only the tag.  Narrowing rounds every element once.
        """
        if mode is self.mode:
            return self
        return Tensor(self.data, mode)

    def survives_roundtrip(self) -> bool:
        return is_f16_exact(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, mode={self.mode.value})"


def tensor32(data) -> Tensor:
    return Tensor(data, Precision.BINARY32)


def tensor16(data) -> Tensor:
    return Tensor(data, Precision.BINARY16)

"""Dense NHWC tensor containers shared by every stage of the pipeline.

All tensors are immutable after construction (the backing numpy buffer is
marked read-only) so they can be shared freely across threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

import numpy as np

if TYPE_CHECKING:
    from .quant import QuantParams

# Largest element count we accept; keeps flat offsets inside a signed 64-bit int.
_MAX_ELEMENTS = 2**63 - 1


def symmetric_bounds(bits: int) -> tuple[int, int]:
    """Signed symmetric code range for a k-bit tensor.

    The most negative two's-complement code is excluded so negation of any
    valid code is itself a valid code.
    """
    if bits not in (4, 8):
        raise ValueError(f"unsupported bit width {bits}; expected 4 or 8")
    hi = 2 ** (bits - 1) - 1
    return -hi, hi


@dataclass(frozen=True)
class Shape4:
    """NHWC shape: batch, rows, columns, channels."""

    n: int
    h: int
    w: int
    c: int

    def __post_init__(self) -> None:
        for name, dim in zip("nhwc", self.dims):
            if not isinstance(dim, (int, np.integer)) or dim < 1:
                raise ValueError(f"dim {name}={dim} must be a positive integer")
        if self.n * self.h * self.w * self.c > _MAX_ELEMENTS:
            raise ValueError("element count overflows 63-bit range")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.n, self.h, self.w, self.c)

    @property
    def num_elements(self) -> int:
        return self.n * self.h * self.w * self.c

    def flat_offset(self, n: int, h: int, w: int, c: int) -> int:
        """Flat NHWC offset; channels are contiguous."""
        if not (0 <= n < self.n and 0 <= h < self.h and 0 <= w < self.w and 0 <= c < self.c):
            raise IndexError(f"index ({n},{h},{w},{c}) out of range for shape {self.dims}")
        return ((n * self.h + h) * self.w + w) * self.c + c


def _freeze(data: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(data)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FloatTensor:
    """32-bit real tensor in NHWC layout."""

    shape: Shape4
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float32).reshape(self.shape.dims)
        object.__setattr__(self, "data", _freeze(arr))

    def at(self, n: int, h: int, w: int, c: int) -> float:
        return float(self.data[n, h, w, c])


@dataclass(frozen=True)
class QuantTensor:
    """Signed integer tensor with a symmetric k-bit code range.

    ``bits`` is 4 for weights or 8 for activations; codes live in int8 storage
    either way. ``qparams`` carries the quantizer step(s) when known.
    """

    shape: Shape4
    data: np.ndarray
    bits: int = 8
    qparams: "QuantParams | None" = None

    def __post_init__(self) -> None:
        lo, hi = symmetric_bounds(self.bits)
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("QuantTensor data must be integer typed")
        if arr.size and (arr.min() < lo or arr.max() > hi):
            raise ValueError(f"codes outside symmetric {self.bits}-bit range [{lo},{hi}]")
        arr = arr.astype(np.int8).reshape(self.shape.dims)
        object.__setattr__(self, "data", _freeze(arr))

    def at(self, n: int, h: int, w: int, c: int) -> int:
        return int(self.data[n, h, w, c])


@dataclass(frozen=True)
class AccumTensor:
    """32-bit accumulator holding exact integer sums of code products."""

    shape: Shape4
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("AccumTensor data must be integer typed")
        info = np.iinfo(np.int32)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ValueError("accumulator value outside 32-bit range")
        arr = arr.astype(np.int32).reshape(self.shape.dims)
        object.__setattr__(self, "data", _freeze(arr))

    def at(self, n: int, h: int, w: int, c: int) -> int:
        return int(self.data[n, h, w, c])


Tensor = Union[FloatTensor, QuantTensor, AccumTensor]


def new_tensor(shape: Shape4, fill: float, bits: int | None = None) -> Tensor:
    """Constant-filled tensor; ``bits`` of 4 or 8 selects an integer tensor."""
    if bits is None:
        return FloatTensor(shape, np.full(shape.dims, fill, dtype=np.float32))
    lo, hi = symmetric_bounds(bits)
    fill_i = int(fill)
    if fill_i != fill or not (lo <= fill_i <= hi):
        raise ValueError(f"fill {fill} outside symmetric {bits}-bit range [{lo},{hi}]")
    return QuantTensor(shape, np.full(shape.dims, fill_i, dtype=np.int8), bits=bits)


def index(t: Tensor, n: int, h: int, w: int, c: int):
    """Element at (n,h,w,c); raises IndexError when out of range."""
    t.shape.flat_offset(n, h, w, c)  # bounds check with NHWC semantics
    return t.at(n, h, w, c)


def with_element(t: Tensor, n: int, h: int, w: int, c: int, value) -> Tensor:
    """Copy of ``t`` with one element replaced (tensors are immutable)."""
    t.shape.flat_offset(n, h, w, c)
    data = t.data.copy()
    data[n, h, w, c] = value
    if isinstance(t, QuantTensor):
        return QuantTensor(t.shape, data, bits=t.bits, qparams=t.qparams)
    if isinstance(t, AccumTensor):
        return AccumTensor(t.shape, data)
    return FloatTensor(t.shape, data)

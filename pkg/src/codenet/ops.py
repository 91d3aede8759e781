"""Convolution operator family: float references and the integer kernels.

Weight layout conventions (NHWC-friendly, output channels contiguous):
  full k x k : shape (ic, k, k, oc)
  depthwise  : shape (1, k, k, c)
  1 x 1      : shape (ic, 1, 1, oc)

Deformable sampling is anchored at the output-aligned window center, so a
3x3 kernel at stride 1 / pad 1 with zero displacements reduces exactly to the
regular convolution. Integer kernels gather whole pixels (no interpolation),
accumulate in 32 bits tap-major and requantize to 8-bit codes; out-of-bounds
samples read as zero in both the float and integer paths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import RequantParams, requantize, round_half_away
from .tensor import AccumTensor, FloatTensor, QuantTensor, Shape4

FREE_FRAC = "free_frac"
FREE_INT = "free_int"
BOUNDED_INT = "bounded_int"
SQUARE = "square"

_TAPS = [(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)]  # row-major 3x3 grid


@dataclass(frozen=True)
class ConvSpec:
    kernel: int = 3
    stride: int = 1
    depthwise: bool = False
    padding: int = 1

    def __post_init__(self) -> None:
        if self.kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        if self.stride not in (1, 2, 4):
            raise ValueError("stride must be 1, 2 or 4")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError("spatial dims collapse to zero")
        return oh, ow


@dataclass(frozen=True)
class OffsetField:
    """Per-output-position sampling displacements.

    Free modes store (n, h, w, 9, 2) arrays ordered (dy, dx) per row-major
    tap; square mode stores one non-negative half-width d per position with
    shape (n, h, w). ``lo``/``hi`` document the clipped range for the integer
    modes.
    """

    mode: str
    data: np.ndarray
    lo: int = 0
    hi: int = 0

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if self.mode in (FREE_FRAC, FREE_INT, BOUNDED_INT):
            if data.ndim != 5 or data.shape[3:] != (9, 2):
                raise ValueError("free-mode offsets need shape (n,h,w,9,2)")
            dtype = np.float64 if self.mode == FREE_FRAC else np.int64
            data = data.astype(dtype)
            if self.mode == BOUNDED_INT and data.size:
                if data.min() < self.lo or data.max() > self.hi:
                    raise ValueError(f"bounded offsets must lie in [{self.lo},{self.hi}]")
        elif self.mode == SQUARE:
            if data.ndim != 3:
                raise ValueError("square-mode offsets need shape (n,h,w)")
            data = data.astype(np.int64)
            if data.size and (data.min() < 0 or data.max() > self.hi):
                raise ValueError(f"square half-widths must lie in [0,{self.hi}]")
        else:
            raise ValueError(f"unknown offset mode {self.mode!r}")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    def displacements(self) -> np.ndarray:
        """(n, h, w, 9, 2) integer displacements, expanding square mode."""
        if self.mode == SQUARE:
            return square_expand(self.data)
        if self.mode == FREE_FRAC:
            raise ValueError("fractional offsets have no integer displacement form")
        return self.data


def zero_offsets(n: int, h: int, w: int, mode: str = BOUNDED_INT, lo: int = 0, hi: int = 0) -> OffsetField:
    if mode == SQUARE:
        return OffsetField(SQUARE, np.zeros((n, h, w), dtype=np.int64), lo=lo, hi=hi)
    return OffsetField(mode, np.zeros((n, h, w, 9, 2)), lo=lo, hi=hi)


def square_expand(d: np.ndarray) -> np.ndarray:
    """Expand per-position half-widths into the nine tap displacements.

    Taps sit on {-d, 0, d} x {-d, 0, d} relative to the window center, i.e. a
    dilated 3x3 pattern with a spatially varying dilation factor; d = 1 is the
    standard neighborhood and d = 0 collapses all taps onto the center.
    """
    d = np.asarray(d, dtype=np.int64)
    if d.size and d.min() < 0:
        raise ValueError("square half-widths must be non-negative")
    grid = np.array(_TAPS, dtype=np.int64)  # (9, 2)
    return d[..., None, None] * grid


def clip_offsets(off: OffsetField, lo: int, hi: int) -> OffsetField:
    """Round fractional offsets to integers, then clamp into [lo, hi]."""
    if lo > hi:
        raise ValueError(f"empty range [{lo},{hi}]")
    if off.mode == SQUARE:
        d = np.clip(off.data, max(lo, 0), hi)
        return OffsetField(SQUARE, d, lo=max(lo, 0), hi=hi)
    vals = off.data
    if off.mode == FREE_FRAC:
        vals = round_half_away(vals)
    vals = np.clip(vals.astype(np.int64), lo, hi)
    return OffsetField(BOUNDED_INT, vals, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# Float reference path
# ---------------------------------------------------------------------------

def conv_ref(x: FloatTensor, w: FloatTensor, spec: ConvSpec) -> FloatTensor:
    """Direct zero-padded convolution, full or depthwise."""
    n, h, wdt, ic = x.shape.dims
    kh, kw = w.shape.h, w.shape.w
    if kh != spec.kernel or kw != spec.kernel:
        raise ValueError(f"weight kernel {kh}x{kw} does not match spec {spec.kernel}")
    oh, ow = spec.out_hw(h, wdt)
    pad = spec.padding
    xp = np.zeros((n, h + 2 * pad, wdt + 2 * pad, ic), dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + wdt, :] = x.data
    if spec.depthwise:
        if w.shape.n != 1 or w.shape.c != ic:
            raise ValueError("depthwise weights must have shape (1,k,k,c) with c matching input")
        acc = np.zeros((n, oh, ow, ic), dtype=np.float64)
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[:, ky:ky + oh * spec.stride:spec.stride, kx:kx + ow * spec.stride:spec.stride, :]
                acc += patch * w.data[0, ky, kx, :].astype(np.float64)
        return FloatTensor(Shape4(n, oh, ow, ic), acc)
    if w.shape.n != ic:
        raise ValueError(f"weight input channels {w.shape.n} do not match tensor channels {ic}")
    oc = w.shape.c
    acc = np.zeros((n, oh, ow, oc), dtype=np.float64)
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, ky:ky + oh * spec.stride:spec.stride, kx:kx + ow * spec.stride:spec.stride, :]
            acc += np.einsum("nhwi,io->nhwo", patch, w.data[:, ky, kx, :].astype(np.float64))
    return FloatTensor(Shape4(n, oh, ow, oc), acc)


def bilinear_sample(x: FloatTensor, py: float, px: float, c: int, n: int = 0) -> float:
    """Four-neighbor weighted sample; coordinates beyond the grid read zero."""
    data = x.data
    h, w = x.shape.h, x.shape.w
    y0 = int(np.floor(py))
    x0 = int(np.floor(px))
    fy = py - y0
    fx = px - x0
    total = 0.0
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xx < w and wy * wx != 0.0:
                total += wy * wx * float(data[n, yy, xx, c])
    return total


def _bilinear_gather(xp: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling of (n,H,W,C) at per-position coordinates."""
    n, h, w, c = xp.shape
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    fy = py - y0
    fx = px - x0
    out = np.zeros(py.shape + (c,), dtype=np.float64)
    nn = np.arange(n).reshape(-1, 1, 1)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = xp[nn, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), :]
        out += (wgt * valid)[..., None] * vals
    return out


def deform_conv_ref(x: FloatTensor, w: FloatTensor, off: OffsetField, spec: ConvSpec) -> FloatTensor:
    """Float deformable 3x3 convolution with fractional offsets."""
    if off.mode != FREE_FRAC:
        raise ValueError("reference deformable convolution expects free fractional offsets")
    if spec.kernel != 3:
        raise ValueError("deformable convolution is defined for 3x3 kernels")
    n, h, wdt, ic = x.shape.dims
    oh, ow = spec.out_hw(h, wdt)
    if off.spatial != (n, oh, ow):
        raise ValueError("offset field spatial shape must match the output")
    oy = np.arange(oh) * spec.stride - spec.padding + 1
    ox = np.arange(ow) * spec.stride - spec.padding + 1
    cy = np.broadcast_to(oy[None, :, None], (n, oh, ow)).astype(np.float64)
    cx = np.broadcast_to(ox[None, None, :], (n, oh, ow)).astype(np.float64)
    depthwise = spec.depthwise
    oc = x.shape.c if depthwise else w.shape.c
    acc = np.zeros((n, oh, ow, oc), dtype=np.float64)
    for tap, (gy, gx) in enumerate(_TAPS):
        py = cy + gy + off.data[..., tap, 0]
        px = cx + gx + off.data[..., tap, 1]
        sampled = _bilinear_gather(x.data.astype(np.float64), py, px)
        ky, kx = gy + 1, gx + 1
        if depthwise:
            acc += sampled * w.data[0, ky, kx, :].astype(np.float64)
        else:
            acc += np.einsum("nhwi,io->nhwo", sampled, w.data[:, ky, kx, :].astype(np.float64))
    return FloatTensor(Shape4(n, oh, ow, oc), acc)


# ---------------------------------------------------------------------------
# Integer kernels mirroring the accelerator engines
# ---------------------------------------------------------------------------

def _check_quant_inputs(x: QuantTensor, w: QuantTensor) -> None:
    if x.bits != 8:
        raise ValueError("activations must be 8-bit codes")
    if w.bits != 4:
        raise ValueError("weights must be 4-bit codes")


def conv1x1_acc(x: QuantTensor, w: QuantTensor) -> AccumTensor:
    """32-bit accumulator of a pointwise convolution."""
    _check_quant_inputs(x, w)
    n, h, wd, ic = x.shape.dims
    if w.shape.h != 1 or w.shape.w != 1 or w.shape.n != ic:
        raise ValueError(f"1x1 weights must have shape (ic,1,1,oc) with ic={ic}")
    oc = w.shape.c
    acc = x.data.astype(np.int64).reshape(-1, ic) @ w.data.astype(np.int64).reshape(ic, oc)
    return AccumTensor(Shape4(n, h, wd, oc), acc.reshape(n, h, wd, oc))


def conv1x1_q(x: QuantTensor, w: QuantTensor, rp: RequantParams) -> QuantTensor:
    """Pointwise integer convolution plus requantization.

    The accumulation is a plain integer dot product over input channels, so
    the result is independent of any internal tiling order.
    """
    return requantize(conv1x1_acc(x, w), rp)


def dw3x3_acc(x: QuantTensor, w: QuantTensor, spec: ConvSpec) -> AccumTensor:
    """Regular depthwise 3x3 accumulator (tap-sliced, no gather)."""
    _check_quant_inputs(x, w)
    if not spec.depthwise or spec.kernel != 3:
        raise ValueError("dw3x3 expects a depthwise 3x3 spec")
    n, h, wd, c = x.shape.dims
    if w.shape.n != 1 or w.shape.h != 3 or w.shape.w != 3 or w.shape.c != c:
        raise ValueError("depthwise weights must have shape (1,3,3,c)")
    oh, ow = spec.out_hw(h, wd)
    pad = spec.padding
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=np.int64)
    xp[:, pad:pad + h, pad:pad + wd, :] = x.data
    acc = np.zeros((n, oh, ow, c), dtype=np.int64)
    for ky in range(3):
        for kx in range(3):
            patch = xp[:, ky:ky + oh * spec.stride:spec.stride, kx:kx + ow * spec.stride:spec.stride, :]
            acc += patch * w.data[0, ky, kx, :].astype(np.int64)
    return AccumTensor(Shape4(n, oh, ow, c), acc)


def dw3x3_q(x: QuantTensor, w: QuantTensor, spec: ConvSpec, rp: RequantParams) -> QuantTensor:
    return requantize(dw3x3_acc(x, w, spec), rp)


def conv3x3_full_q(x: QuantTensor, w: QuantTensor, spec: ConvSpec, rp: RequantParams) -> QuantTensor:
    """Full 3x3 integer convolution (the stem layer; runs on the host)."""
    _check_quant_inputs(x, w)
    if spec.depthwise or spec.kernel != 3:
        raise ValueError("conv3x3_full expects a full 3x3 spec")
    n, h, wd, ic = x.shape.dims
    if w.shape.n != ic or w.shape.h != 3 or w.shape.w != 3:
        raise ValueError("full 3x3 weights must have shape (ic,3,3,oc)")
    oc = w.shape.c
    oh, ow = spec.out_hw(h, wd)
    pad = spec.padding
    xp = np.zeros((n, h + 2 * pad, wd + 2 * pad, ic), dtype=np.int64)
    xp[:, pad:pad + h, pad:pad + wd, :] = x.data
    acc = np.zeros((n, oh, ow, oc), dtype=np.int64)
    for ky in range(3):
        for kx in range(3):
            patch = xp[:, ky:ky + oh * spec.stride:spec.stride, kx:kx + ow * spec.stride:spec.stride, :]
            acc += np.einsum("nhwi,io->nhwo", patch, w.data[:, ky, kx, :].astype(np.int64))
    return requantize(AccumTensor(Shape4(n, oh, ow, oc), acc), rp)


def deform_conv_acc(x: QuantTensor, w: QuantTensor, off: OffsetField, spec: ConvSpec) -> AccumTensor:
    """Integer-gather depthwise deformable accumulator.

    Offsets must already be integers (free_int, bounded_int or square); a
    fractional field is rejected since the engine performs no interpolation.
    Sampled positions falling outside the map contribute zero.
    """
    _check_quant_inputs(x, w)
    if off.mode == FREE_FRAC:
        raise ValueError("integer kernel requires integer offsets; round and clip first")
    if not spec.depthwise or spec.kernel != 3:
        raise ValueError("deform_conv_q supports depthwise 3x3 only")
    n, h, wd, c = x.shape.dims
    if w.shape.n != 1 or w.shape.h != 3 or w.shape.w != 3 or w.shape.c != c:
        raise ValueError("depthwise weights must have shape (1,3,3,c)")
    oh, ow = spec.out_hw(h, wd)
    if off.spatial != (n, oh, ow):
        raise ValueError("offset field spatial shape must match the output")
    disp = off.displacements()
    oy = np.arange(oh) * spec.stride - spec.padding + 1
    ox = np.arange(ow) * spec.stride - spec.padding + 1
    cy = np.broadcast_to(oy[None, :, None], (n, oh, ow))
    cx = np.broadcast_to(ox[None, None, :], (n, oh, ow))
    data = x.data.astype(np.int64)
    nn = np.arange(n).reshape(-1, 1, 1)
    acc = np.zeros((n, oh, ow, c), dtype=np.int64)
    for tap, (gy, gx) in enumerate(_TAPS):
        if off.mode == SQUARE:
            iy = cy + disp[..., tap, 0]
            ix = cx + disp[..., tap, 1]
        else:
            iy = cy + gy + disp[..., tap, 0]
            ix = cx + gx + disp[..., tap, 1]
        valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < wd)
        vals = data[nn, np.clip(iy, 0, h - 1), np.clip(ix, 0, wd - 1), :]
        acc += vals * valid[..., None] * w.data[0, gy + 1, gx + 1, :].astype(np.int64)
    return AccumTensor(Shape4(n, oh, ow, c), acc)


def deform_conv_q(x: QuantTensor, w: QuantTensor, off: OffsetField, spec: ConvSpec, rp: RequantParams) -> QuantTensor:
    return requantize(deform_conv_acc(x, w, off, spec), rp)


def offset_gen(
    x: QuantTensor,
    w_off: QuantTensor,
    rp: RequantParams,
    mode: str,
    lo: int = -8,
    hi: int = 7,
    path: str = "requant",
) -> OffsetField:
    """Generate integer sampling offsets with a 1x1 convolution.

    ``path='requant'`` (default) requantizes the accumulator to 8-bit codes
    and rounds the dequantized values to integers; ``path='direct'`` rounds
    straight from the 32-bit accumulator without the 8-bit bottleneck. Both
    end with a clip into [lo, hi] ([max(lo,0), hi] for square mode).
    """
    expected = 1 if mode == SQUARE else 18
    if w_off.shape.c != expected:
        raise ValueError(f"offset weights for mode {mode!r} need {expected} output channels, got {w_off.shape.c}")
    if path == "requant":
        q = conv1x1_q(x, w_off, rp)
        reals = q.data.astype(np.float64) * rp.out_delta
    elif path == "direct":
        acc = conv1x1_acc(x, w_off)
        m, s, b = rp.multiplier, rp.shift, rp.bias
        factor = m.astype(np.float64) * np.exp2(-s.astype(np.float64)) * rp.out_delta
        reals = acc.data.astype(np.float64) * factor + b.astype(np.float64) * rp.out_delta
    else:
        raise ValueError(f"unknown offset path {path!r}")
    ints = round_half_away(reals).astype(np.int64)
    n, oh, ow = x.shape.n, x.shape.h, x.shape.w
    if mode == SQUARE:
        d = np.clip(ints[..., 0], max(lo, 0), hi)
        return OffsetField(SQUARE, d, lo=max(lo, 0), hi=hi)
    field = ints.reshape(n, oh, ow, 9, 2)
    return OffsetField(BOUNDED_INT, np.clip(field, lo, hi), lo=lo, hi=hi)


# ---------------------------------------------------------------------------
# Code-domain helpers used by the network executor
# ---------------------------------------------------------------------------

def maxpool2x2(x: QuantTensor) -> QuantTensor:
    n, h, w, c = x.shape.dims
    if h % 2 or w % 2:
        raise ValueError("maxpool2x2 needs even spatial dims")
    d = x.data.reshape(n, h // 2, 2, w // 2, 2, c)
    return QuantTensor(Shape4(n, h // 2, w // 2, c), d.max(axis=(2, 4)), bits=x.bits, qparams=x.qparams)


def upsample2x_nearest(x: QuantTensor) -> QuantTensor:
    n, h, w, c = x.shape.dims
    d = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return QuantTensor(Shape4(n, 2 * h, 2 * w, c), d, bits=x.bits, qparams=x.qparams)


def split_half(x: QuantTensor) -> tuple[QuantTensor, QuantTensor]:
    n, h, w, c = x.shape.dims
    if c % 2:
        raise ValueError("split_half needs an even channel count")
    half = c // 2
    mk = lambda d: QuantTensor(Shape4(n, h, w, half), d, bits=x.bits, qparams=x.qparams)
    return mk(x.data[..., :half]), mk(x.data[..., half:])


def concat(a: QuantTensor, b: QuantTensor) -> QuantTensor:
    if a.shape.dims[:3] != b.shape.dims[:3]:
        raise ValueError("concat inputs must share n/h/w dims")
    n, h, w, _ = a.shape.dims
    data = np.concatenate([a.data, b.data], axis=-1)
    return QuantTensor(Shape4(n, h, w, a.shape.c + b.shape.c), data, bits=a.bits, qparams=a.qparams)


def shuffle(x: QuantTensor, groups: int = 2) -> QuantTensor:
    """Channel shuffle: interleave ``groups`` equal channel blocks."""
    n, h, w, c = x.shape.dims
    if c % groups:
        raise ValueError("channel count must divide by groups")
    d = x.data.reshape(n, h, w, groups, c // groups).swapaxes(3, 4).reshape(n, h, w, c)
    return QuantTensor(Shape4(n, h, w, c), d, bits=x.bits, qparams=x.qparams)

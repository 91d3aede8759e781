"""Naive reference implementations used as independent oracles.

Everything here is written as plainly as possible (scalar loops, direct
formula transcriptions) and never calls into the library's vectorized paths.
"""
from __future__ import annotations

import math

import numpy as np


def quantize_scalar(x: float, t: float, bits: int) -> int:
    """Clamp, scale, round half away from zero; one scalar at a time."""
    qmax = 2 ** (bits - 1) - 1
    delta = t / qmax
    clamped = min(max(x, -t), t)
    scaled = clamped / delta
    code = math.floor(abs(scaled) + 0.5)
    if scaled < 0:
        code = -code
    return max(-qmax, min(qmax, code))


def conv2d_loop(x: np.ndarray, w: np.ndarray, stride: int, pad: int, depthwise: bool) -> np.ndarray:
    """Six-nested-loop direct convolution; x is (n,h,w,ic), w is the library
    layout ((ic,k,k,oc) full, (1,k,k,c) depthwise)."""
    n, h, wd, ic = x.shape
    k = w.shape[1]
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    oc = ic if depthwise else w.shape[3]
    out = np.zeros((n, oh, ow, oc))
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                for o in range(oc):
                    acc = 0.0
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride - pad + ky
                            ix = ox * stride - pad + kx
                            if 0 <= iy < h and 0 <= ix < wd:
                                if depthwise:
                                    acc += float(x[b, iy, ix, o]) * float(w[0, ky, kx, o])
                                else:
                                    for i in range(ic):
                                        acc += float(x[b, iy, ix, i]) * float(w[i, ky, kx, o])
                    out[b, oy, ox, o] = acc
    return out


def bilinear_formula(x: np.ndarray, py: float, px: float, c: int, n: int = 0) -> float:
    """Hand-expanded four-term weighted sum with zero padding."""
    h, w = x.shape[1], x.shape[2]
    y0, x0 = math.floor(py), math.floor(px)
    fy, fx = py - y0, px - x0

    def pix(yy: int, xx: int) -> float:
        if 0 <= yy < h and 0 <= xx < w:
            return float(x[n, yy, xx, c])
        return 0.0

    return ((1 - fy) * (1 - fx) * pix(y0, x0)
            + (1 - fy) * fx * pix(y0, x0 + 1)
            + fy * (1 - fx) * pix(y0 + 1, x0)
            + fy * fx * pix(y0 + 1, x0 + 1))


def deform_dw_loop(x: np.ndarray, w: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Scalar-loop float deformable depthwise conv (stride 1, pad 1).

    ``off`` is (n,h,w,9,2) fractional (dy, dx) per row-major tap.
    """
    n, h, wd, c = x.shape
    taps = [(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)]
    out = np.zeros((n, h, wd, c))
    for b in range(n):
        for y in range(h):
            for xx in range(wd):
                for ch in range(c):
                    acc = 0.0
                    for t, (gy, gx) in enumerate(taps):
                        py = y + gy + off[b, y, xx, t, 0]
                        px = xx + gx + off[b, y, xx, t, 1]
                        acc += bilinear_formula(x, py, px, ch, b) * float(w[0, gy + 1, gx + 1, ch])
                    out[b, y, xx, ch] = acc
    return out


def requant_float64(acc: np.ndarray, mult: np.ndarray, shift: np.ndarray,
                    bias: np.ndarray, relu: bool) -> np.ndarray:
    """Extended-precision real rescale; exact while |acc * M| < 2**53."""
    wide = acc.astype(np.float64) * mult.astype(np.float64)
    scaled = np.floor(wide / np.exp2(shift.astype(np.float64)) + 0.5)
    no_round = np.floor(wide / np.exp2(shift.astype(np.float64)))
    out = np.where(shift > 0, scaled, no_round) + bias
    if relu:
        out = np.maximum(out, 0.0)
    return np.clip(out, -127, 127).astype(np.int8)


def int_dw_deform_loop(x: np.ndarray, w: np.ndarray, disp_y: np.ndarray,
                       disp_x: np.ndarray) -> np.ndarray:
    """Integer depthwise gather-accumulate; loops positions and taps, with the
    channel products vectorized for tolerable runtime. ``disp_*`` hold the
    absolute per-tap displacement from the window center, shape (h,w,9)."""
    n, h, wd, c = x.shape
    assert n == 1
    acc = np.zeros((h, wd, c), dtype=np.int64)
    for y in range(h):
        for xx in range(wd):
            for t in range(9):
                iy = y + int(disp_y[y, xx, t])
                ix = xx + int(disp_x[y, xx, t])
                if 0 <= iy < h and 0 <= ix < wd:
                    acc[y, xx, :] += x[0, iy, ix, :].astype(np.int64) * w[0, t // 3, t % 3, :].astype(np.int64)
    return acc[None]


def int_conv1x1_loop(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, h, wd, ic = x.shape
    oc = w.shape[3]
    acc = np.zeros((n, h, wd, oc), dtype=np.int64)
    for b in range(n):
        for y in range(h):
            for xx in range(wd):
                for o in range(oc):
                    s = 0
                    for i in range(ic):
                        s += int(x[b, y, xx, i]) * int(w[i, 0, 0, o])
                    acc[b, y, xx, o] = s
    return acc


def peaks_exhaustive(hm: np.ndarray, top_k: int = 100) -> list[tuple[int, int, int, float]]:
    """O(HWC*9) neighbor scan; ties broken by (class, y, x)."""
    h, w, c = hm.shape
    found = []
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                v = hm[y, x, ch]
                ok = v > 0
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if dy == 0 and dx == 0:
                            continue
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and not (v >= hm[yy, xx, ch]):
                            ok = False
                if ok:
                    found.append((ch, x, y, float(v)))
    found.sort(key=lambda p: (-p[3], p[0], p[2], p[1]))
    return found[:top_k]

"""Deterministic trace-driven model of the accelerator memory hierarchy.

The simulator is event-count based, not cycle-accurate: every memory request
is priced from a small set of constants (per-request DRAM latency, streaming
bandwidth, cache/buffer hit cost) and the total is

    cycles = max(compute, memory) + port_stalls + overlap * min(compute, memory)

where the overlap term models the imperfect pipelining between the compute
engines and the shared bus. Absolute milliseconds are therefore meaningless;
the model is meant to preserve *relative* latencies between designs, which is
what the ablation grid reports.

Four designs are modeled:
  baseline_dram          every sampled input block is its own DRAM request
  llc                    per-request path probing a set-associative cache
  line_buffer            inputs stream once into an on-chip row buffer
  line_buffer_multiport  same buffer with three read ports (square offsets
                         guarantee taps spread over three rows, so three
                         reads per cycle are conflict free)

The cache uses pseudo-random replacement driven by a seeded 16-bit LFSR, so
identical seeds give identical hit/miss sequences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ops import BOUNDED_INT, FREE_FRAC, FREE_INT, SQUARE, ConvSpec, OffsetField

BASELINE_DRAM = "baseline_dram"
LLC = "llc"
LINE_BUFFER = "line_buffer"
LINE_BUFFER_MULTIPORT = "line_buffer_multiport"
_DESIGNS = (BASELINE_DRAM, LLC, LINE_BUFFER, LINE_BUFFER_MULTIPORT)

_IN_BASE = 0
_OFF_BASE = 1 << 40
_W_BASE = 2 << 40
_OUT_BASE = 3 << 40


@dataclass(frozen=True)
class LLCConfig:
    size: int = 1 << 20          # 1 MiB
    assoc: int = 16
    line: int = 64
    seed: int = 1

    def __post_init__(self) -> None:
        sets = self.size // (self.line * self.assoc)
        if sets < 1 or sets & (sets - 1):
            raise ValueError("cache size/assoc/line must give a power-of-two set count")

    @property
    def num_sets(self) -> int:
        return self.size // (self.line * self.assoc)


@dataclass(frozen=True)
class MemConfig:
    design: str = LINE_BUFFER
    llc: LLCConfig = field(default_factory=LLCConfig)
    line_buffer_rows: int = 15
    ports: int = 1
    dram_latency: int = 100      # cycles charged per request / per miss run
    llc_hit_cycles: int = 2
    buffer_hit_cycles: int = 1
    dram_bandwidth: int = 24     # bytes per cycle (6 GB/s at 250 MHz)
    buffer_port_bytes: int = 8   # one 64-bit BRAM word per port per cycle
    overlap: float = 0.25        # un-overlapped fraction of min(compute, memory)
    acp_request_cycles: int = 35  # coherency-port overhead per cached request
    llc_routed: bool = False     # line-buffer fills go through the cache port

    def __post_init__(self) -> None:
        if self.design not in _DESIGNS:
            raise ValueError(f"unknown design {self.design!r}")
        if self.ports not in (1, 3):
            raise ValueError("ports must be 1 or 3")
        if self.design == LINE_BUFFER_MULTIPORT and self.ports != 3:
            object.__setattr__(self, "ports", 3)
        if self.design in (BASELINE_DRAM, LLC) and self.ports != 1:
            raise ValueError("only line-buffer designs have multiple ports")


@dataclass(frozen=True)
class EngineConfig:
    macs_1x1: tuple[int, int] = (16, 16)
    macs_dw: tuple[int, int] = (16, 9)
    macs_full: tuple[int, int, int] = (8, 8, 9)
    clock_mhz: int = 250

    def rate(self, kind: str) -> int:
        if kind == "1x1":
            return self.macs_1x1[0] * self.macs_1x1[1]
        if kind == "dw":
            return self.macs_dw[0] * self.macs_dw[1]
        if kind == "full":
            return self.macs_full[0] * self.macs_full[1] * self.macs_full[2]
        raise ValueError(f"unknown engine kind {kind!r}")

    def peak_gops(self, kind: str) -> float:
        return self.rate(kind) * 2 * self.clock_mhz / 1000.0


@dataclass(frozen=True)
class Trace:
    """Logical access trace of one convolution kernel.

    ``in_addr`` holds one entry per sampled input block (all channels of one
    pixel, ``ic`` bytes); out-of-map samples read zero and emit no access.
    """

    kind: str                 # '1x1' | 'dw' | 'full'
    dims: tuple[int, int, int, int]
    in_h: int
    in_w: int
    macs: int
    deformable: bool
    square: bool
    in_addr: np.ndarray       # int64 byte addresses
    in_row: np.ndarray        # sampled input row per access
    in_out_row: np.ndarray    # output row driving the access
    in_bytes: int             # bytes per input access (= ic)
    off_bytes_per_pos: int    # 18 free / 1 square / 0 none
    weight_bytes: int
    out_bytes_per_pos: int

    @property
    def num_positions(self) -> int:
        h, w, _, _ = self.dims
        return h * w


def gen_trace(spec: ConvSpec, off: OffsetField | None, dims: tuple[int, int, int, int]) -> Trace:
    """Deterministic access trace for a conv kernel at NHWC byte addresses."""
    h, w, ic, oc = dims
    if any(d < 1 for d in dims):
        raise ValueError("dims must be positive")
    if spec.depthwise and ic != oc:
        raise ValueError("depthwise kernels need ic == oc")
    if off is not None and spec.kernel != 3:
        raise ValueError("offsets only apply to 3x3 kernels")
    oh, ow = spec.out_hw(h, w)

    if spec.kernel == 1:
        kind = "1x1"
        taps = np.zeros((1, 2), dtype=np.int64)
        centers_y = (np.arange(oh) * spec.stride)[:, None]
        centers_x = (np.arange(ow) * spec.stride)[None, :]
    else:
        kind = "dw" if spec.depthwise else "full"
        taps = np.array([(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)], dtype=np.int64)
        centers_y = (np.arange(oh) * spec.stride - spec.padding + 1)[:, None]
        centers_x = (np.arange(ow) * spec.stride - spec.padding + 1)[None, :]

    ntaps = taps.shape[0]
    cy = np.broadcast_to(centers_y, (oh, ow))[:, :, None]
    cx = np.broadcast_to(centers_x, (oh, ow))[:, :, None]
    if off is None:
        iy = cy + taps[None, None, :, 0]
        ix = cx + taps[None, None, :, 1]
        off_bytes = 0
        square = False
    else:
        if off.mode == FREE_FRAC:
            raise ValueError("trace generation needs integer offsets")
        if off.spatial != (1, oh, ow):
            raise ValueError("offset field must cover the output with batch 1")
        disp = off.displacements()[0]
        if off.mode == SQUARE:
            iy = cy + disp[..., 0]
            ix = cx + disp[..., 1]
            off_bytes = 1
            square = True
        else:
            iy = cy + taps[None, None, :, 0] + disp[..., 0]
            ix = cx + taps[None, None, :, 1] + disp[..., 1]
            off_bytes = 2 * ntaps
            square = False

    out_rows = np.broadcast_to(np.arange(oh)[:, None, None], (oh, ow, ntaps))
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    addr = _IN_BASE + (iy * w + ix) * ic
    macs_per_pos = ntaps * ic if spec.depthwise else ntaps * ic * oc
    if spec.kernel == 1:
        weight_bytes = (ic * oc + 1) // 2
    elif spec.depthwise:
        weight_bytes = (9 * ic + 1) // 2
    else:
        weight_bytes = (9 * ic * oc + 1) // 2
    return Trace(
        kind=kind,
        dims=(oh, ow, ic, oc),
        in_h=h,
        in_w=w,
        macs=oh * ow * macs_per_pos,
        deformable=off is not None,
        square=square,
        in_addr=addr[valid].astype(np.int64),
        in_row=iy[valid].astype(np.int64),
        in_out_row=out_rows[valid].astype(np.int64),
        in_bytes=ic,
        off_bytes_per_pos=off_bytes,
        weight_bytes=weight_bytes,
        out_bytes_per_pos=oc,
    )


class _Lfsr16:
    """16-bit Galois LFSR; the low bits pick replacement victims."""

    _TAPS = 0xB400

    def __init__(self, seed: int) -> None:
        self.state = (seed & 0xFFFF) or 0xACE1

    def next(self) -> int:
        bit = self.state & 1
        self.state >>= 1
        if bit:
            self.state ^= self._TAPS
        return self.state


class _Cache:
    def __init__(self, cfg: LLCConfig) -> None:
        self.cfg = cfg
        self.sets: list[list[int]] = [[] for _ in range(cfg.num_sets)]
        self.lfsr = _Lfsr16(cfg.seed)
        self.hits = 0
        self.misses = 0

    def touch(self, line_addr: int) -> bool:
        """Access one line; returns True on hit."""
        idx = line_addr % self.cfg.num_sets
        ways = self.sets[idx]
        if line_addr in ways:
            self.hits += 1
            return True
        self.misses += 1
        if len(ways) >= self.cfg.assoc:
            victim = self.lfsr.next() % self.cfg.assoc
            ways[victim] = line_addr
        else:
            ways.append(line_addr)
        return False


@dataclass(frozen=True)
class SimReport:
    cycles: int
    latency_ms: float
    gops: float
    peak_gops: float
    dram_bytes_read: int
    dram_bytes_written: int
    input_dram_bytes: int
    input_cycles: int
    llc_hits: int
    llc_misses: int
    buffer_hits: int
    stalls: int
    macs: int


def _stream_cost(total_bytes: int, chunk_bytes: int, mem: MemConfig) -> int:
    """Contiguous stream broken into chunk-sized requests."""
    if total_bytes <= 0:
        return 0
    chunks = math.ceil(total_bytes / chunk_bytes)
    per_chunk_bytes = math.ceil(total_bytes / chunks)
    return chunks * (mem.dram_latency + math.ceil(per_chunk_bytes / mem.dram_bandwidth))


def _cache_cost(cache: _Cache, addrs: np.ndarray, nbytes: int, mem: MemConfig) -> int:
    """Run input requests through the cache.

    Every line touched costs the hit latency; missing lines add the refill
    stream time, and a request containing at least one miss pays the DRAM
    latency once (the misses of one request burst together).
    """
    line = cache.cfg.line
    fill = mem.llc_hit_cycles + math.ceil(line / mem.dram_bandwidth)
    cycles = 0
    for addr in addrs:
        cycles += mem.acp_request_cycles
        first = int(addr) // line
        last = (int(addr) + nbytes - 1) // line
        missed = False
        for ln in range(first, last + 1):
            if cache.touch(ln):
                cycles += mem.llc_hit_cycles
            else:
                cycles += fill
                missed = True
        if missed:
            cycles += mem.dram_latency
    return cycles


def simulate(trace: Trace, mem: MemConfig, eng: EngineConfig | None = None) -> SimReport:
    """Price a trace under one memory design.

    Weights, offsets and outputs always stream over the direct DRAM port;
    the design only changes how sampled inputs are served.
    """
    eng = eng or EngineConfig()
    if mem.design == LINE_BUFFER_MULTIPORT and trace.deformable and not trace.square:
        raise ValueError("multiport buffering requires square-mode offsets")
    oh, ow, _, _ = trace.dims
    if trace.macs == 0 and trace.in_addr.size == 0:
        return SimReport(0, 0.0, 0.0, eng.peak_gops(trace.kind), 0, 0, 0, 0, 0, 0, 0, 0, 0)

    compute = math.ceil(trace.macs / eng.rate(trace.kind))

    # Streams shared by every design.
    off_total = trace.off_bytes_per_pos * oh * ow
    out_total = trace.out_bytes_per_pos * oh * ow
    stream_cycles = (
        _stream_cost(off_total, ow * max(trace.off_bytes_per_pos, 1), mem)
        + _stream_cost(trace.weight_bytes, trace.weight_bytes, mem)
        + _stream_cost(out_total, ow * trace.out_bytes_per_pos, mem)
    )
    dram_read = off_total + trace.weight_bytes
    dram_written = out_total

    llc_hits = llc_misses = 0
    buffer_hits = 0
    stalls = 0

    if mem.design == BASELINE_DRAM:
        n = int(trace.in_addr.size)
        input_cycles = n * (mem.dram_latency + math.ceil(trace.in_bytes / mem.dram_bandwidth))
        input_bytes = n * trace.in_bytes
    elif mem.design == LLC:
        cache = _Cache(mem.llc)
        input_cycles = _cache_cost(cache, trace.in_addr, trace.in_bytes, mem)
        llc_hits, llc_misses = cache.hits, cache.misses
        input_bytes = llc_misses * mem.llc.line
    else:
        # Line buffer: every input row is streamed into the buffer exactly
        # once; reads that fall behind the resident window go back to DRAM.
        reach = int((trace.in_row - trace.in_out_row).max()) if trace.in_row.size else 0
        window_lo = trace.in_out_row + reach - mem.line_buffer_rows
        resident = trace.in_row > window_lo
        violations = int((~resident).sum())
        buffer_hits = int(resident.sum())
        row_bytes = trace.in_bytes * trace.in_w
        fill_bytes = trace.in_h * row_bytes
        if mem.llc_routed:
            cache = _Cache(mem.llc)
            row_addrs = np.arange(trace.in_h, dtype=np.int64) * row_bytes
            fill_cycles = _cache_cost(cache, row_addrs, row_bytes, mem)
            llc_hits, llc_misses = cache.hits, cache.misses
        else:
            fill_cycles = _stream_cost(fill_bytes, row_bytes, mem)
        viol_cycles = violations * (mem.dram_latency + math.ceil(trace.in_bytes / mem.dram_bandwidth))
        input_cycles = fill_cycles + viol_cycles
        input_bytes = fill_bytes + violations * trace.in_bytes
        if trace.deformable:
            words = buffer_hits * math.ceil(trace.in_bytes / mem.buffer_port_bytes)
            feed = math.ceil(words * mem.buffer_hit_cycles / mem.ports)
            stalls = max(0, feed - compute)

    memory = input_cycles + stream_cycles
    cycles = max(compute, memory) + stalls + math.ceil(mem.overlap * min(compute, memory))
    clock_hz = eng.clock_mhz * 1e6
    latency_ms = cycles / clock_hz * 1e3
    gops = 2.0 * trace.macs / (cycles / clock_hz) / 1e9 if cycles else 0.0
    return SimReport(
        cycles=cycles,
        latency_ms=latency_ms,
        gops=gops,
        peak_gops=eng.peak_gops(trace.kind),
        dram_bytes_read=dram_read + input_bytes,
        dram_bytes_written=dram_written,
        input_dram_bytes=input_bytes,
        input_cycles=input_cycles,
        llc_hits=llc_hits,
        llc_misses=llc_misses,
        buffer_hits=buffer_hits,
        stalls=stalls,
        macs=trace.macs,
    )


@dataclass(frozen=True)
class RooflineResult:
    threshold_ops_per_pair: float
    intensity_ops_per_pair: float | None
    bound: str | None


def roofline(spec: ConvSpec, eng: EngineConfig | None = None, dram_gbps: float = 6.0,
             dims: tuple[int, int, int, int] | None = None) -> RooflineResult:
    """Compute-bound threshold in OPs per loaded activation/weight pair.

    A pair is one 8-bit activation plus one 4-bit weight (1.5 bytes), so the
    DRAM can deliver dram_gbps / 1.5 giga-pairs per second; the threshold is
    the engine's peak GOPs divided by that rate. With ``dims`` the layer's
    own intensity (2 MACs per streamed pair, weights held on chip) is
    classified against the threshold.
    """
    eng = eng or EngineConfig()
    if spec.kernel == 1:
        kind = "1x1"
    elif spec.depthwise:
        kind = "dw"
    else:
        kind = "full"
    gpairs = dram_gbps / 1.5
    threshold = eng.peak_gops(kind) / gpairs
    if dims is None:
        return RooflineResult(threshold, None, None)
    h, w, ic, oc = dims
    if kind == "1x1":
        macs, weights = h * w * ic * oc, ic * oc
    elif kind == "dw":
        macs, weights = h * w * 9 * ic, 9 * ic
    else:
        macs, weights = h * w * 9 * ic * oc, 9 * ic * oc
    pairs = max(h * w * ic, weights)
    intensity = 2.0 * macs / pairs
    return RooflineResult(threshold, intensity, "compute" if intensity >= threshold else "memory")


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

_OPERATIONS = ("default", "deform", "bound", "square")
_HALVES = ("full", "dw")
ABLATION_BOUND = 7  # offsets drawn uniformly from [0, ABLATION_BOUND]


@dataclass(frozen=True)
class AblationRow:
    operation: str   # e.g. "dw_square"
    design: str
    llc: bool
    report: SimReport


def _ablation_offsets(op: str, oh: int, ow: int, rng: np.random.Generator) -> OffsetField | None:
    """Synthetic offset streams for the ablation rows.

    The bounded rows draw uniformly from the legal clipped range; the
    unbounded deform row samples arbitrary pixels anywhere in the map, which
    is what makes its access pattern irregular.
    """
    if op == "default":
        return None
    if op == "square":
        d = rng.integers(0, ABLATION_BOUND + 1, size=(1, oh, ow))
        return OffsetField(SQUARE, d, lo=0, hi=ABLATION_BOUND)
    if op == "bound":
        vals = rng.integers(0, ABLATION_BOUND + 1, size=(1, oh, ow, 9, 2))
        return OffsetField(BOUNDED_INT, vals, lo=0, hi=ABLATION_BOUND)
    # deform: displacement = random target pixel minus the regular tap position
    grid = np.array([(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)], dtype=np.int64)
    ty = rng.integers(0, oh, size=(1, oh, ow, 9))
    tx = rng.integers(0, ow, size=(1, oh, ow, 9))
    base_y = np.arange(oh)[None, :, None, None] + grid[None, None, None, :, 0]
    base_x = np.arange(ow)[None, None, :, None] + grid[None, None, None, :, 1]
    vals = np.stack([ty - base_y, tx - base_x], axis=-1)
    return OffsetField(FREE_INT, vals)


def _ablation_mem(op: str, llc: bool, llc_seed: int) -> MemConfig:
    llc_cfg = LLCConfig(seed=llc_seed)
    if op == "deform":
        design = LLC if llc else BASELINE_DRAM
        return MemConfig(design=design, llc=llc_cfg)
    # Bounded offsets in [0, N] plus the kernel taps span 2N + 1 input rows
    # around the fill cursor, hence the 15-row buffer for N = 7.
    rows = 3 if op == "default" else 2 * ABLATION_BOUND + 1
    if op == "square":
        return MemConfig(design=LINE_BUFFER_MULTIPORT, llc=llc_cfg, line_buffer_rows=rows,
                         ports=3, llc_routed=llc)
    return MemConfig(design=LINE_BUFFER, llc=llc_cfg, line_buffer_rows=rows, llc_routed=llc)


def ablation_table(dims: tuple[int, int, int, int], seed: int,
                   eng: EngineConfig | None = None) -> list[AblationRow]:
    """Full ablation grid: 4 operations x {full, depthwise} x {no-LLC, LLC}."""
    h, w, ic, oc = dims
    eng = eng or EngineConfig()
    rows: list[AblationRow] = []
    for half in _HALVES:
        depthwise = half == "dw"
        hdims = (h, w, ic, ic if depthwise else oc)
        spec = ConvSpec(kernel=3, stride=1, depthwise=depthwise, padding=1)
        for op_idx, op in enumerate(_OPERATIONS):
            rng = np.random.default_rng([seed, _HALVES.index(half), op_idx])
            off = _ablation_offsets(op, h, w, rng)
            trace = gen_trace(spec, off, hdims)
            for llc in (False, True):
                mem = _ablation_mem(op, llc, llc_seed=seed + 1)
                rows.append(AblationRow(f"{half}_{op}", mem.design, llc, simulate(trace, mem, eng)))
    return rows


def table_speedups(rows: list[AblationRow]) -> dict[str, float]:
    """Co-design speedups: unbuffered deform versus bounded square buffering."""
    by_key = {(r.operation, r.llc): r.report.latency_ms for r in rows}
    return {
        "dw": by_key[("dw_deform", False)] / by_key[("dw_square", False)],
        "full": by_key[("full_deform", False)] / by_key[("full_square", False)],
    }


CSV_HEADER = "design,operation,llc,latency_ms,gops,dram_bytes,llc_hits,llc_misses,buffer_hits,stalls"


def row_to_csv(row: AblationRow) -> str:
    r = row.report
    dram = r.dram_bytes_read + r.dram_bytes_written
    return (f"{row.design},{row.operation},{int(row.llc)},{r.latency_ms:.6f},{r.gops:.3f},"
            f"{dram},{r.llc_hits},{r.llc_misses},{r.buffer_hits},{r.stalls}")

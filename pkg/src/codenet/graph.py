"""Detection network construction, integer execution and cost accounting.

The network is a flat list of nodes in topological order. Shuffle blocks form
the backbone; three deformable upsampling blocks bring the stride-32 features
back to stride 4, where three pointwise heads emit the keypoint heatmap, the
class-agnostic box sizes and the sub-cell center offsets. Concatenation is
used throughout instead of residual addition, so the integer path never needs
a wide add.

Nodes with two outputs (split) publish them as ``name#0`` and ``name#1``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .quant import (PER_CHANNEL, PER_LAYER, QuantParams, RequantParams, calibrate,
                    derive_requant, quantize, round_half_away)
from .tensor import FloatTensor, QuantTensor, Shape4

CONV_KINDS = ("conv1x1", "dw3x3", "dw3x3_deform", "full3x3_first")
PASS_KINDS = ("maxpool2x2", "upsample2x_nearest", "split_half", "concat", "shuffle")
ALLOWED_KINDS = CONV_KINDS + PASS_KINDS

# Backbone stage widths for the 1x network and their doubled 2x variant.
STAGE_WIDTHS = {1: (24, 116, 232, 464), 2: (48, 232, 464, 928)}
STAGE_BLOCKS = (4, 8, 4)
# Decoder widths per multiplier; the final stage is pinned to the head
# feature dim. The 2x decoder doubles the first width but widens the second
# by 1.5x so the doubled network stays inside its compute budget.
DECODER_WIDTHS = {1: (1024, 256, 64), 2: (2048, 384, 64)}
HEAD_DIM = 64
OUTPUT_STRIDE = 4
OFFSET_RANGE = (-8, 7)

CONFIGS = {
    "a": (256, "stride4", 1),
    "b": (256, "stride2_maxpool", 1),
    "c": (512, "stride4", 1),
    "d": (512, "stride4", 2),
    "e": (512, "stride2_maxpool", 2),
}


class GraphError(ValueError):
    pass


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: tuple[str, ...]
    ic: int = 0
    oc: int = 0
    stride: int = 1
    relu: bool = False
    # Float parameters (fp32 model).
    w_fp: np.ndarray | None = None
    b_fp: np.ndarray | None = None
    off_w_fp: np.ndarray | None = None
    off_b_fp: np.ndarray | None = None
    # Deformable sampling configuration.
    offset_mode: str = ops.BOUNDED_INT
    offset_lo: int = OFFSET_RANGE[0]
    offset_hi: int = OFFSET_RANGE[1]
    offset_path: str = "requant"
    # Quantized parameters (w4a8 model).
    w_q: QuantTensor | None = None
    rp: RequantParams | None = None
    off_w_q: QuantTensor | None = None
    off_rp: RequantParams | None = None

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    @property
    def output_names(self) -> tuple[str, ...]:
        if self.kind == "split_half":
            return (self.name + "#0", self.name + "#1")
        return (self.name,)


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    config: str
    resolution: int
    width_mult: int
    downsample: str
    classes: int
    precision: str = "fp32"
    input_delta: float = 1.0 / 127.0
    stride_out: int = OUTPUT_STRIDE
    head_dim: int = HEAD_DIM
    head_names: tuple[str, str, str] = ("head_y", "head_s", "head_o")

    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def lint(self) -> None:
        """Validate operator kinds, wiring and channel bookkeeping."""
        known = {"input"}
        for n in self.nodes:
            if n.kind not in ALLOWED_KINDS:
                raise GraphError(f"node '{n.name}': kind {n.kind!r} is not a supported operator")
            for src in n.inputs:
                if src not in known:
                    raise GraphError(f"node '{n.name}': input '{src}' is not defined earlier (cycle or typo)")
            if n.kind in ("dw3x3", "dw3x3_deform") and n.ic != n.oc:
                raise GraphError(f"node '{n.name}': depthwise needs ic == oc")
            if n.kind == "split_half" and n.ic % 2:
                raise GraphError(f"node '{n.name}': split needs an even channel count")
            known.update(n.output_names)


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class _Builder:
    def __init__(self, seed: int, offset_mode: str, offset_range: tuple[int, int]) -> None:
        self.rng = np.random.default_rng(seed)
        self.nodes: list[LayerNode] = []
        self.offset_mode = offset_mode
        self.offset_lo, self.offset_hi = offset_range

    def add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        return node.name

    def conv1x1(self, name: str, src: str, ic: int, oc: int, relu: bool) -> str:
        w = _he_init(self.rng, (ic, 1, 1, oc), ic)
        b = np.zeros(oc, dtype=np.float32)
        return self.add(LayerNode(name, "conv1x1", (src,), ic=ic, oc=oc, relu=relu, w_fp=w, b_fp=b))

    def dw3x3(self, name: str, src: str, c: int, stride: int, relu: bool = False) -> str:
        w = _he_init(self.rng, (1, 3, 3, c), 9)
        b = np.zeros(c, dtype=np.float32)
        return self.add(LayerNode(name, "dw3x3", (src,), ic=c, oc=c, stride=stride, relu=relu, w_fp=w, b_fp=b))

    def dw3x3_deform(self, name: str, src: str, c: int, relu: bool) -> str:
        w = _he_init(self.rng, (1, 3, 3, c), 9)
        b = np.zeros(c, dtype=np.float32)
        off_ch = 1 if self.offset_mode == ops.SQUARE else 18
        off_w = _he_init(self.rng, (c, 1, 1, off_ch), c)
        off_b = np.zeros(off_ch, dtype=np.float32)
        return self.add(LayerNode(
            name, "dw3x3_deform", (src,), ic=c, oc=c, relu=relu,
            w_fp=w, b_fp=b, off_w_fp=off_w, off_b_fp=off_b,
            offset_mode=self.offset_mode, offset_lo=self.offset_lo, offset_hi=self.offset_hi,
        ))


def build_codenet(
    config: str,
    classes: int = 20,
    seed: int = 0,
    offset_mode: str = ops.BOUNDED_INT,
    offset_range: tuple[int, int] = OFFSET_RANGE,
) -> NetworkGraph:
    """Construct the detection network for one configuration (a..e)."""
    if config not in CONFIGS:
        raise GraphError(f"unknown config {config!r}; expected one of {sorted(CONFIGS)}")
    resolution, downsample, mult = CONFIGS[config]
    stem_c, *stage_c = STAGE_WIDTHS[mult]
    dec_c = DECODER_WIDTHS[mult]
    b = _Builder(seed, offset_mode, offset_range)

    # Stem: the one full convolution; it runs on the host processor.
    stem_stride = 4 if downsample == "stride4" else 2
    w = _he_init(b.rng, (3, 3, 3, stem_c), 27)
    cur = b.add(LayerNode("stem", "full3x3_first", ("input",), ic=3, oc=stem_c,
                          stride=stem_stride, relu=True, w_fp=w, b_fp=np.zeros(stem_c, dtype=np.float32)))
    if downsample == "stride2_maxpool":
        cur = b.add(LayerNode("stem_pool", "maxpool2x2", (cur,), ic=stem_c, oc=stem_c))

    in_c = stem_c
    for si, (out_c, blocks) in enumerate(zip(stage_c, STAGE_BLOCKS), start=2):
        half = out_c // 2
        p = f"s{si}"
        # Downsampling block: both branches see the stage input.
        b1 = b.dw3x3(f"{p}d_b1dw", cur, in_c, stride=2)
        b1 = b.conv1x1(f"{p}d_b1pw", b1, in_c, half, relu=True)
        b2 = b.conv1x1(f"{p}d_b2pw1", cur, in_c, half, relu=True)
        b2 = b.dw3x3(f"{p}d_b2dw", b2, half, stride=2)
        b2 = b.conv1x1(f"{p}d_b2pw2", b2, half, half, relu=True)
        cur = b.add(LayerNode(f"{p}d_cat", "concat", (b1, b2), ic=out_c, oc=out_c))
        cur = b.add(LayerNode(f"{p}d_shuf", "shuffle", (cur,), ic=out_c, oc=out_c))
        for bi in range(1, blocks):
            q = f"{p}b{bi}"
            sp = b.add(LayerNode(f"{q}_split", "split_half", (cur,), ic=out_c, oc=half))
            keep, work = sp + "#0", sp + "#1"
            work = b.conv1x1(f"{q}_pw1", work, half, half, relu=True)
            work = b.dw3x3(f"{q}_dw", work, half, stride=1)
            work = b.conv1x1(f"{q}_pw2", work, half, half, relu=True)
            cur = b.add(LayerNode(f"{q}_cat", "concat", (keep, work), ic=out_c, oc=out_c))
            cur = b.add(LayerNode(f"{q}_shuf", "shuffle", (cur,), ic=out_c, oc=out_c))
        in_c = out_c

    # Decoder: three deformable upsampling blocks back to stride 4.
    for di, out_c in enumerate(dec_c, start=1):
        p = f"up{di}"
        cur = b.conv1x1(f"{p}_pw", cur, in_c, out_c, relu=True)
        cur = b.dw3x3_deform(f"{p}_dfm", cur, out_c, relu=True)
        cur = b.add(LayerNode(f"{p}_up", "upsample2x_nearest", (cur,), ic=out_c, oc=out_c))
        in_c = out_c

    b.conv1x1("head_y", cur, in_c, classes, relu=False)
    b.conv1x1("head_s", cur, in_c, 2, relu=False)
    b.conv1x1("head_o", cur, in_c, 2, relu=False)

    g = NetworkGraph(b.nodes, config=config, resolution=resolution, width_mult=mult,
                     downsample=downsample, classes=classes)
    g.lint()
    return g


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    out_shape: tuple[int, int, int]


@dataclass(frozen=True)
class CostReport:
    precision: str
    total_params: int
    total_bytes: float
    total_macs: int
    scale_entries: int
    layers: list[LayerCost]


def count_cost(g: NetworkGraph, precision: str = "w4a8") -> CostReport:
    """Exact parameter and MAC counts at the configured input resolution.

    fp32 bytes are params * 4; w4a8 bytes are params / 2 plus one 32-bit
    scale per quantized output channel. Requant biases are bookkeeping, not
    model payload, and are excluded from the size.
    """
    if precision not in ("fp32", "w4a8"):
        raise ValueError("precision must be fp32 or w4a8")
    shapes: dict[str, tuple[int, int, int]] = {"input": (g.resolution, g.resolution, 3)}
    layers: list[LayerCost] = []
    scale_entries = 0
    for n in g.nodes:
        h, w, c = shapes[n.inputs[0]]
        params = macs = 0
        if n.kind == "conv1x1":
            out = (h, w, n.oc)
            params = n.ic * n.oc
            macs = h * w * n.ic * n.oc
            scale_entries += n.oc
        elif n.kind == "dw3x3":
            oh, ow = ops.ConvSpec(3, n.stride, True, 1).out_hw(h, w)
            out = (oh, ow, n.oc)
            params = 9 * n.oc
            macs = oh * ow * 9 * n.oc
            scale_entries += n.oc
        elif n.kind == "dw3x3_deform":
            off_ch = 1 if n.offset_mode == ops.SQUARE else 18
            out = (h, w, n.oc)
            params = 9 * n.oc + n.ic * off_ch
            macs = h * w * (9 * n.oc + n.ic * off_ch)
            scale_entries += n.oc + off_ch
        elif n.kind == "full3x3_first":
            oh, ow = ops.ConvSpec(3, n.stride, False, 1).out_hw(h, w)
            out = (oh, ow, n.oc)
            params = 9 * n.ic * n.oc
            macs = oh * ow * 9 * n.ic * n.oc
            scale_entries += n.oc
        elif n.kind == "maxpool2x2":
            out = (h // 2, w // 2, c)
        elif n.kind == "upsample2x_nearest":
            out = (2 * h, 2 * w, c)
        elif n.kind == "split_half":
            out = (h, w, c // 2)
        elif n.kind == "concat":
            h2, w2, c2 = shapes[n.inputs[1]]
            out = (h, w, c + c2)
        else:  # shuffle
            out = (h, w, c)
        for name in n.output_names:
            shapes[name] = out
        layers.append(LayerCost(n.name, n.kind, params, macs, out))
    total_params = sum(l.params for l in layers)
    total_macs = sum(l.macs for l in layers)
    if precision == "fp32":
        total_bytes = total_params * 4.0
    else:
        total_bytes = total_params * 0.5 + scale_entries * 4.0
    return CostReport(precision, total_params, total_bytes, total_macs, scale_entries, layers)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def sigmoid_lut(delta: float) -> np.ndarray:
    """256-entry sigmoid table over the signed 8-bit code domain."""
    codes = np.arange(-128, 128, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-codes * delta))


def _heads_shape(g: NetworkGraph) -> tuple[int, int]:
    side = g.resolution // g.stride_out
    return side, side


def run_inference(g: NetworkGraph, image: QuantTensor) -> tuple[FloatTensor, FloatTensor, FloatTensor]:
    """Integer-only forward pass from quantized image codes to head tensors.

    Returns (heatmap, sizes, offsets): the heatmap is passed through a
    256-entry sigmoid lookup on its 8-bit codes, the other heads are
    dequantized to reals. Execution is bit-deterministic.
    """
    if g.precision != "w4a8":
        raise GraphError("run_inference needs a quantized (w4a8) graph")
    if (image.shape.h, image.shape.w, image.shape.c) != (g.resolution, g.resolution, 3):
        raise GraphError(f"image dims {image.shape.dims} do not match config resolution {g.resolution}")
    values: dict[str, QuantTensor] = {"input": image}

    def fetch(node: LayerNode, idx: int = 0) -> QuantTensor:
        try:
            return values[node.inputs[idx]]
        except KeyError as e:
            raise GraphError(f"node '{node.name}': missing input {e}") from None

    for n in g.nodes:
        x = fetch(n)
        try:
            if n.kind == "conv1x1":
                out = ops.conv1x1_q(x, n.w_q, n.rp)
            elif n.kind == "dw3x3":
                spec = ops.ConvSpec(3, n.stride, True, 1)
                out = ops.dw3x3_q(x, n.w_q, spec, n.rp)
            elif n.kind == "dw3x3_deform":
                off = ops.offset_gen(x, n.off_w_q, n.off_rp, n.offset_mode,
                                     n.offset_lo, n.offset_hi, path=n.offset_path)
                out = ops.deform_conv_q(x, n.w_q, off, ops.ConvSpec(3, 1, True, 1), n.rp)
            elif n.kind == "full3x3_first":
                out = ops.conv3x3_full_q(x, n.w_q, ops.ConvSpec(3, n.stride, False, 1), n.rp)
            elif n.kind == "maxpool2x2":
                out = ops.maxpool2x2(x)
            elif n.kind == "upsample2x_nearest":
                out = ops.upsample2x_nearest(x)
            elif n.kind == "split_half":
                a, b2 = ops.split_half(x)
                values[n.name + "#0"], values[n.name + "#1"] = a, b2
                continue
            elif n.kind == "concat":
                out = ops.concat(x, fetch(n, 1))
            else:
                out = ops.shuffle(x)
        except ValueError as e:
            raise GraphError(f"node '{n.name}': {e}") from e
        values[n.name] = out

    yq = values[g.head_names[0]]
    sq = values[g.head_names[1]]
    oq = values[g.head_names[2]]
    lut = sigmoid_lut(g.node(g.head_names[0]).rp.out_delta)
    y = lut[yq.data.astype(np.int32) + 128]
    s = sq.data.astype(np.float64) * g.node(g.head_names[1]).rp.out_delta
    o = oq.data.astype(np.float64) * g.node(g.head_names[2]).rp.out_delta
    hh, ww = _heads_shape(g)
    return (
        FloatTensor(Shape4(1, hh, ww, g.classes), y),
        FloatTensor(Shape4(1, hh, ww, 2), s),
        FloatTensor(Shape4(1, hh, ww, 2), o),
    )


def _float_conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray, relu: bool) -> np.ndarray:
    out = np.einsum("nhwi,io->nhwo", x, w[:, 0, 0, :].astype(np.float64)) + b
    return np.maximum(out, 0.0) if relu else out


def run_inference_float(
    g: NetworkGraph,
    image: FloatTensor,
    stats: dict[str, float] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Float reference executor; mirrors the integer path op for op.

    Deformable offsets are rounded and clipped exactly as in deployment, so
    the two paths differ only by quantization error. When ``stats`` is given
    it accumulates the max absolute value seen at every conv output (used for
    activation calibration).
    """
    values: dict[str, np.ndarray] = {"input": image.data.astype(np.float64)}

    def record(name: str, arr: np.ndarray) -> np.ndarray:
        if stats is not None:
            stats[name] = max(stats.get(name, 0.0), float(np.abs(arr).max()) if arr.size else 0.0)
        return arr

    for n in g.nodes:
        x = values[n.inputs[0]]
        if n.kind == "conv1x1":
            out = record(n.name, _float_conv1x1(x, n.w_fp, n.b_fp, n.relu))
        elif n.kind in ("dw3x3", "full3x3_first"):
            ft = FloatTensor(Shape4(*x.shape), x)
            wt = FloatTensor(Shape4(*n.w_fp.shape), n.w_fp)
            spec = ops.ConvSpec(3, n.stride, n.kind == "dw3x3", 1)
            out = ops.conv_ref(ft, wt, spec).data.astype(np.float64) + n.b_fp
            if n.relu:
                out = np.maximum(out, 0.0)
            out = record(n.name, out)
        elif n.kind == "dw3x3_deform":
            raw = _float_conv1x1(x, n.off_w_fp, n.off_b_fp, relu=False)
            record(n.name + "/off", raw)
            nb, hh, ww, _ = x.shape
            if n.offset_mode == ops.SQUARE:
                # square displacements are absolute tap positions around the
                # center; express them as deltas from the regular grid
                d = np.clip(round_half_away(raw[..., 0]), max(n.offset_lo, 0), n.offset_hi)
                grid = np.array([(ky, kx) for ky in (-1, 0, 1) for kx in (-1, 0, 1)], dtype=np.float64)
                disp = ops.square_expand(d.astype(np.int64)).astype(np.float64) - grid
            else:
                ints = np.clip(round_half_away(raw).astype(np.int64), n.offset_lo, n.offset_hi)
                disp = ints.reshape(nb, hh, ww, 9, 2).astype(np.float64)
            fr = ops.OffsetField(ops.FREE_FRAC, disp)
            ft = FloatTensor(Shape4(*x.shape), x)
            wt = FloatTensor(Shape4(*n.w_fp.shape), n.w_fp)
            out = ops.deform_conv_ref(ft, wt, fr, ops.ConvSpec(3, 1, True, 1)).data.astype(np.float64) + n.b_fp
            if n.relu:
                out = np.maximum(out, 0.0)
            out = record(n.name, out)
        elif n.kind == "maxpool2x2":
            nb, hh, ww, cc = x.shape
            out = x.reshape(nb, hh // 2, 2, ww // 2, 2, cc).max(axis=(2, 4))
        elif n.kind == "upsample2x_nearest":
            out = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
        elif n.kind == "split_half":
            half = x.shape[-1] // 2
            values[n.name + "#0"], values[n.name + "#1"] = x[..., :half], x[..., half:]
            continue
        elif n.kind == "concat":
            out = np.concatenate([x, values[n.inputs[1]]], axis=-1)
        else:
            nb, hh, ww, cc = x.shape
            out = x.reshape(nb, hh, ww, 2, cc // 2).swapaxes(3, 4).reshape(nb, hh, ww, cc)
        values[n.name] = out

    y = 1.0 / (1.0 + np.exp(-values[g.head_names[0]]))
    return y, values[g.head_names[1]], values[g.head_names[2]]


def first_layer_host(
    image: FloatTensor,
    w: FloatTensor,
    b: np.ndarray,
    downsample: str,
    act_qp: QuantParams,
    relu: bool = True,
) -> QuantTensor:
    """Host-side stem: full 3x3 float conv, optional pooling, then quantize."""
    stride = 4 if downsample == "stride4" else 2
    out = ops.conv_ref(image, w, ops.ConvSpec(3, stride, False, 1))
    data = out.data.astype(np.float64) + b
    if relu:
        data = np.maximum(data, 0.0)
    if downsample == "stride2_maxpool":
        n, h, ww, c = data.shape
        data = data.reshape(n, h // 2, 2, ww // 2, 2, c).max(axis=(2, 4))
    ft = FloatTensor(Shape4(*data.shape), data)
    return quantize(ft, act_qp)


# ---------------------------------------------------------------------------
# Post-training quantization
# ---------------------------------------------------------------------------

def _union_find_groups(g: NetworkGraph) -> dict[str, str]:
    """Map each conv node to its activation-scale group representative.

    Values that meet at a concat must share one activation scale, so the conv
    sources feeding both concat inputs are unioned (passthrough ops forward
    their producer's sources).
    """
    parent: dict[str, str] = {}

    def find(a: str) -> str:
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: str, b: str) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    sources: dict[str, set[str]] = {"input": {"input"}}
    for n in g.nodes:
        if n.is_conv:
            srcs = {n.name}
        elif n.kind == "concat":
            srcs = sources[n.inputs[0]] | sources[n.inputs[1]]
            first = next(iter(srcs))
            for other in srcs:
                union(first, other)
        else:
            srcs = set().union(*(sources[i] for i in n.inputs))
        for out in n.output_names:
            sources[out] = srcs
    return {k: find(k) for k in list(parent)} | {n.name: find(n.name) for n in g.nodes if n.is_conv}


def quantize_graph(
    g: NetworkGraph,
    calib_images: list[FloatTensor],
    percentile: float | None = None,
    offset_path: str = "requant",
) -> NetworkGraph:
    """Post-training quantization: 4-bit per-channel weights, 8-bit per-layer
    activations, fixed-point requantization parameters per conv."""
    if g.precision != "fp32":
        raise GraphError("graph is already quantized")
    if not calib_images:
        raise GraphError("calibration needs at least one image")

    stats: dict[str, float] = {}
    for img in calib_images:
        run_inference_float(g, img, stats=stats)

    groups = _union_find_groups(g)
    group_t: dict[str, float] = {}
    for n in g.nodes:
        if not n.is_conv:
            continue
        t = stats.get(n.name, 0.0) or 1.0
        rep = groups[n.name]
        group_t[rep] = max(group_t.get(rep, 0.0), t)

    in_qp = calibrate(calib_images, bits=8, percentile=percentile)
    input_delta = float(in_qp.delta[0])

    # Propagate the activation delta along the dataflow.
    deltas: dict[str, float] = {"input": input_delta}
    new_nodes: list[LayerNode] = []
    act_delta: dict[str, float] = {}
    for n in g.nodes:
        if n.is_conv:
            t = group_t[groups[n.name]]
            act_delta[n.name] = t / 127.0

    for n in g.nodes:
        nn = replace(n)
        if n.is_conv:
            w_qp = calibrate([n.w_fp], bits=4, granularity=PER_CHANNEL, percentile=percentile)
            nn.w_q = quantize(FloatTensor(Shape4(*n.w_fp.shape), n.w_fp), w_qp)
            in_delta = deltas[n.inputs[0]]
            out_delta = act_delta[n.name]
            nn.rp = derive_requant(in_delta, w_qp.delta, out_delta, n.b_fp, relu=n.relu)
            if n.kind == "dw3x3_deform":
                off_qp = calibrate([n.off_w_fp], bits=4, granularity=PER_CHANNEL, percentile=percentile)
                nn.off_w_q = quantize(FloatTensor(Shape4(*n.off_w_fp.shape), n.off_w_fp), off_qp)
                off_t = stats.get(n.name + "/off", 0.0) or float(n.offset_hi)
                nn.off_rp = derive_requant(in_delta, off_qp.delta, off_t / 127.0, n.off_b_fp)
                nn.offset_path = offset_path
            for out in n.output_names:
                deltas[out] = out_delta
        elif n.kind == "concat":
            d0, d1 = deltas[n.inputs[0]], deltas[n.inputs[1]]
            if not np.isclose(d0, d1, rtol=1e-9):
                raise GraphError(f"node '{n.name}': concat inputs carry different scales")
            deltas[n.name] = d0
        else:
            for out in n.output_names:
                deltas[out] = deltas[n.inputs[0]]
        new_nodes.append(nn)

    return NetworkGraph(new_nodes, config=g.config, resolution=g.resolution,
                        width_mult=g.width_mult, downsample=g.downsample, classes=g.classes,
                        precision="w4a8", input_delta=input_delta)

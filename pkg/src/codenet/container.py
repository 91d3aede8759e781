"""Binary model container and the raw image file format.

Container layout: magic ``CDNT``, little-endian u16 version, then a chunk
stream. Every chunk is ``u8 type, u16 name length, name bytes, u32 payload
length, payload``. Chunk types:

  1  graph descriptor (line-oriented utf-8 text)
  2  tensor: u8 dtype, u8 rank, u32 dims[rank], payload
  3  quantization parameters, keyed by layer name

Tensor dtype codes: 0 = fp32, 1 = i8, 2 = i4 packed two codes per byte with
the even index in the low nibble, 3 = i32. All payloads are little endian and
containers round-trip byte exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .graph import LayerNode, NetworkGraph
from .quant import PER_CHANNEL, PER_LAYER, QuantParams, RequantParams
from .tensor import FloatTensor, QuantTensor, Shape4

MAGIC = b"CDNT"
VERSION = 1
CHUNK_DESCRIPTOR = 1
CHUNK_TENSOR = 2
CHUNK_QPARAMS = 3

DTYPE_F32 = 0
DTYPE_I8 = 1
DTYPE_I4 = 2
DTYPE_I32 = 3

IMAGE_MAGIC = b"NHW8"


@dataclass(frozen=True)
class Chunk:
    kind: int
    name: str
    payload: bytes


class ContainerError(ValueError):
    pass


def write_container(path: str, chunks: list[Chunk]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        for ch in chunks:
            name = ch.name.encode("utf-8")
            f.write(struct.pack("<BH", ch.kind, len(name)))
            f.write(name)
            f.write(struct.pack("<I", len(ch.payload)))
            f.write(ch.payload)


def read_container(path: str) -> list[Chunk]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic; not a model container")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    chunks = []
    pos = 6
    while pos < len(blob):
        if pos + 3 > len(blob):
            raise ContainerError("truncated chunk header")
        kind, name_len = struct.unpack_from("<BH", blob, pos)
        pos += 3
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (payload_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        payload = blob[pos:pos + payload_len]
        if len(payload) != payload_len:
            raise ContainerError(f"truncated payload in chunk '{name}'")
        pos += payload_len
        chunks.append(Chunk(kind, name, payload))
    return chunks


# ---------------------------------------------------------------------------
# Tensor payloads
# ---------------------------------------------------------------------------

def pack_i4(codes: np.ndarray) -> bytes:
    """Two 4-bit codes per byte, even index in the low nibble."""
    flat = codes.reshape(-1).astype(np.int64)
    if flat.size and (flat.min() < -7 or flat.max() > 7):
        raise ContainerError("i4 codes must lie in [-7, 7]")
    nib = (flat & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.concatenate([nib, np.zeros(1, dtype=np.uint8)])
    return (nib[0::2] | (nib[1::2] << 4)).tobytes()


def unpack_i4(payload: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    lo = raw & 0xF
    hi = raw >> 4
    nib = np.empty(raw.size * 2, dtype=np.uint8)
    nib[0::2] = lo
    nib[1::2] = hi
    vals = nib[:count].astype(np.int16)
    return np.where(vals >= 8, vals - 16, vals).astype(np.int8)


_DTYPES = {DTYPE_F32: np.float32, DTYPE_I8: np.int8, DTYPE_I32: np.int32}


def tensor_chunk(name: str, arr: np.ndarray, dtype_code: int) -> Chunk:
    dims = arr.shape
    head = struct.pack("<BB", dtype_code, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    if dtype_code == DTYPE_I4:
        body = pack_i4(arr)
    else:
        body = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_code]).tobytes()
    return Chunk(CHUNK_TENSOR, name, head + body)


def parse_tensor(chunk: Chunk) -> np.ndarray:
    dtype_code, rank = struct.unpack_from("<BB", chunk.payload, 0)
    dims = struct.unpack_from(f"<{rank}I", chunk.payload, 2)
    body = chunk.payload[2 + 4 * rank:]
    count = int(np.prod(dims)) if rank else 1
    if dtype_code == DTYPE_I4:
        arr = unpack_i4(body, count)
    else:
        arr = np.frombuffer(body, dtype=_DTYPES[dtype_code]).copy()
    if arr.size != count:
        raise ContainerError(f"tensor '{chunk.name}': payload does not match dims {dims}")
    return arr.reshape(dims)


# ---------------------------------------------------------------------------
# Quantization parameter payloads
# ---------------------------------------------------------------------------

def qparams_chunk(name: str, wq: QuantParams | None, rp: RequantParams | None) -> Chunk:
    parts = []
    if wq is None:
        parts.append(struct.pack("<BBI", 0, 0, 0))
    else:
        gran = 1 if wq.granularity == PER_CHANNEL else 0
        parts.append(struct.pack("<BBI", wq.bits, gran, wq.num_groups))
        parts.append(wq.t.astype("<f8").tobytes())
    if rp is None:
        parts.append(struct.pack("<BI", 0, 0))
    else:
        n = rp.num_channels
        parts.append(struct.pack("<BI", 1, n))
        parts.append(rp.multiplier.astype("<u4").tobytes())
        parts.append(rp.shift.astype("<u1").tobytes())
        parts.append(rp.bias.astype("<i4").tobytes())
        parts.append(struct.pack("<dB", rp.out_delta, int(rp.relu)))
    return Chunk(CHUNK_QPARAMS, name, b"".join(parts))


def parse_qparams(chunk: Chunk) -> tuple[QuantParams | None, RequantParams | None]:
    p = chunk.payload
    bits, gran, ngroups = struct.unpack_from("<BBI", p, 0)
    pos = 6
    wq = None
    if bits:
        t = np.frombuffer(p, dtype="<f8", count=ngroups, offset=pos)
        pos += 8 * ngroups
        wq = QuantParams(bits, PER_CHANNEL if gran else PER_LAYER, t.copy())
    has_rp, n = struct.unpack_from("<BI", p, pos)
    pos += 5
    rp = None
    if has_rp:
        mult = np.frombuffer(p, dtype="<u4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        shift = np.frombuffer(p, dtype="<u1", count=n, offset=pos).astype(np.int64)
        pos += n
        bias = np.frombuffer(p, dtype="<i4", count=n, offset=pos).astype(np.int64)
        pos += 4 * n
        out_delta, relu = struct.unpack_from("<dB", p, pos)
        rp = RequantParams(mult, shift, bias, out_delta=out_delta, relu=bool(relu))
    return wq, rp


# ---------------------------------------------------------------------------
# Whole-graph serialization
# ---------------------------------------------------------------------------

def _descriptor_text(g: NetworkGraph) -> str:
    lines = [
        "codenet-graph 1",
        f"config {g.config}",
        f"classes {g.classes}",
        f"resolution {g.resolution}",
        f"width_mult {g.width_mult}",
        f"downsample {g.downsample}",
        f"precision {g.precision}",
        f"input_delta {g.input_delta!r}",
    ]
    for n in g.nodes:
        fields = [f"kind={n.kind}", "inputs=" + ",".join(n.inputs),
                  f"ic={n.ic}", f"oc={n.oc}", f"stride={n.stride}", f"relu={int(n.relu)}"]
        if n.kind == "dw3x3_deform":
            fields += [f"offset_mode={n.offset_mode}", f"offset_lo={n.offset_lo}",
                       f"offset_hi={n.offset_hi}", f"offset_path={n.offset_path}"]
        lines.append(f"node {n.name} " + " ".join(fields))
    return "\n".join(lines) + "\n"


def save_graph(path: str, g: NetworkGraph) -> None:
    chunks = [Chunk(CHUNK_DESCRIPTOR, "graph", _descriptor_text(g).encode("utf-8"))]
    for n in g.nodes:
        if not n.is_conv:
            continue
        if g.precision == "fp32":
            chunks.append(tensor_chunk(n.name + "/w", n.w_fp, DTYPE_F32))
            chunks.append(tensor_chunk(n.name + "/b", n.b_fp, DTYPE_F32))
            if n.kind == "dw3x3_deform":
                chunks.append(tensor_chunk(n.name + "/off_w", n.off_w_fp, DTYPE_F32))
                chunks.append(tensor_chunk(n.name + "/off_b", n.off_b_fp, DTYPE_F32))
        else:
            chunks.append(tensor_chunk(n.name + "/w", n.w_q.data, DTYPE_I4))
            chunks.append(qparams_chunk(n.name, n.w_q.qparams, n.rp))
            if n.kind == "dw3x3_deform":
                chunks.append(tensor_chunk(n.name + "/off_w", n.off_w_q.data, DTYPE_I4))
                chunks.append(qparams_chunk(n.name + "/off", n.off_w_q.qparams, n.off_rp))
    write_container(path, chunks)


def _parse_descriptor(text: str) -> tuple[dict[str, str], list[LayerNode]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("codenet-graph"):
        raise ContainerError("missing graph descriptor header")
    meta: dict[str, str] = {}
    nodes: list[LayerNode] = []
    for ln in lines[1:]:
        if ln.startswith("node "):
            _, name, *pairs = ln.split()
            kv = dict(p.split("=", 1) for p in pairs)
            nodes.append(LayerNode(
                name=name,
                kind=kv["kind"],
                inputs=tuple(kv["inputs"].split(",")),
                ic=int(kv["ic"]),
                oc=int(kv["oc"]),
                stride=int(kv["stride"]),
                relu=bool(int(kv["relu"])),
                offset_mode=kv.get("offset_mode", ops.BOUNDED_INT),
                offset_lo=int(kv.get("offset_lo", -8)),
                offset_hi=int(kv.get("offset_hi", 7)),
                offset_path=kv.get("offset_path", "requant"),
            ))
        else:
            key, value = ln.split(maxsplit=1)
            meta[key] = value
    return meta, nodes


def load_graph(path: str) -> NetworkGraph:
    chunks = read_container(path)
    by_name: dict[tuple[int, str], Chunk] = {(c.kind, c.name): c for c in chunks}
    desc = by_name.get((CHUNK_DESCRIPTOR, "graph"))
    if desc is None:
        raise ContainerError("container has no graph descriptor")
    meta, nodes = _parse_descriptor(desc.payload.decode("utf-8"))
    precision = meta["precision"]

    def weight_shape(n: LayerNode, off: bool) -> tuple[int, ...]:
        if off:
            return (n.ic, 1, 1, 1 if n.offset_mode == ops.SQUARE else 18)
        if n.kind == "conv1x1":
            return (n.ic, 1, 1, n.oc)
        if n.kind in ("dw3x3", "dw3x3_deform"):
            return (1, 3, 3, n.oc)
        return (n.ic, 3, 3, n.oc)

    out_nodes = []
    for n in nodes:
        nn = replace(n)
        if n.is_conv:
            w_chunk = by_name.get((CHUNK_TENSOR, n.name + "/w"))
            if w_chunk is None:
                raise ContainerError(f"missing weights for node '{n.name}'")
            w = parse_tensor(w_chunk).reshape(weight_shape(n, off=False))
            if precision == "fp32":
                nn.w_fp = w.astype(np.float32)
                nn.b_fp = parse_tensor(by_name[(CHUNK_TENSOR, n.name + "/b")]).astype(np.float32)
                if n.kind == "dw3x3_deform":
                    nn.off_w_fp = parse_tensor(by_name[(CHUNK_TENSOR, n.name + "/off_w")]).reshape(
                        weight_shape(n, off=True)).astype(np.float32)
                    nn.off_b_fp = parse_tensor(by_name[(CHUNK_TENSOR, n.name + "/off_b")]).astype(np.float32)
            else:
                wq, rp = parse_qparams(by_name[(CHUNK_QPARAMS, n.name)])
                nn.w_q = QuantTensor(Shape4(*w.shape), w, bits=4, qparams=wq)
                nn.rp = rp
                if n.kind == "dw3x3_deform":
                    off_w = parse_tensor(by_name[(CHUNK_TENSOR, n.name + "/off_w")]).reshape(
                        weight_shape(n, off=True))
                    off_qp, off_rp = parse_qparams(by_name[(CHUNK_QPARAMS, n.name + "/off")])
                    nn.off_w_q = QuantTensor(Shape4(*off_w.shape), off_w, bits=4, qparams=off_qp)
                    nn.off_rp = off_rp
        out_nodes.append(nn)

    g = NetworkGraph(
        out_nodes,
        config=meta["config"],
        resolution=int(meta["resolution"]),
        width_mult=int(meta["width_mult"]),
        downsample=meta["downsample"],
        classes=int(meta["classes"]),
        precision=precision,
        input_delta=float(meta["input_delta"]),
    )
    g.lint()
    return g


# ---------------------------------------------------------------------------
# Raw image files: 16-byte header (magic + dims) then uint8 NHWC pixels.
# ---------------------------------------------------------------------------

def write_image(path: str, pixels: np.ndarray) -> None:
    if pixels.ndim != 3:
        raise ContainerError("image must have shape (h, w, c)")
    arr = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<III", h, w, c))
        f.write(arr.tobytes())


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != IMAGE_MAGIC:
        raise ContainerError("bad magic; not a raw image file")
    h, w, c = struct.unpack_from("<III", blob, 4)
    data = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if data.size != h * w * c:
        raise ContainerError("image payload does not match header dims")
    return data.reshape(h, w, c).copy()


def image_to_float(pixels: np.ndarray) -> FloatTensor:
    """Map uint8 pixels into [0, 1] reals with a leading batch axis."""
    h, w, c = pixels.shape
    return FloatTensor(Shape4(1, h, w, c), pixels.astype(np.float32) / 255.0)

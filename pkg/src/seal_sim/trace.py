"""Tensor layout and memory-request trace generation.

Every tensor is stored channel-major (weights row-major, one kernel row per
unit) and each channel/row starts on a fresh 128-byte line, so a line never
mixes encrypted and plaintext data.  Traces are kept as parallel numpy arrays
per layer; :class:`MemoryRequest` objects are produced on demand.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Optional

import numpy as np

from .model import BYTES_PER_ELEMENT, Layer, Model, ceil_div, layer_cost
from .planner import EncryptionPlan

LINE_BYTES = 128
ADDRESS_LIMIT = 1 << 40


class Tag(enum.IntEnum):
    WEIGHT = 0
    IFM = 1
    OFM = 2
    COUNTER = 3


class Op(enum.IntEnum):
    READ = 0
    WRITE = 1


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryRequest:
    address: int
    op: Op
    tag: Tag
    encrypted: bool
    issue_order: int


@dataclass(frozen=True)
class Region:
    """One tensor: ``units`` channels (or kernel rows) of ``unit_bytes`` each."""

    key: tuple[str, int]          # ("w", layer_id) or ("fm", map_id)
    base_line: int
    units: int
    unit_bytes: int
    encrypted_units: frozenset[int]

    @property
    def lines_per_unit(self) -> int:
        return ceil_div(self.unit_bytes, LINE_BYTES)

    @property
    def lines(self) -> int:
        return self.units * self.lines_per_unit

    @property
    def end_line(self) -> int:
        return self.base_line + self.lines

    def unit_base(self, unit: int) -> int:
        return self.base_line + unit * self.lines_per_unit

    def enc_mask(self) -> np.ndarray:
        mask = np.zeros(self.units, dtype=bool)
        if self.encrypted_units:
            mask[list(self.encrypted_units)] = True
        return mask


@dataclass
class AddressMap:
    regions: dict[tuple[str, int], Region] = field(default_factory=dict)

    def weights(self, layer_id: int) -> Region:
        return self.regions[("w", layer_id)]

    def fmap(self, map_id: int) -> Region:
        return self.regions[("fm", map_id)]

    @property
    def total_lines(self) -> int:
        return max((r.end_line for r in self.regions.values()), default=0)

    def _sorted(self) -> list[Region]:
        return sorted(self.regions.values(), key=lambda r: r.base_line)

    def locate(self, line: int) -> tuple[Region, int]:
        regs = self._sorted()
        i = bisect.bisect_right([r.base_line for r in regs], line) - 1
        if i < 0 or line >= regs[i].end_line:
            raise KeyError(f"line {line} is not mapped")
        r = regs[i]
        return r, (line - r.base_line) // r.lines_per_unit

    def line_encrypted(self, line: int) -> bool:
        region, unit = self.locate(line)
        return unit in region.encrypted_units

    def encrypted_lines(self) -> int:
        return sum(len(r.encrypted_units) * r.lines_per_unit for r in self.regions.values())


def layout_tensors(model: Model, plan: EncryptionPlan) -> AddressMap:
    """Place the input image, then each layer's weights and output map, back to back."""
    amap = AddressMap()
    cursor = 0

    def place(key, units, unit_bytes, enc):
        nonlocal cursor
        reg = Region(key, cursor, units, unit_bytes, frozenset(enc))
        cursor = reg.end_line
        if cursor * LINE_BYTES > ADDRESS_LIMIT:
            raise TraceError("address space overflow: tensors exceed 2**40 bytes")
        amap.regions[key] = reg

    for l in model.layers:
        if l.has_weights:
            k = l.kernel
            place(("w", l.id), k.n_x, k.row_elements * BYTES_PER_ELEMENT, plan.encrypted_rows(l.id))
        if l.kind != "Output":
            s = l.shape_out
            place(("fm", l.id), s.channels, s.plane * BYTES_PER_ELEMENT,
                  plan.encrypted_channels(l.id))
    return amap


# ---------------------------------------------------------------- tiling

@dataclass(frozen=True)
class TilingConfig:
    ofm_tile: tuple[Optional[int], Optional[int], Optional[int]] = (8, None, None)
    weight_reuse: bool = False

    def __post_init__(self):
        for d in self.ofm_tile:
            if d is not None and d < 1:
                raise TraceError("tile dimensions must be >= 1")

    def resolve(self, layer: Layer, clamp: bool) -> tuple[int, int, int]:
        s = layer.shape_out
        dims = (s.channels, s.height, s.width)
        out = []
        for want, full in zip(self.ofm_tile, dims):
            want = full if want is None else want
            if want > full:
                if not clamp:
                    raise TraceError(f"tile {self.ofm_tile} larger than output tensor {dims} "
                                     f"of layer {layer.id}")
                want = full
            out.append(want)
        return tuple(out)


@lru_cache(maxsize=4096)
def _plane_lines(height: int, width: int, r0: int, r1: int, c0: int, c1: int) -> np.ndarray:
    """Line offsets inside one channel plane covering rows [r0,r1) x cols [c0,c1)."""
    if r0 >= r1 or c0 >= c1:
        return np.zeros(0, dtype=np.int64)
    if c0 == 0 and c1 == width:
        b0, b1 = r0 * width * BYTES_PER_ELEMENT, r1 * width * BYTES_PER_ELEMENT
        return np.arange(b0 // LINE_BYTES, ceil_div(b1, LINE_BYTES), dtype=np.int64)
    rows = np.arange(r0, r1)
    first = (rows * width + c0) * BYTES_PER_ELEMENT // LINE_BYTES
    last = ((rows * width + c1) * BYTES_PER_ELEMENT - 1) // LINE_BYTES
    parts = [np.arange(a, b + 1) for a, b in zip(first, last)]
    return np.unique(np.concatenate(parts)).astype(np.int64)


def _byte_lines(b0: int, b1: int) -> np.ndarray:
    return np.arange(b0 // LINE_BYTES, ceil_div(b1, LINE_BYTES), dtype=np.int64)


@dataclass
class LayerTrace:
    layer_id: int
    kind: str
    lines: np.ndarray      # int64 line index (address // 128)
    ops: np.ndarray        # uint8 Op
    tags: np.ndarray       # uint8 Tag
    enc: np.ndarray        # bool
    macs: int = 0

    def __len__(self):
        return int(self.lines.size)

    @property
    def addresses(self) -> np.ndarray:
        return self.lines * LINE_BYTES

    def requests(self, start: int = 0) -> Iterator[MemoryRequest]:
        for n, (ln, op, tag, e) in enumerate(zip(self.lines.tolist(), self.ops.tolist(),
                                                self.tags.tolist(), self.enc.tolist())):
            yield MemoryRequest(ln * LINE_BYTES, Op(op), Tag(tag), bool(e), start + n)

    def compute_cycles(self, macs_per_cycle: int) -> int:
        return ceil_div(self.macs, macs_per_cycle)


def _unit_block(region: Region, units: np.ndarray, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Lines ``offsets`` of each unit in ``units``, unit-major, plus per-line flags."""
    bases = region.base_line + units * region.lines_per_unit
    lines = (bases[:, None] + offsets[None, :])
    enc = np.repeat(region.enc_mask()[units], offsets.size).reshape(lines.shape)
    return lines, enc


def gen_layer_trace(layer: Layer, amap: AddressMap, tiling: TilingConfig = TilingConfig(),
                    clamp: bool = False) -> LayerTrace:
    """Expand one layer into tile-major read/write requests.

    Per output tile: for every input channel, its needed ifm lines followed by
    the kernel-row lines for the tile's output channels; then the tile's ofm
    lines are written once.  Weight lines are re-read by every tile that needs
    them unless ``tiling.weight_reuse``.
    """
    chunks: list[tuple] = []
    macs = layer_cost(layer)["macs"]
    if layer.kind in ("Input", "Output"):
        return _build(layer, chunks, 0)
    tc, th, tw = tiling.resolve(layer, clamp)
    sin, sout = layer.shape_in, layer.shape_out
    out_reg = amap.fmap(layer.id)
    src_regs = [amap.fmap(s) for s in layer.sources]
    w_reg = amap.weights(layer.id) if layer.has_weights else None
    seen_w = np.zeros(w_reg.lines, dtype=bool) if (w_reg is not None and tiling.weight_reuse) else None

    if layer.kind in ("Conv", "FC"):
        k = layer.kernel
        kh, kw, stride, pad = k.kernel_h, k.kernel_w, layer.stride, layer.padding
    for co0 in range(0, sout.channels, tc):
        co1 = min(sout.channels, co0 + tc)
        for oh0 in range(0, sout.height, th):
            oh1 = min(sout.height, oh0 + th)
            for ow0 in range(0, sout.width, tw):
                ow1 = min(sout.width, ow0 + tw)
                if layer.kind in ("Conv", "FC"):
                    ih0, ih1 = max(0, oh0 * stride - pad), min(sin.height, (oh1 - 1) * stride - pad + kh)
                    iw0, iw1 = max(0, ow0 * stride - pad), min(sin.width, (ow1 - 1) * stride - pad + kw)
                    in_off = _plane_lines(sin.height, sin.width, ih0, ih1, iw0, iw1)
                    per_col = kh * kw * BYTES_PER_ELEMENT
                    w_off = _byte_lines(co0 * per_col, co1 * per_col)
                    chans = np.arange(sin.channels)
                    ifm_l, ifm_e = _unit_block(src_regs[0], chans, in_off)
                    w_l, w_e = _unit_block(w_reg, chans, w_off)
                    lines = np.concatenate([ifm_l, w_l], axis=1).ravel()
                    enc = np.concatenate([ifm_e, w_e], axis=1).ravel()
                    tags = np.concatenate([np.full(ifm_l.shape, Tag.IFM, np.uint8),
                                           np.full(w_l.shape, Tag.WEIGHT, np.uint8)], axis=1).ravel()
                    if seen_w is not None:
                        keep = np.ones(lines.size, dtype=bool)
                        is_w = tags == Tag.WEIGHT
                        rel = lines[is_w] - w_reg.base_line
                        fresh = ~seen_w[rel]
                        keep[np.flatnonzero(is_w)] = fresh
                        seen_w[rel] = True
                        lines, enc, tags = lines[keep], enc[keep], tags[keep]
                    chunks.append((lines, int(Op.READ), tags, enc))
                else:
                    if layer.kind == "Pool":
                        w = layer.pool_window
                        ih0, ih1 = oh0 * w, min(sin.height, oh1 * w)
                        iw0, iw1 = ow0 * w, min(sin.width, ow1 * w)
                    else:
                        ih0, ih1, iw0, iw1 = oh0, oh1, ow0, ow1
                    in_off = _plane_lines(sin.height, sin.width, ih0, ih1, iw0, iw1)
                    chans = np.arange(co0, co1)
                    blocks = [_unit_block(r, chans, in_off) for r in src_regs]
                    lines = np.concatenate([b[0] for b in blocks], axis=1).ravel()
                    enc = np.concatenate([b[1] for b in blocks], axis=1).ravel()
                    chunks.append((lines, int(Op.READ), np.full(lines.size, Tag.IFM, np.uint8), enc))
                out_off = _plane_lines(sout.height, sout.width, oh0, oh1, ow0, ow1)
                o_l, o_e = _unit_block(out_reg, np.arange(co0, co1), out_off)
                chunks.append((o_l.ravel(), int(Op.WRITE),
                                  np.full(o_l.size, Tag.OFM, np.uint8), o_e.ravel()))
    return _build(layer, chunks, macs)


def _build(layer: Layer, chunks, macs: int) -> LayerTrace:
    if not chunks:
        z = np.zeros(0, dtype=np.int64)
        return LayerTrace(layer.id, layer.kind, z, z.astype(np.uint8), z.astype(np.uint8),
                          z.astype(bool), macs)
    lines = np.concatenate([c[0] for c in chunks]).astype(np.int64)
    ops = np.concatenate([np.full(c[0].size, c[1], dtype=np.uint8) for c in chunks])
    tags = np.concatenate([c[2] for c in chunks]).astype(np.uint8)
    enc = np.concatenate([c[3] for c in chunks]).astype(bool)
    return LayerTrace(layer.id, layer.kind, lines, ops, tags, enc, macs)


def gen_inference_trace(model: Model, plan: EncryptionPlan,
                        tiling: TilingConfig = TilingConfig()) -> list[LayerTrace]:
    """Layer traces in topological order; tiles are clamped to each layer's extent."""
    amap = layout_tensors(model, plan)
    return [gen_layer_trace(l, amap, tiling, clamp=True)
            for l in model.layers if l.kind not in ("Input", "Output")]


def trace_summary(traces: list[LayerTrace]) -> dict[str, int]:
    total = sum(len(t) for t in traces)
    enc = sum(int(t.enc.sum()) for t in traces)
    return {"requests": total, "encrypted": enc,
            "reads": sum(int((t.ops == Op.READ).sum()) for t in traces),
            "writes": sum(int((t.ops == Op.WRITE).sum()) for t in traces)}


TRACE_RECORD = np.dtype([("address", "<u8"), ("flags", "u1"), ("tag", "u1")])


def dump_trace(traces: list[LayerTrace]) -> bytes:
    """Binary records: address (8 B LE), flags (bit 0 encrypted, bit 1 write), tag."""
    parts = []
    for t in traces:
        rec = np.zeros(len(t), dtype=TRACE_RECORD)
        rec["address"] = t.addresses.astype(np.uint64)
        rec["flags"] = t.enc.astype(np.uint8) | (t.ops.astype(np.uint8) << 1)
        rec["tag"] = t.tags
        parts.append(rec.tobytes())
    return b"".join(parts)


def load_trace(blob: bytes) -> np.ndarray:
    if len(blob) % TRACE_RECORD.itemsize:
        raise TraceError("trace blob is not a whole number of records")
    return np.frombuffer(blob, dtype=TRACE_RECORD)


__all__ = [
    "AddressMap", "LINE_BYTES", "LayerTrace", "MemoryRequest", "Op", "Region", "Tag",
    "TilingConfig", "TraceError", "dump_trace", "gen_inference_trace", "gen_layer_trace",
    "layout_tensors", "load_trace", "trace_summary",
]

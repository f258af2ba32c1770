"""CNN model representation: layers, shapes, kernels, loading and synthetic presets.

Weights are stored as ``(n_x, n_y, kh, kw)`` float32 tensors, i.e. one kernel
row per input channel and one kernel column per output channel.  The weight
blob format is the little-endian concatenation of every Conv/FC kernel in
layer order, each flattened in ``(row, col, kh, kw)`` order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

LAYER_KINDS = ("Input", "Conv", "Pool", "FC", "Add", "Output")
WEIGHT_KINDS = ("Conv", "FC")
BYTES_PER_ELEMENT = 4


class ModelError(ValueError):
    """Raised for malformed descriptors, blobs or inconsistent layer graphs."""


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ModelError(f"tensor dimension {name}={v!r} must be an integer >= 1")

    @property
    def plane(self) -> int:
        return self.height * self.width

    @property
    def elements(self) -> int:
        return self.channels * self.height * self.width

    def as_list(self) -> list[int]:
        return [self.channels, self.height, self.width]


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    weights: np.ndarray  # (n_x, n_y, kh, kw) float32

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        if w.ndim != 4 or min(w.shape) < 1:
            raise ModelError(f"kernel must be a non-empty 4-D tensor, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ModelError("kernel weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n_x(self) -> int:
        return self.weights.shape[0]

    @property
    def n_y(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    @property
    def row_elements(self) -> int:
        return self.n_y * self.kernel_h * self.kernel_w

    def __eq__(self, other):
        if not isinstance(other, KernelMatrix):
            return NotImplemented
        return self.weights.shape == other.weights.shape and np.array_equal(
            self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True)
class Layer:
    """One node of the layer graph.

    ``sources`` lists the ids of the layers whose output feature maps this
    layer consumes: one id for every kind except Input (none) and Add (two).
    """

    kind: str
    id: int
    shape_in: TensorShape
    shape_out: TensorShape
    kernel: Optional[KernelMatrix] = None
    pool_window: Optional[int] = None
    sources: tuple[int, ...] = ()
    stride: int = 1
    padding: int = 0

    @property
    def add_sources(self) -> Optional[tuple[int, int]]:
        return self.sources if self.kind == "Add" else None  # type: ignore[return-value]

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHT_KINDS


@dataclass(frozen=True)
class Model:
    layers: tuple[Layer, ...]
    name: str = "model"
    weight_seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        validate(self)

    def __getitem__(self, layer_id: int) -> Layer:
        return self.layers[layer_id]

    def __len__(self):
        return len(self.layers)

    @property
    def weight_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.has_weights]

    @property
    def conv_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.kind == "Conv"]

    def consumers(self, layer_id: int) -> list[Layer]:
        """Layers that read the output feature map of ``layer_id``."""
        return [l for l in self.layers if layer_id in l.sources]

    @property
    def input_layer(self) -> Layer:
        return next(l for l in self.layers if l.kind == "Input")

    @property
    def output_layer(self) -> Layer:
        return next(l for l in self.layers if l.kind == "Output")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def validate(model: Model) -> None:
    layers = model.layers
    if not layers:
        raise ModelError("no layers")
    kinds = [l.kind for l in layers]
    for k in kinds:
        if k not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {k!r}")
    if kinds.count("Input") != 1 or kinds.count("Output") != 1:
        raise ModelError("model needs exactly one Input and one Output layer")
    if kinds[0] != "Input" or kinds[-1] != "Output":
        raise ModelError("Input must be the first layer and Output the last")

    for pos, layer in enumerate(layers):
        if layer.id != pos:
            raise ModelError(f"layer at position {pos} has id {layer.id}")
        for s in layer.sources:
            if not 0 <= s < pos:
                raise ModelError(f"layer {pos} source {s} violates topological order")
        expected_sources = {"Input": 0, "Add": 2}.get(layer.kind, 1)
        if len(layer.sources) != expected_sources:
            raise ModelError(f"{layer.kind} layer {pos} needs {expected_sources} source(s)")
        if layer.has_weights != (layer.kernel is not None):
            raise ModelError(f"layer {pos}: only Conv/FC layers carry a kernel")
        if (layer.kind == "Pool") != (layer.pool_window is not None):
            raise ModelError(f"layer {pos}: pool_window is for Pool layers only")

        for s in layer.sources:
            if layers[s].shape_out != layer.shape_in:
                raise ModelError(
                    f"shape chain mismatch: layer {s} produces {layers[s].shape_out.as_list()} "
                    f"but layer {pos} expects {layer.shape_in.as_list()}")

        sin, sout = layer.shape_in, layer.shape_out
        if layer.kind in ("Input", "Output", "Add"):
            if layer.kind != "Input" and sin != sout:
                raise ModelError(f"{layer.kind} layer {pos} must preserve shape")
        elif layer.kind == "Pool":
            w = layer.pool_window
            exp = TensorShape(sin.channels, max(1, sin.height // w), max(1, sin.width // w))
            if w < 1 or sout != exp:
                raise ModelError(f"Pool layer {pos}: expected output {exp.as_list()}")
        else:
            kern = layer.kernel
            if kern.n_x != sin.channels or kern.n_y != sout.channels:
                raise ModelError(
                    f"layer {pos}: kernel {kern.n_x}x{kern.n_y} does not match "
                    f"{sin.channels}->{sout.channels} channels")
            if layer.kind == "FC":
                if sin.plane != 1 or sout.plane != 1 or kern.kernel_h != 1 or kern.kernel_w != 1:
                    raise ModelError(f"FC layer {pos} needs 1x1 spatial input/output")
            else:
                oh = _conv_out(sin.height, kern.kernel_h, layer.stride, layer.padding)
                ow = _conv_out(sin.width, kern.kernel_w, layer.stride, layer.padding)
                if (oh, ow) != (sout.height, sout.width):
                    raise ModelError(f"Conv layer {pos}: expected spatial output {oh}x{ow}")


# ---------------------------------------------------------------- cost

def layer_cost(layer: Layer) -> dict[str, int]:
    """MAC count and raw (unpadded) tensor byte sizes for one layer."""
    sin, sout = layer.shape_in, layer.shape_out
    macs = 0
    weight_bytes = 0
    if layer.has_weights:
        k = layer.kernel
        macs = k.n_x * k.n_y * k.kernel_h * k.kernel_w * sout.height * sout.width
        weight_bytes = k.weights.size * BYTES_PER_ELEMENT
    if layer.kind == "Input":
        ifm_bytes = 0
    elif layer.kind == "Add":
        ifm_bytes = 2 * sin.elements * BYTES_PER_ELEMENT
    else:
        ifm_bytes = sin.elements * BYTES_PER_ELEMENT
    ofm_bytes = 0 if layer.kind == "Output" else sout.elements * BYTES_PER_ELEMENT
    return {"macs": macs, "weight_bytes": weight_bytes,
            "ifm_bytes": ifm_bytes, "ofm_bytes": ofm_bytes}


# ---------------------------------------------------------------- load / dump

def _shape(v) -> TensorShape:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise ModelError(f"shape must be [c, h, w], got {v!r}")
    return TensorShape(*(int(x) for x in v))


def load_model(descriptor: str | dict, weights: bytes) -> Model:
    """Build a validated model from a JSON descriptor and a raw f32 weight blob."""
    desc = json.loads(descriptor) if isinstance(descriptor, (str, bytes)) else descriptor
    entries = desc.get("layers") or []
    if not entries:
        raise ModelError("no layers")

    # Count expected blob size before slicing so the error is precise.
    needed = 0
    for e in entries:
        if e.get("kind") not in LAYER_KINDS:
            raise ModelError(f"unknown layer kind {e.get('kind')!r}")
        if e["kind"] in WEIGHT_KINDS:
            kh, kw = e.get("kernel", [1, 1])
            needed += e["in"][0] * e["out"][0] * kh * kw * BYTES_PER_ELEMENT
    if len(weights) != needed:
        raise ModelError(f"weight blob length mismatch: got {len(weights)} bytes, "
                         f"descriptor needs {needed}")

    flat = np.frombuffer(weights, dtype="<f4")
    offset = 0
    layers = []
    for pos, e in enumerate(entries):
        kind = e["kind"]
        sin, sout = _shape(e["in"]), _shape(e["out"])
        if "sources" in e:
            sources = tuple(int(s) for s in e["sources"])
        else:
            sources = () if kind == "Input" else (pos - 1,)
        kernel = None
        if kind in WEIGHT_KINDS:
            kh, kw = e.get("kernel", [1, 1])
            count = sin.channels * sout.channels * kh * kw
            w = flat[offset:offset + count].reshape(sin.channels, sout.channels, kh, kw)
            offset += count
            kernel = KernelMatrix(w.astype(np.float32))
        layers.append(Layer(kind=kind, id=pos, shape_in=sin, shape_out=sout, kernel=kernel,
                            pool_window=e.get("window"), sources=sources,
                            stride=int(e.get("stride", 1)), padding=int(e.get("pad", 0))))
    return Model(tuple(layers), name=desc.get("name", "model"),
                 weight_seed=desc.get("weight_seed"))


def dump_model(model: Model) -> tuple[str, bytes]:
    """Inverse of :func:`load_model`: returns ``(descriptor_json, weight_blob)``."""
    out = []
    blobs = []
    for l in model.layers:
        e = {"kind": l.kind, "in": l.shape_in.as_list(), "out": l.shape_out.as_list(),
             "sources": list(l.sources)}
        if l.kernel is not None:
            e["kernel"] = [l.kernel.kernel_h, l.kernel.kernel_w]
            blobs.append(l.kernel.weights.astype("<f4").tobytes())
        if l.pool_window is not None:
            e["window"] = l.pool_window
        if l.stride != 1:
            e["stride"] = l.stride
        if l.padding:
            e["pad"] = l.padding
        out.append(e)
    desc = {"name": model.name, "layers": out}
    if model.weight_seed is not None:
        desc["weight_seed"] = model.weight_seed
    return json.dumps(desc, indent=1), b"".join(blobs)


# ---------------------------------------------------------------- synthetic presets

PRESETS = ("vgg16-like", "resnet18-like", "resnet34-like", "toy")
NUM_CLASSES = 10


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.layers: list[Layer] = []

    @property
    def last(self) -> Layer:
        return self.layers[-1]

    def _add(self, **kw) -> int:
        lid = len(self.layers)
        self.layers.append(Layer(id=lid, **kw))
        return lid

    def input(self, shape: TensorShape) -> int:
        return self._add(kind="Input", shape_in=shape, shape_out=shape)

    def conv(self, src: int, out_ch: int, k: int, stride: int = 1, pad: Optional[int] = None) -> int:
        sin = self.layers[src].shape_out
        pad = k // 2 if pad is None else pad
        oh = _conv_out(sin.height, k, stride, pad)
        ow = _conv_out(sin.width, k, stride, pad)
        w = self.rng.uniform(-1.0, 1.0, size=(sin.channels, out_ch, k, k)).astype(np.float32)
        return self._add(kind="Conv", shape_in=sin, shape_out=TensorShape(out_ch, oh, ow),
                         kernel=KernelMatrix(w), sources=(src,), stride=stride, padding=pad)

    def pool(self, src: int, window: Optional[int] = None) -> int:
        sin = self.layers[src].shape_out
        window = sin.height if window is None else window  # None: global pool
        sout = TensorShape(sin.channels, max(1, sin.height // window), max(1, sin.width // window))
        return self._add(kind="Pool", shape_in=sin, shape_out=sout, pool_window=window,
                         sources=(src,))

    def fc(self, src: int, out_features: int) -> int:
        sin = self.layers[src].shape_out
        w = self.rng.uniform(-1.0, 1.0, size=(sin.channels, out_features, 1, 1)).astype(np.float32)
        return self._add(kind="FC", shape_in=sin, shape_out=TensorShape(out_features, 1, 1),
                         kernel=KernelMatrix(w), sources=(src,))

    def add(self, a: int, b: int) -> int:
        s = self.layers[a].shape_out
        return self._add(kind="Add", shape_in=s, shape_out=s, sources=(a, b))

    def output(self, src: int) -> int:
        s = self.layers[src].shape_out
        return self._add(kind="Output", shape_in=s, shape_out=s, sources=(src,))


def _vgg16(b: _Builder, side: int) -> None:
    x = b.input(TensorShape(3, side, side))
    for stage, (ch, reps) in enumerate([(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)]):
        for _ in range(reps):
            x = b.conv(x, ch, 3)
        # last pool is global so the classifier sees 1x1 maps at any scale
        x = b.pool(x, None if stage == 4 else 2)
    x = b.fc(x, 512)
    x = b.fc(x, 512)
    x = b.fc(x, NUM_CLASSES)
    b.output(x)


def _resnet(b: _Builder, side: int, blocks: list[int]) -> None:
    x = b.input(TensorShape(3, side, side))
    x = b.conv(x, 64, 7, stride=2)
    x = b.pool(x, 2)
    in_ch = 64
    for stage, (ch, reps) in enumerate(zip((64, 128, 256, 512), blocks)):
        for r in range(reps):
            stride = 2 if (stage > 0 and r == 0) else 1
            a = b.conv(x, ch, 3, stride=stride)
            y = b.conv(a, ch, 3)
            short = x
            if stride != 1 or in_ch != ch:
                short = b.conv(x, ch, 1, stride=stride, pad=0)
            x = b.add(y, short)
            in_ch = ch
    x = b.pool(x, None)
    x = b.fc(x, NUM_CLASSES)
    b.output(x)


def _toy(b: _Builder, side: int) -> None:
    x = b.input(TensorShape(2, side, side))
    x = b.conv(x, 2, 1)
    x = b.conv(x, 2, 1)
    b.output(x)


def generate_synthetic(preset: str, scale: int = 1, seed: int = 0) -> Model:
    """Deterministic synthetic model; spatial input side is ``224 // scale``.

    Weights are drawn uniformly from [-1, 1] with a PCG64 stream seeded by
    ``seed``, so the result is a pure function of ``(preset, scale, seed)``.
    """
    if preset not in PRESETS:
        raise ModelError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    if scale < 1 or 224 % scale:
        raise ModelError(f"scale {scale} does not divide 224")
    side = 224 // scale
    b = _Builder(np.random.default_rng(seed))
    if preset == "vgg16-like":
        _vgg16(b, side)
    elif preset == "resnet18-like":
        _resnet(b, side, [2, 2, 2, 2])
    elif preset == "resnet34-like":
        _resnet(b, side, [3, 4, 6, 3])
    else:
        _toy(b, side)
    return Model(tuple(b.layers), name=f"{preset}-s{scale}", weight_seed=seed)


def linear_chain(widths: Iterable[int], pixels: tuple[int, int] = (4, 4), seed: int = 0,
                 name: str = "chain") -> Model:
    """A chain of 1x1 convolutions: each layer is a plain matrix product per pixel."""
    widths = list(widths)
    if len(widths) < 2:
        raise ModelError("need at least an input width and one layer width")
    b = _Builder(np.random.default_rng(seed))
    x = b.input(TensorShape(widths[0], *pixels))
    for w in widths[1:]:
        x = b.conv(x, w, 1)
    b.output(x)
    return Model(tuple(b.layers), name=name, weight_seed=seed)


def total_weight_bytes(model: Model) -> int:
    return sum(layer_cost(l)["weight_bytes"] for l in model.layers)


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


__all__ = [
    "BYTES_PER_ELEMENT", "KernelMatrix", "Layer", "Model", "ModelError", "PRESETS",
    "TensorShape", "ceil_div", "dump_model", "generate_synthetic", "layer_cost",
    "linear_chain", "load_model", "total_weight_bytes", "validate",
]

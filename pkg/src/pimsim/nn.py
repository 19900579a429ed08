"""Network description, reproducible weights and the integer reference model.

Activations are int8 in CHW order, weights int8, accumulation int32 and
requantization fixed-point with round-half-away-from-zero.  The reference
model here is the functional ground truth the simulator is checked against.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("conv", "fc", "pool", "relu", "add", "concat")
WEIGHTED = ("conv", "fc")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


class NetworkError(ValueError):
    def __init__(self, kind: str, path: str, message: str):
        self.kind = kind
        self.path = path
        super().__init__(f"{kind} error at {path or '<document>'}: {message}")


@dataclass(frozen=True)
class QuantParams:
    multiplier: int = 1
    shift: int = 0


@dataclass
class Layer:
    id: int
    kind: str
    producers: tuple[int, ...]
    out_channels: int = 0  # conv
    out_features: int = 0  # fc
    kernel: tuple[int, int] = (1, 1)  # conv, pool
    stride: int = 1
    padding: int = 0
    pool_kind: str = "max"
    quant: QuantParams = field(default_factory=QuantParams)
    weight_seed: int | None = None
    weight_file: str | None = None
    in_shape: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()
    weights: np.ndarray | None = None  # (rows, cols) int8, rows in CHW / (c, ky, kx) order

    @property
    def weight_shape(self) -> tuple[int, int]:
        if self.kind == "conv":
            c = as_chw(self.in_shape)[0]
            return c * self.kernel[0] * self.kernel[1], self.out_channels
        if self.kind == "fc":
            return int(np.prod(self.in_shape)), self.out_features
        raise ValueError(f"layer {self.id} ({self.kind}) has no weights")


@dataclass
class Network:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[Layer]

    def layer(self, lid: int) -> Layer:
        return self._by_id[lid]

    def __post_init__(self):
        self._by_id = {l.id: l for l in self.layers}

    def consumers(self, lid: int) -> list[Layer]:
        return [l for l in self.layers if lid in l.producers]

    @property
    def terminal(self) -> Layer:
        return self.layers[-1]

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.terminal.out_shape


def as_chw(shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) == 1:
        return (shape[0], 1, 1)
    return tuple(shape)


# -- weights --------------------------------------------------------------------


def splitmix64(seed: int, count: int) -> np.ndarray:
    """First ``count`` SplitMix64 outputs for ``seed`` as uint64."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed % (1 << 64)) + idx * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def generate_weights(seed: int, rows: int, cols: int) -> np.ndarray:
    """Deterministic int8 matrix: top byte of successive SplitMix64 outputs."""
    top = (splitmix64(seed, rows * cols) >> np.uint64(56)).astype(np.uint8)
    return top.view(np.int8).reshape(rows, cols)


# -- parsing ----------------------------------------------------------------------


def _pos_int(v, path, minimum=1):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise NetworkError("schema", path, f"expected integer >= {minimum}, got {v!r}")
    return v


def _pair(v, path):
    if isinstance(v, list):
        if len(v) != 2:
            raise NetworkError("schema", path, "expected an integer or [h, w]")
        return (_pos_int(v[0], path), _pos_int(v[1], path))
    k = _pos_int(v, path)
    return (k, k)


_ALLOWED = {
    "conv": {"out_channels", "kernel", "stride", "padding", "quant", "weight_seed", "weight_file"},
    "fc": {"out_features", "quant", "weight_seed", "weight_file"},
    "pool": {"kind", "kernel", "stride"},
    "relu": set(),
    "add": set(),
    "concat": set(),
}


def parse_network(text: str, base_dir=None) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError("syntax", "", f"line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    return network_from_dict(doc, base_dir)


def load_network(path) -> Network:
    with open(path) as fh:
        return parse_network(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def network_from_dict(doc, base_dir=None) -> Network:
    if not isinstance(doc, dict):
        raise NetworkError("schema", "", "top level must be an object")
    extra = set(doc) - {"name", "input_shape", "layers"}
    if extra:
        raise NetworkError("schema", sorted(extra)[0], "unknown field")
    for key in ("name", "input_shape", "layers"):
        if key not in doc:
            raise NetworkError("schema", key, "missing required field")
    shape = doc["input_shape"]
    if not isinstance(shape, list) or len(shape) != 3:
        raise NetworkError("schema", "input_shape", "expected [channels, height, width]")
    input_shape = tuple(_pos_int(v, "input_shape") for v in shape)
    if not isinstance(doc["layers"], list) or not doc["layers"]:
        raise NetworkError("schema", "layers", "expected a non-empty array")

    layers: list[Layer] = []
    prev_id = -1
    for i, ld in enumerate(doc["layers"]):
        path = f"layers[{i}]"
        if not isinstance(ld, dict) or "type" not in ld:
            raise NetworkError("schema", path, "layer must be an object with a type")
        kind = ld["type"]
        if kind not in LAYER_KINDS:
            raise NetworkError("schema", f"{path}.type", f"unknown layer type {kind!r}")
        unknown = set(ld) - _ALLOWED[kind] - {"type", "id", "producers"}
        if unknown:
            raise NetworkError("schema", f"{path}.{sorted(unknown)[0]}", "unknown field")
        lid = ld.get("id", prev_id + 1)
        if isinstance(lid, bool) or not isinstance(lid, int) or lid <= prev_id:
            raise NetworkError("schema", f"{path}.id", "ids must be increasing integers >= 0")
        producers = ld.get("producers", [prev_id])
        if not isinstance(producers, list) or not producers:
            raise NetworkError("schema", f"{path}.producers", "expected a non-empty array")
        known = {l.id for l in layers} | {-1}
        for p in producers:
            if p not in known:
                raise NetworkError("schema", f"{path}.producers", f"unknown or later producer {p}")
        if len(set(producers)) != len(producers) and kind != "add":
            raise NetworkError("schema", f"{path}.producers", "duplicate producer")
        arity = {"add": (2, 2), "concat": (2, None)}.get(kind, (1, 1))
        if len(producers) < arity[0] or (arity[1] and len(producers) > arity[1]):
            raise NetworkError("schema", f"{path}.producers", f"{kind} takes {arity} producers")

        layer = Layer(id=lid, kind=kind, producers=tuple(producers))
        if kind == "conv":
            layer.out_channels = _pos_int(ld.get("out_channels"), f"{path}.out_channels")
            layer.kernel = _pair(ld.get("kernel"), f"{path}.kernel")
            layer.stride = _pos_int(ld.get("stride", 1), f"{path}.stride")
            layer.padding = _pos_int(ld.get("padding", 0), f"{path}.padding", 0)
        elif kind == "fc":
            layer.out_features = _pos_int(ld.get("out_features"), f"{path}.out_features")
        elif kind == "pool":
            layer.pool_kind = ld.get("kind", "max")
            if layer.pool_kind not in ("max", "avg"):
                raise NetworkError("schema", f"{path}.kind", "pool kind must be max or avg")
            layer.kernel = _pair(ld.get("kernel"), f"{path}.kernel")
            layer.stride = _pos_int(ld.get("stride", layer.kernel[0]), f"{path}.stride")
        if kind in WEIGHTED:
            q = ld.get("quant", {})
            if not isinstance(q, dict) or set(q) - {"multiplier", "shift"}:
                raise NetworkError("schema", f"{path}.quant", "expected {multiplier, shift}")
            mult = q.get("multiplier", 1)
            shift = q.get("shift", 0)
            if isinstance(mult, bool) or not isinstance(mult, int) or not 0 <= mult < 2**31:
                raise NetworkError("schema", f"{path}.quant.multiplier", "must be int32 >= 0")
            if isinstance(shift, bool) or not isinstance(shift, int) or not 0 <= shift <= 31:
                raise NetworkError("schema", f"{path}.quant.shift", "must be in [0, 31]")
            layer.quant = QuantParams(mult, shift)
            has_seed, has_file = "weight_seed" in ld, "weight_file" in ld
            if has_seed == has_file:
                raise NetworkError("schema", path, "exactly one of weight_seed / weight_file")
            if has_seed:
                layer.weight_seed = _pos_int(ld["weight_seed"], f"{path}.weight_seed", 0)
            else:
                layer.weight_file = ld["weight_file"]
        layers.append(layer)
        prev_id = lid

    net = Network(str(doc["name"]), input_shape, layers)
    infer_shapes(net)
    for layer in net.layers:
        if layer.kind in WEIGHTED:
            load_layer_weights(layer, base_dir)
    return net


def infer_shapes(net: Network) -> None:
    shapes = {-1: net.input_shape}
    used: set[int] = set()
    for layer in net.layers:
        path = f"layer {layer.id}"
        ins = [shapes[p] for p in layer.producers]
        used.update(layer.producers)
        layer.in_shape = ins[0]
        if layer.kind in ("conv", "pool"):
            if len(ins[0]) != 3:
                raise NetworkError("shape", path, f"{layer.kind} needs a CHW input, got {ins[0]}")
            c, h, w = ins[0]
            kh, kw = layer.kernel
            pad = layer.padding if layer.kind == "conv" else 0
            ho = (h + 2 * pad - kh) // layer.stride + 1
            wo = (w + 2 * pad - kw) // layer.stride + 1
            if h + 2 * pad < kh or w + 2 * pad < kw or ho < 1 or wo < 1:
                raise NetworkError("shape", path, "non-positive output dimension")
            out_c = layer.out_channels if layer.kind == "conv" else c
            layer.out_shape = (out_c, ho, wo)
        elif layer.kind == "fc":
            layer.out_shape = (layer.out_features,)
        elif layer.kind == "relu":
            layer.out_shape = ins[0]
        elif layer.kind == "add":
            if ins[0] != ins[1]:
                raise NetworkError("shape", path, f"add of mismatched shapes {ins[0]} and {ins[1]}")
            layer.out_shape = ins[0]
        elif layer.kind == "concat":
            chw = [as_chw(s) for s in ins]
            if len({s[1:] for s in chw}) != 1 or len({len(s) for s in ins}) != 1:
                raise NetworkError("shape", path, f"concat of incompatible shapes {ins}")
            total = sum(s[0] for s in chw)
            layer.out_shape = (total,) + tuple(ins[0][1:])
        shapes[layer.id] = layer.out_shape
    dangling = [l.id for l in net.layers if l.id not in used]
    if len(dangling) != 1 or dangling[0] != net.layers[-1].id:
        raise NetworkError("shape", "layers", f"expected exactly one terminal layer, got {dangling}")


def load_layer_weights(layer: Layer, base_dir=None) -> None:
    rows, cols = layer.weight_shape
    if layer.weight_seed is not None:
        layer.weights = generate_weights(layer.weight_seed, rows, cols)
        return
    path = os.path.join(base_dir or ".", layer.weight_file)
    data = np.fromfile(path, dtype=np.int8)
    if data.size != rows * cols:
        raise NetworkError(
            "schema", f"layer {layer.id}.weight_file", f"{path}: expected {rows * cols} bytes"
        )
    layer.weights = data.reshape(rows, cols)


def reseed(net: Network, base_seed: int) -> None:
    """Replace every seeded layer's weights with ones drawn from ``base_seed + id``."""
    for layer in net.layers:
        if layer.weight_seed is not None:
            layer.weight_seed = base_seed + layer.id
            load_layer_weights(layer)


# -- reference inference ------------------------------------------------------------


def round_shift(x: np.ndarray, shift: int) -> np.ndarray:
    """Divide by ``2**shift`` rounding half away from zero (exact integers)."""
    x = np.asarray(x, dtype=np.int64)
    if shift == 0:
        return x
    mag = (np.abs(x) + (1 << (shift - 1))) >> shift
    return np.where(x < 0, -mag, mag)


def requantize(acc: np.ndarray, multiplier: int, shift: int) -> np.ndarray:
    """int32 accumulator -> int8 via ``clamp(round(acc * multiplier / 2**shift))``."""
    y = np.asarray(acc, dtype=np.int64) * multiplier
    return np.clip(round_shift(y, shift), -128, 127).astype(np.int8)


def round_div(total: np.ndarray, n: int) -> np.ndarray:
    total = np.asarray(total, dtype=np.int64)
    mag = (2 * np.abs(total) + n) // (2 * n)
    return np.where(total < 0, -mag, mag)


def _windows(x: np.ndarray, kh, kw, stride, ho, wo):
    for ky in range(kh):
        for kx in range(kw):
            yield ky, kx, x[
                :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride
            ]


def conv2d_int(x: np.ndarray, w: np.ndarray, layer: Layer) -> np.ndarray:
    """int64 accumulators of a direct convolution; ``w`` rows in (c, ky, kx) order."""
    c = x.shape[0]
    kh, kw = layer.kernel
    k, ho, wo = layer.out_shape
    p = layer.padding
    xp = np.pad(x.astype(np.int64), ((0, 0), (p, p), (p, p)))
    w4 = w.astype(np.int64).reshape(c, kh, kw, k)
    acc = np.zeros((k, ho, wo), dtype=np.int64)
    for ky, kx, patch in _windows(xp, kh, kw, layer.stride, ho, wo):
        acc += np.einsum("chw,ck->khw", patch, w4[:, ky, kx, :])
    return acc


def pool2d(x: np.ndarray, layer: Layer) -> np.ndarray:
    kh, kw = layer.kernel
    _, ho, wo = layer.out_shape
    parts = [p.astype(np.int64) for _, _, p in _windows(x, kh, kw, layer.stride, ho, wo)]
    if layer.pool_kind == "max":
        return np.max(parts, axis=0).astype(np.int8)
    return round_div(np.sum(parts, axis=0), kh * kw).astype(np.int8)


def run_layer(layer: Layer, inputs: list[np.ndarray]) -> np.ndarray:
    x = inputs[0]
    if layer.kind == "conv":
        acc = conv2d_int(x, layer.weights, layer)
        return requantize(acc, layer.quant.multiplier, layer.quant.shift)
    if layer.kind == "fc":
        acc = x.reshape(-1).astype(np.int64) @ layer.weights.astype(np.int64)
        return requantize(acc, layer.quant.multiplier, layer.quant.shift)
    if layer.kind == "pool":
        return pool2d(x, layer)
    if layer.kind == "relu":
        return np.maximum(x, 0).astype(np.int8)
    if layer.kind == "add":
        s = inputs[0].astype(np.int16) + inputs[1].astype(np.int16)
        return np.clip(s, -128, 127).astype(np.int8)
    if layer.kind == "concat":
        return np.concatenate(inputs, axis=0).astype(np.int8)
    raise ValueError(layer.kind)


def reference_inference(net: Network, x: np.ndarray) -> np.ndarray:
    """Bit-exact integer inference; returns the terminal layer's int8 tensor."""
    x = np.asarray(x)
    if x.shape != net.input_shape:
        if x.size == math.prod(net.input_shape):
            x = x.reshape(net.input_shape)
        else:
            raise NetworkError("shape", "input", f"expected {net.input_shape}, got {x.shape}")
    acts = {-1: x.astype(np.int8)}
    for layer in net.layers:
        acts[layer.id] = run_layer(layer, [acts[p] for p in layer.producers])
        assert acts[layer.id].shape == layer.out_shape
    return acts[net.terminal.id]

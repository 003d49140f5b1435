"""Minimal feed-forward inference engine and the ADLW weights file format.

Five layer kinds only: Conv2D (valid padding, stride 1), ReLU, Flatten,
Dense, Softmax. Tensors are channels-first (channels, height, width).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ADLW_MAGIC = b"ADLW"
ADLW_VERSION = 1

_KIND_CONV2D = 1
_KIND_RELU = 2
_KIND_FLATTEN = 3
_KIND_DENSE = 4
_KIND_SOFTMAX = 5


class WeightsFormatError(ValueError):
    """Malformed, truncated, or wrong-version ADLW file."""


class ShapeMismatchError(ValueError):
    """Layer shapes do not compose, or an input does not fit the model."""


@dataclass(frozen=True)
class Conv2D:
    weights: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.ndim != 4:
            raise ValueError(f"Conv2D weights must be 4D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"Conv2D bias shape {b.shape} does not match {w.shape[0]} filters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.ndim != 2:
            raise ValueError(f"Dense weights must be 2D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"Dense bias shape {b.shape} does not match out_dim {w.shape[0]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class Softmax:
    pass


Layer = Conv2D | ReLU | Flatten | Dense | Softmax


def conv2d(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid-padding stride-1 2D convolution (cross-correlation), channels-first."""
    kh, kw = weights.shape[2], weights.shape[3]
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    # windows: (in_c, out_h, out_w, kh, kw)
    out = np.einsum("chwpq,ocpq->ohw", windows, weights.astype(np.float64))
    return out + bias.astype(np.float64)[:, None, None]


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return weights.astype(np.float64) @ x + bias.astype(np.float64)


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x)
    # floor keeps the output strictly positive even when exp underflows
    e = np.maximum(np.exp(shifted), np.finfo(np.float64).tiny)
    return e / np.sum(e)


def _layer_output_shape(layer: Layer, shape: tuple, index: int) -> tuple:
    """Shape after one layer; flat shapes are 1-tuples."""
    if isinstance(layer, Conv2D):
        if len(shape) != 3:
            raise ShapeMismatchError(f"layer {index} (Conv2D): expected 3D input, got {shape}")
        c, h, w = shape
        oc, ic, kh, kw = layer.weights.shape
        if ic != c:
            raise ShapeMismatchError(
                f"layer {index} (Conv2D): expects {ic} input channels, got {c}"
            )
        if kh > h or kw > w:
            raise ShapeMismatchError(
                f"layer {index} (Conv2D): kernel {kh}x{kw} larger than input {h}x{w}"
            )
        return (oc, h - kh + 1, w - kw + 1)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeMismatchError(
                f"layer {index} (Dense): expected flat input, got {shape}; missing Flatten?"
            )
        out_dim, in_dim = layer.weights.shape
        if in_dim != shape[0]:
            raise ShapeMismatchError(
                f"layer {index} (Dense): expects input dim {in_dim}, got {shape[0]}"
            )
        return (out_dim,)
    # ReLU / Softmax preserve shape
    return shape


@dataclass(frozen=True)
class NetworkWeights:
    layers: tuple
    input_shape: tuple  # (channels, height, width)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        for i, layer in enumerate(self.layers):
            for arr in (getattr(layer, "weights", None), getattr(layer, "bias", None)):
                if arr is not None and not np.all(np.isfinite(arr)):
                    raise ValueError(f"layer {i} has non-finite weights")
        self.validate()

    def validate(self) -> tuple:
        """Check that consecutive layer shapes compose; returns the output shape."""
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(layer, shape, i)
        return shape

    @property
    def output_dim(self) -> int:
        shape = self.validate()
        if len(shape) != 1:
            raise ShapeMismatchError(f"model output is not flat: {shape}")
        return shape[0]


def forward(model: NetworkWeights, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one (channels, height, width) input."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeMismatchError(
            f"input shape {x.shape} does not match model input {model.input_shape}"
        )
    for i, layer in enumerate(model.layers):
        _layer_output_shape(layer, x.shape, i)
        if isinstance(layer, Conv2D):
            x = conv2d(x, layer.weights, layer.bias)
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, Flatten):
            x = x.reshape(-1)
        elif isinstance(layer, Dense):
            x = dense(x, layer.weights, layer.bias)
        elif isinstance(layer, Softmax):
            x = softmax(x)
        else:
            raise TypeError(f"unknown layer kind at index {i}: {type(layer)!r}")
    return x


# --- ADLW serialization -----------------------------------------------------
#
# magic "ADLW" | u32 version | u32 layer_count | per layer:
#   u8 kind | u32 shape fields | row-major float32 LE weights then bias
# Conv2D shape fields: out_c, in_c, kh, kw. Dense: out_dim, in_dim.
# ReLU/Flatten/Softmax carry no payload. Bias is always present.


def save_weights(model: NetworkWeights, path: str | Path) -> None:
    out = bytearray()
    out += ADLW_MAGIC
    out += struct.pack("<II", ADLW_VERSION, len(model.layers))
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            out += struct.pack("<B", _KIND_CONV2D)
            out += struct.pack("<IIII", *layer.weights.shape)
            out += layer.weights.astype("<f4").tobytes()
            out += layer.bias.astype("<f4").tobytes()
        elif isinstance(layer, ReLU):
            out += struct.pack("<B", _KIND_RELU)
        elif isinstance(layer, Flatten):
            out += struct.pack("<B", _KIND_FLATTEN)
        elif isinstance(layer, Dense):
            out += struct.pack("<B", _KIND_DENSE)
            out += struct.pack("<II", *layer.weights.shape)
            out += layer.weights.astype("<f4").tobytes()
            out += layer.bias.astype("<f4").tobytes()
        elif isinstance(layer, Softmax):
            out += struct.pack("<B", _KIND_SOFTMAX)
        else:
            raise TypeError(f"cannot serialize layer {type(layer)!r}")
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightsFormatError(
                f"truncated file: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()


def load_weights(
    path: str | Path, input_shape: tuple | None = None
) -> NetworkWeights:
    """Parse an ADLW file and validate layer-shape composition.

    The binary carries no input shape; it comes from the input_shape argument
    or, failing that, from the companion manifest next to the weights file
    (same stem, .manifest.txt suffix).
    """
    path = Path(path)
    reader = _Reader(path.read_bytes())
    if reader.take(4) != ADLW_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic, not an ADLW file")
    version = reader.u32()
    if version != ADLW_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    layer_count = reader.u32()
    layers = []
    for i in range(layer_count):
        kind = reader.u8()
        if kind == _KIND_CONV2D:
            oc, ic, kh, kw = (reader.u32() for _ in range(4))
            w = reader.floats(oc * ic * kh * kw).reshape(oc, ic, kh, kw)
            b = reader.floats(oc)
            layers.append(Conv2D(w, b))
        elif kind == _KIND_RELU:
            layers.append(ReLU())
        elif kind == _KIND_FLATTEN:
            layers.append(Flatten())
        elif kind == _KIND_DENSE:
            out_dim, in_dim = reader.u32(), reader.u32()
            w = reader.floats(out_dim * in_dim).reshape(out_dim, in_dim)
            b = reader.floats(out_dim)
            layers.append(Dense(w, b))
        elif kind == _KIND_SOFTMAX:
            layers.append(Softmax())
        else:
            raise WeightsFormatError(f"{path}: unknown layer kind {kind} at layer {i}")
    if reader.pos != len(reader.data):
        raise WeightsFormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    if input_shape is None:
        manifest_path = manifest_path_for(path)
        if not manifest_path.exists():
            raise WeightsFormatError(
                f"{path}: no input_shape given and no manifest at {manifest_path}"
            )
        manifest = load_manifest(manifest_path)
        input_shape = (
            int(manifest["input_channels"]),
            int(manifest["input_height"]),
            int(manifest["input_width"]),
        )
    return NetworkWeights(tuple(layers), tuple(input_shape))


def manifest_path_for(weights_path: str | Path) -> Path:
    return Path(weights_path).with_suffix(".manifest.txt")


def load_manifest(path: str | Path) -> dict:
    """Parse the companion 'key = value' manifest."""
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def save_manifest(path: str | Path, entries: dict) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")

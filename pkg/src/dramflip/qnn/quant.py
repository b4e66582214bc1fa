"""Per-layer symmetric post-training quantization into 2's-complement bit tensors.

Weight codes are signed integers in ``[-2**(n_q-1), 2**(n_q-1) - 1]`` and
dequantize to ``scale * code``.  Bit ``i`` of a code is its 2's-complement
bit ``i`` (bit 0 is the LSB, bit ``n_q - 1`` the sign bit), so a code equals
``-2**(n_q-1) * b[n_q-1] + sum(2**i * b[i])``.
"""

from __future__ import annotations

import copy
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from .model import FloatModel

MAGIC = b"QNN1"
CHECKPOINT_VERSION = "1.0"


def bit_weights(n_q: int) -> np.ndarray:
    """Value contributed by each bit position, LSB first."""
    w = 2.0 ** np.arange(n_q)
    w[-1] = -(2.0 ** (n_q - 1))
    return w


def codes_to_bits(codes: np.ndarray, n_q: int) -> np.ndarray:
    u = np.asarray(codes, dtype=np.int64).reshape(-1) & ((1 << n_q) - 1)
    return ((u[:, None] >> np.arange(n_q)) & 1).astype(np.uint8)


def bits_to_codes(bits: np.ndarray, n_q: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    return (bits * bit_weights(n_q).astype(np.int64)).sum(axis=-1)


@dataclass
class QuantizedModel:
    spec: list[dict]
    codes: list[np.ndarray]
    scales: list[float]
    biases: list[np.ndarray]
    n_q: int
    input_shape: tuple[int, ...]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.codes = [np.asarray(c, dtype=np.int64) for c in self.codes]

    @property
    def num_layers(self) -> int:
        return len(self.codes)

    @property
    def total_bits(self) -> int:
        return sum(c.size for c in self.codes) * self.n_q

    def weights(self) -> list[np.ndarray]:
        return [s * c for s, c in zip(self.scales, self.codes)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return layers.forward(self.spec, self.weights(), self.biases, x)

    def bits(self, layer: int) -> np.ndarray:
        """``(n_weights, n_q)`` bit matrix of a layer, LSB in column 0."""
        return codes_to_bits(self.codes[layer], self.n_q)

    def get_bit(self, layer: int, weight: int, bit: int) -> int:
        code = int(self.codes[layer].reshape(-1)[weight])
        return (code >> bit) & 1

    def flip_bit(self, layer: int, weight: int, bit: int) -> int:
        """Flip one bit in place; return its new value."""
        flat = self.codes[layer].reshape(-1)
        mask = (1 << self.n_q) - 1
        u = (int(flat[weight]) & mask) ^ (1 << bit)
        flat[weight] = u - (1 << self.n_q) if u >> (self.n_q - 1) else u
        return (u >> bit) & 1

    def hamming(self, other: "QuantizedModel") -> int:
        """Number of differing weight bits across all layers."""
        return int(sum((self.bits(l) != other.bits(l)).sum() for l in range(self.num_layers)))

    def copy(self) -> "QuantizedModel":
        return copy.deepcopy(self)


def quantize(model: FloatModel, n_q: int = 8) -> QuantizedModel:
    if not 2 <= n_q <= 16:
        raise ValueError("n_q must lie in [2, 16]")
    qmax = 2 ** (n_q - 1) - 1
    codes, scales = [], []
    for i, w in enumerate(model.weights):
        peak = float(np.abs(w).max()) if w.size else 0.0
        if peak == 0.0:
            warnings.warn(f"layer {i} is all zeros; using scale 1", stacklevel=2)
            scale = 1.0
        else:
            scale = peak / qmax
        codes.append(np.clip(np.round(w / scale), -qmax - 1, qmax).astype(np.int64))
        scales.append(scale)
    return QuantizedModel(copy.deepcopy(model.spec), codes, scales, [b.copy() for b in model.biases],
                          n_q, model.input_shape)


def dequantize(model: QuantizedModel) -> FloatModel:
    return FloatModel(copy.deepcopy(model.spec), model.weights(), [b.copy() for b in model.biases],
                      model.input_shape)


def forward_loss(model, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Logits and mean cross-entropy of ``model`` on a batch."""
    if x.shape[1:] != tuple(model.input_shape):
        raise ValueError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    if len(x) != len(labels):
        raise ValueError("batch and labels differ in length")
    logits = model.forward(x)
    loss, _ = layers.cross_entropy(logits, labels)
    return logits, loss


@dataclass
class BitGradients:
    """d(loss)/d(bit) per layer, each ``(n_weights, n_q)``, plus the weight gradients."""

    bits: list[np.ndarray]
    weights: list[np.ndarray]
    loss: float


def weight_gradients(model, x: np.ndarray, labels: np.ndarray):
    weights = model.weights() if isinstance(model, QuantizedModel) else model.weights
    logits, caches = layers.forward(model.spec, weights, model.biases, x, keep=True)
    loss, grad = layers.cross_entropy(logits, labels)
    gws, gbs = layers.backward(model.spec, weights, caches, grad)
    return loss, gws, gbs


def bit_gradients(model: QuantizedModel, x: np.ndarray, labels: np.ndarray) -> BitGradients:
    loss, gws, _ = weight_gradients(model, x, labels)
    bw = bit_weights(model.n_q)
    per_layer = [g.reshape(-1, 1) * (s * bw) for g, s in zip(gws, model.scales)]
    return BitGradients(per_layer, gws, loss)


# -- checkpoint ---------------------------------------------------------------

def save_qnn(model: QuantizedModel, path: str | Path) -> None:
    """JSON header plus little-endian integer codes and float64 biases."""
    code_dtype = "<i1" if model.n_q <= 8 else "<i2"
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": model.spec,
        "n_q": model.n_q,
        "scales": [float(s) for s in model.scales],
        "seed": model.seed,
        "input_shape": list(model.input_shape),
        "code_dtype": code_dtype,
        "weight_shapes": [list(c.shape) for c in model.codes],
        "bias_shapes": [list(b.shape) for b in model.biases],
        "meta": model.meta,
    }
    head = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(c.astype(code_dtype).tobytes() for c in model.codes)
    payload += b"".join(np.asarray(b, dtype="<f8").tobytes() for b in model.biases)
    Path(path).write_bytes(MAGIC + struct.pack("<I", len(head)) + head + payload)


def load_qnn(path: str | Path) -> QuantizedModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path} is not a QNN checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    if str(header["format_version"]).split(".")[0] != CHECKPOINT_VERSION.split(".")[0]:
        raise ValueError(f"unsupported checkpoint format_version {header['format_version']!r}")
    offset = 8 + n
    dtype = np.dtype(header["code_dtype"])
    codes, biases = [], []
    for shape in header["weight_shapes"]:
        count = int(np.prod(shape))
        codes.append(np.frombuffer(raw, dtype=dtype, count=count, offset=offset).astype(np.int64).reshape(shape))
        offset += count * dtype.itemsize
    for shape in header["bias_shapes"]:
        count = int(np.prod(shape))
        biases.append(np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape))
        offset += count * 8
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return QuantizedModel(header["spec"], codes, header["scales"], biases, header["n_q"],
                          tuple(header["input_shape"]), header["seed"], header.get("meta", {}))

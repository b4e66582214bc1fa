"""Forward and backward passes for the small layer set used by the victims.

A network is described by a list of plain dicts (the "spec"), e.g.
``[{"type": "dense", "in": 32, "out": 64}, {"type": "relu"}, ...]``.
Weights and biases are passed in separately so the same code runs float
models and dequantized models.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAMETRIC = ("dense", "conv2d")


def is_parametric(layer: dict) -> bool:
    return layer["type"] in PARAMETRIC


def param_shapes(layer: dict) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if layer["type"] == "dense":
        return (layer["out"], layer["in"]), (layer["out"],)
    if layer["type"] == "conv2d":
        return (layer["out_ch"], layer["in_ch"], 3, 3), (layer["out_ch"],)
    raise ValueError(f"{layer['type']} has no parameters")


def validate_spec(spec: list[dict], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Walk the spec with a sample shape (no batch axis); return the output shape."""
    shape = tuple(input_shape)
    for i, layer in enumerate(spec):
        kind = layer.get("type")
        if kind == "dense":
            if shape != (layer["in"],):
                raise ValueError(f"layer {i}: dense expects ({layer['in']},), got {shape}")
            shape = (layer["out"],)
        elif kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer["in_ch"]:
                raise ValueError(f"layer {i}: conv2d expects {layer['in_ch']} channels, got {shape}")
            shape = (layer["out_ch"],) + shape[1:]
        elif kind == "maxpool2":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ValueError(f"layer {i}: maxpool2 needs even spatial dims, got {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "relu":
            pass
        else:
            raise ValueError(f"layer {i}: unknown layer type {kind!r}")
    return shape


def mlp_spec(in_features: int, hidden: list[int], num_classes: int) -> list[dict]:
    spec, width = [], in_features
    for h in hidden:
        spec += [{"type": "dense", "in": width, "out": h}, {"type": "relu"}]
        width = h
    spec.append({"type": "dense", "in": width, "out": num_classes})
    return spec


def cnn_spec(in_ch: int, size: int, channels: int, num_classes: int) -> list[dict]:
    """One 3x3 conv + ReLU + 2x2 max-pool, then a dense classifier."""
    return [
        {"type": "conv2d", "in_ch": in_ch, "out_ch": channels},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "flatten"},
        {"type": "dense", "in": channels * (size // 2) ** 2, "out": num_classes},
    ]


# -- individual layers --------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d_forward(x, w, b):
    n, _, h, wd = x.shape
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def conv2d_backward(grad, x, cols, w):
    n, c, h, wd = x.shape
    g = grad.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
    gw = (g.T @ cols).reshape(w.shape)
    gb = g.sum(axis=0)
    gcols = (g @ w.reshape(w.shape[0], -1)).reshape(n, h, wd, c, 3, 3)
    gxp = np.zeros((n, c, h + 2, wd + 2), dtype=grad.dtype)
    for di in range(3):
        for dj in range(3):
            gxp[:, :, di:di + h, dj:dj + wd] += gcols[..., di, dj].transpose(0, 3, 1, 2)
    return gxp[:, :, 1:-1, 1:-1], gw, gb


def maxpool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], idx


def maxpool_backward(grad, x_shape, idx):
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
    # gradient goes to the first maximum only
    np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


# -- whole network -------------------------------------------------------------

def forward(spec: list[dict], weights: list[np.ndarray], biases: list[np.ndarray], x: np.ndarray,
            keep: bool = False):
    """Logits for ``x``; with ``keep`` also the per-layer caches for ``backward``."""
    caches = []
    p = 0
    for layer in spec:
        kind = layer["type"]
        if kind == "dense":
            w, b = weights[p], biases[p]
            p += 1
            cache = (x,)
            x = x @ w.T + b
        elif kind == "conv2d":
            w, b = weights[p], biases[p]
            p += 1
            out, cols = conv2d_forward(x, w, b)
            cache = (x, cols)
            x = out
        elif kind == "relu":
            cache = (x > 0,)
            x = np.where(cache[0], x, 0.0)
        elif kind == "maxpool2":
            out, idx = maxpool_forward(x)
            cache = (x.shape, idx)
            x = out
        elif kind == "flatten":
            cache = (x.shape,)
            x = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        if keep:
            caches.append(cache)
    return (x, caches) if keep else x


def backward(spec: list[dict], weights: list[np.ndarray], caches: list, grad: np.ndarray):
    """Gradients of the loss w.r.t. every weight and bias, given d(loss)/d(logits)."""
    n_params = sum(is_parametric(layer) for layer in spec)
    gws: list = [None] * n_params
    gbs: list = [None] * n_params
    p = n_params
    for layer, cache in zip(reversed(spec), reversed(caches)):
        kind = layer["type"]
        if kind == "dense":
            p -= 1
            (x,) = cache
            gws[p] = grad.T @ x
            gbs[p] = grad.sum(axis=0)
            grad = grad @ weights[p]
        elif kind == "conv2d":
            p -= 1
            x, cols = cache
            grad, gws[p], gbs[p] = conv2d_backward(grad, x, cols, weights[p])
        elif kind == "relu":
            grad = grad * cache[0]
        elif kind == "maxpool2":
            grad = maxpool_backward(grad, *cache)
        elif kind == "flatten":
            grad = grad.reshape(cache[0])
    return gws, gbs


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    n = logits.shape[0]
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n

"""Reference execution of every layer, straight from the layer equations.

This is the numerical oracle for generated C. All arithmetic is float32 and
every reduction runs in a fixed order so that generated code using the same
order agrees bit for bit:

* conv: accumulator starts at the bias, then adds ``w * x`` for kernel row,
  kernel column, input channel (outermost to innermost); padded positions
  contribute ``w * 0``.
* max: a running ``v > m ? v : m`` chain in window order.
* softmax: channel max, ``exp`` in double precision rounded to float32, a
  left-to-right sum, then one division per channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    BatchNorm,
    Conv2D,
    Dropout,
    LeakyReLU,
    MaxPool2D,
    Model,
    ReLU,
    Shape3,
    ShapeError,
    Softmax,
    conv_padding,
    layer_output_shape,
)

F32 = np.float32


def as_tensor(data, shape: Shape3 | None = None) -> np.ndarray:
    arr = np.asarray(data, dtype=F32)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    if arr.ndim != 3:
        raise ShapeError(f"tensor must be rank 3 (h, w, c), got shape {arr.shape}")
    return arr


def pad_input(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    top, bottom, left, right = conv_padding(layer, Shape3(*x.shape))
    if not (top or bottom or left or right):
        return x
    return np.pad(x, ((top, bottom), (left, right), (0, 0)))


def conv2d(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    x = as_tensor(x)
    out = layer_output_shape(layer, Shape3(*x.shape))
    xp = pad_input(x, layer)
    (kh, kw), (sh, sw) = layer.kernel_size, layer.stride
    h_span = sh * (out.height - 1) + 1
    w_span = sw * (out.width - 1) + 1
    acc = np.broadcast_to(layer.bias, tuple(out)).copy()
    for n in range(kh):
        for m in range(kw):
            for o in range(layer.in_channels):
                patch = xp[n : n + h_span : sh, m : m + w_span : sw, o]
                acc = acc + patch[:, :, None] * layer.kernel[n, m, o]
    return _activate(acc, layer.activation)


def maxpool2d(x: np.ndarray, layer: MaxPool2D) -> np.ndarray:
    x = as_tensor(x)
    out = layer_output_shape(layer, Shape3(*x.shape))
    (kh, kw), (sh, sw) = layer.window, layer.stride
    h_span = sh * (out.height - 1) + 1
    w_span = sw * (out.width - 1) + 1
    best = None
    for n in range(kh):
        for m in range(kw):
            v = x[n : n + h_span : sh, m : m + w_span : sw, :]
            best = v.copy() if best is None else np.where(v > best, v, best)
    return best


def relu(x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    return np.where(x > 0, x, F32(0))


def leaky_relu(x: np.ndarray, alpha: float) -> np.ndarray:
    x = as_tensor(x)
    return np.where(x > 0, x, F32(alpha) * x)


def batch_norm(x: np.ndarray, layer: BatchNorm) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[2] != layer.channels:
        raise ShapeError(f"batchnorm has {layer.channels} channels, input has {x.shape[2]}")
    y = (x - layer.mu) / layer.sigma
    if layer.affine:
        y = y * layer.gamma + layer.beta
    return y


def _exp32(d: np.ndarray) -> np.ndarray:
    # libm exp on doubles, rounded to float32: the same call generated code makes.
    flat = [math.exp(float(v)) for v in d.ravel()]
    return np.array(flat, dtype=np.float64).astype(F32).reshape(d.shape)


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over channels at every spatial position (max-subtracted)."""
    x = as_tensor(x)
    channels = x.shape[2]
    m = x[:, :, 0]
    for k in range(1, channels):
        m = np.where(x[:, :, k] > m, x[:, :, k], m)
    e = _exp32(x - m[:, :, None])
    s = e[:, :, 0]
    for k in range(1, channels):
        s = s + e[:, :, k]
    return e / s[:, :, None]


def _activate(x: np.ndarray, activation) -> np.ndarray:
    if activation is None:
        return x
    return apply_layer(activation, x)


def apply_layer(layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv2D):
        return conv2d(x, layer)
    if isinstance(layer, MaxPool2D):
        return maxpool2d(x, layer)
    if isinstance(layer, ReLU):
        return relu(x)
    if isinstance(layer, LeakyReLU):
        return leaky_relu(x, layer.alpha)
    if isinstance(layer, BatchNorm):
        return batch_norm(x, layer)
    if isinstance(layer, Softmax):
        return softmax(x)
    if isinstance(layer, Dropout):
        return x
    raise TypeError(f"unsupported layer {type(layer).__name__}")


@dataclass(frozen=True)
class ExecutionTrace:
    outputs: tuple

    def __len__(self) -> int:
        return len(self.outputs)

    def __getitem__(self, index):
        return self.outputs[index]

    @property
    def total_elements(self) -> int:
        return sum(t.size for t in self.outputs)


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim == 1 and x.size == model.input_shape.size:
        x = x.reshape(tuple(model.input_shape))
    if x.shape != tuple(model.input_shape):
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def run_traced(model: Model, x) -> ExecutionTrace:
    x = _check_input(model, x)
    outputs = []
    for layer in model.layers:
        x = apply_layer(layer, x)
        outputs.append(x)
    return ExecutionTrace(tuple(outputs))


def run(model: Model, x) -> np.ndarray:
    x = _check_input(model, x)
    for layer in model.layers:
        x = apply_layer(layer, x)
    return x

"""On-disk model format: a JSON manifest plus a raw little-endian float32 blob.

The blob holds, per layer in manifest order, conv ``kernel`` (row, col,
in_channel, out_channel; out_channel fastest) then ``bias``, or batchnorm
``mu``, ``sigma`` and, if affine, ``gamma``, ``beta``. No alignment bytes.
"""

from __future__ import annotations

import json
from os import PathLike
from pathlib import Path

import numpy as np

from .model import (
    BatchNorm,
    Conv2D,
    Dropout,
    LeakyReLU,
    MaxPool2D,
    Model,
    ModelError,
    Padding,
    ReLU,
    Shape3,
    ShapeError,
    Softmax,
    layer_output_shape,
)

LAYER_KINDS = ("conv", "maxpool", "relu", "leaky_relu", "batchnorm", "softmax", "dropout")
_ACTIVATIONS = {"relu": ReLU, "softmax": Softmax, "leaky_relu": LeakyReLU}
_LE_F32 = np.dtype("<f4")


class ManifestError(ModelError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line, self.column = line, column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(f"manifest: {where}{message}")


class WeightsError(ModelError):
    def __init__(self, message: str, expected: int, actual: int):
        self.expected, self.actual = expected, actual
        super().__init__(f"{message} (expected {expected} bytes, got {actual})")


def _pair(value, where: str) -> tuple[int, int]:
    if isinstance(value, int) and not isinstance(value, bool):
        value = [value, value]
    if (
        not isinstance(value, list)
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in value)
    ):
        raise ManifestError(f"{where} must be a positive integer or a pair of them, got {value!r}")
    return value[0], value[1]


def _number(spec: dict, key: str, where: str) -> float:
    value = spec.get(key)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ManifestError(f"{where}.{key} must be a number, got {value!r}")
    return float(value)


def _layer_tensors(spec: dict, shape: Shape3, where: str) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of the blob tensors a layer consumes."""
    kind = spec["kind"]
    if kind == "conv":
        kh, kw = _pair(spec.get("kernel"), f"{where}.kernel")
        filters = spec.get("filters")
        if not isinstance(filters, int) or isinstance(filters, bool) or filters < 1:
            raise ManifestError(f"{where}.filters must be a positive integer, got {filters!r}")
        return [
            (f"{where}.kernel", (kh, kw, shape.channels, filters)),
            (f"{where}.bias", (filters,)),
        ]
    if kind == "batchnorm":
        names = ["mu", "sigma"] + (["gamma", "beta"] if spec.get("affine", False) else [])
        return [(f"{where}.{n}", (shape.channels,)) for n in names]
    return []


def _build_layer(spec: dict, arrays: list[np.ndarray], where: str):
    kind = spec["kind"]
    if kind == "conv":
        padding = spec.get("padding", "valid")
        if padding not in ("same", "valid"):
            raise ManifestError(f"{where}.padding must be 'same' or 'valid', got {padding!r}")
        activation = spec.get("activation")
        act = None
        if activation is not None:
            if activation not in _ACTIVATIONS:
                raise ManifestError(f"{where}.activation {activation!r} is not supported")
            if activation == "leaky_relu":
                act = LeakyReLU(_number(spec, "alpha", where))
            else:
                act = _ACTIVATIONS[activation]()
        return Conv2D(
            arrays[0],
            arrays[1],
            _pair(spec.get("stride", [1, 1]), f"{where}.stride"),
            Padding(padding),
            act,
        )
    if kind == "maxpool":
        window = _pair(spec.get("window"), f"{where}.window")
        stride = spec.get("stride")
        return MaxPool2D(window, None if stride is None else _pair(stride, f"{where}.stride"))
    if kind == "relu":
        return ReLU()
    if kind == "leaky_relu":
        return LeakyReLU(_number(spec, "alpha", where))
    if kind == "softmax":
        return Softmax()
    if kind == "dropout":
        return Dropout(_number(spec, "rate", where))
    if kind == "batchnorm":
        return BatchNorm(*arrays)
    raise AssertionError(kind)


def parse_manifest(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(doc, dict):
        raise ManifestError("top level must be an object")
    for key in ("name", "input", "layers"):
        if key not in doc:
            raise ManifestError(f"missing required field {key!r}")
    if not isinstance(doc["name"], str):
        raise ManifestError("name must be a string")
    inp = doc["input"]
    if (
        not isinstance(inp, list)
        or len(inp) != 3
        or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in inp)
    ):
        raise ManifestError(f"input must be [h, w, c] positive integers, got {inp!r}")
    if not isinstance(doc["layers"], list):
        raise ManifestError("layers must be an array")
    if not doc["layers"]:
        raise ManifestError("empty model")
    for index, spec in enumerate(doc["layers"]):
        if not isinstance(spec, dict):
            raise ManifestError(f"layers[{index}] must be an object")
        if spec.get("kind") not in LAYER_KINDS:
            raise ManifestError(
                f"layers[{index}]: unknown layer kind {spec.get('kind')!r} "
                f"(expected one of {', '.join(LAYER_KINDS)})"
            )
    return doc


def model_from_manifest(doc: dict, blob: bytes) -> Model:
    shape = Shape3(*doc["input"])
    layers = []
    offset = 0
    for index, spec in enumerate(doc["layers"]):
        where = f"layers[{index}]"
        arrays = []
        for name, tshape in _layer_tensors(spec, shape, where):
            nbytes = 4 * int(np.prod(tshape))
            if offset + nbytes > len(blob):
                raise WeightsError(
                    f"weights blob too short: tensor {name} {tshape} is underfilled",
                    expected=_blob_size(doc),
                    actual=len(blob),
                )
            arrays.append(
                np.frombuffer(blob, _LE_F32, int(np.prod(tshape)), offset)
                .reshape(tshape)
                .astype(np.float32)
            )
            offset += nbytes
        try:
            layer = _build_layer(spec, arrays, where)
            shape = layer_output_shape(layer, shape)
        except ManifestError:
            raise
        except ShapeError as exc:
            raise ShapeError(f"{where}: {exc}") from None
        except ModelError as exc:
            raise ManifestError(f"{where}: {exc}") from None
        layers.append(layer)
    if offset != len(blob):
        raise WeightsError(
            f"weights blob has {len(blob) - offset} trailing bytes", expected=offset, actual=len(blob)
        )
    return Model(doc["name"], Shape3(*doc["input"]), tuple(layers))


def _blob_size(doc: dict) -> int:
    """Total bytes the manifest declares, counted up to the first shape error."""
    shape = Shape3(*doc["input"])
    total = 0
    for index, spec in enumerate(doc["layers"]):
        tensors = _layer_tensors(spec, shape, f"layers[{index}]")
        total += sum(4 * int(np.prod(t)) for _, t in tensors)
        arrays = [np.zeros(t, np.float32) for _, t in tensors]
        if spec["kind"] == "batchnorm":
            arrays[1] = arrays[1] + 1
        try:
            shape = layer_output_shape(_build_layer(spec, arrays, ""), shape)
        except ModelError:
            break
    return total


def load_model(manifest_path: str | PathLike, weights_path: str | PathLike) -> Model:
    text = Path(manifest_path).read_text(encoding="utf-8")
    blob = Path(weights_path).read_bytes()
    return model_from_manifest(parse_manifest(text), blob)


def manifest_dict(model: Model) -> dict:
    layers = []
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            spec = {
                "kind": "conv",
                "filters": layer.filters,
                "kernel": list(layer.kernel_size),
                "stride": list(layer.stride),
                "padding": layer.padding.value,
            }
            if layer.activation is not None:
                spec["activation"] = layer.activation.kind
                if isinstance(layer.activation, LeakyReLU):
                    spec["alpha"] = layer.activation.alpha
        elif isinstance(layer, MaxPool2D):
            spec = {"kind": "maxpool", "window": list(layer.window), "stride": list(layer.stride)}
        elif isinstance(layer, LeakyReLU):
            spec = {"kind": "leaky_relu", "alpha": layer.alpha}
        elif isinstance(layer, Dropout):
            spec = {"kind": "dropout", "rate": layer.rate}
        elif isinstance(layer, BatchNorm):
            spec = {"kind": "batchnorm", "affine": layer.affine}
        else:
            spec = {"kind": layer.kind}
        layers.append(spec)
    return {"name": model.name, "input": list(model.input_shape), "layers": layers}


def dumps_manifest(model: Model) -> str:
    return json.dumps(manifest_dict(model), indent=2) + "\n"


def weights_blob(model: Model) -> bytes:
    parts = []
    for layer in model.layers:
        if isinstance(layer, Conv2D):
            parts += [layer.kernel, layer.bias]
        elif isinstance(layer, BatchNorm):
            parts += [layer.mu, layer.sigma]
            if layer.affine:
                parts += [layer.gamma, layer.beta]
    return b"".join(np.ascontiguousarray(p, _LE_F32).tobytes() for p in parts)


def save_model(model: Model, manifest_path: str | PathLike, weights_path: str | PathLike) -> None:
    Path(manifest_path).write_text(dumps_manifest(model), encoding="utf-8")
    Path(weights_path).write_bytes(weights_blob(model))

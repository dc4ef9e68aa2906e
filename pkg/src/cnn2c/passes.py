"""Model-to-model rewrites applied before code generation."""

from __future__ import annotations

import numpy as np

from .model import BatchNorm, Conv2D, Dropout, Model, UnsupportedPatternError, infer_shapes


def fold_batch_norm(model: Model) -> Model:
    """Absorb every BatchNorm into the Conv directly before it.

    Per output channel ``k`` with ``s = gamma[k] / sigma[k]``::

        kernel'[..., k] = kernel[..., k] * s
        bias'[k]        = (bias[k] - mu[k]) * s + beta[k]
    """
    if not any(isinstance(layer, BatchNorm) for layer in model.layers):
        return model
    out = []
    for index, layer in enumerate(model.layers):
        if not isinstance(layer, BatchNorm):
            out.append(layer)
            continue
        prev = out[-1] if out else None
        if not isinstance(prev, Conv2D) or prev.activation is not None:
            raise UnsupportedPatternError(
                f"layer {index}: batchnorm must directly follow a convolution without "
                f"activation (found {getattr(prev, 'kind', 'input')})"
            )
        if layer.channels != prev.filters:
            raise UnsupportedPatternError(
                f"layer {index}: batchnorm has {layer.channels} channels, "
                f"conv has {prev.filters} filters"
            )
        gamma = layer.gamma if layer.affine else np.ones(layer.channels, np.float32)
        beta = layer.beta if layer.affine else np.zeros(layer.channels, np.float32)
        scale = gamma.astype(np.float64) / layer.sigma.astype(np.float64)
        kernel = prev.kernel.astype(np.float64) * scale
        bias = (prev.bias.astype(np.float64) - layer.mu) * scale + beta
        out[-1] = Conv2D(kernel, bias, prev.stride, prev.padding)
    return model.replace_layers(out)


def erase_dropout(model: Model) -> Model:
    return model.replace_layers(l for l in model.layers if not isinstance(l, Dropout))


def split_activations(model: Model) -> Model:
    """Turn a conv's fused activation into a separate layer after it."""
    out = []
    for layer in model.layers:
        if isinstance(layer, Conv2D) and layer.activation is not None:
            out.append(Conv2D(layer.kernel, layer.bias, layer.stride, layer.padding))
            out.append(layer.activation)
        else:
            out.append(layer)
    return model.replace_layers(out)


def _has_negative_zero(a: np.ndarray) -> bool:
    return bool(np.any((a == 0) & np.signbit(a)))


def positive_zero_biases(model: Model) -> Model:
    """Replace -0.0 biases by +0.0.

    Unrolled code drops the products with zero padding. An accumulator that
    starts at +0.0 can never become -0.0, so dropping those ``+-0`` terms is
    exact; starting from -0.0 it could flip the sign of an all-zero sum.
    """
    if not any(isinstance(l, Conv2D) and _has_negative_zero(l.bias) for l in model.layers):
        return model
    return model.replace_layers(
        Conv2D(l.kernel, l.bias + np.float32(0), l.stride, l.padding, l.activation)
        if isinstance(l, Conv2D) else l
        for l in model.layers
    )


def normalize(model: Model) -> Model:
    """Dropout erased, activations unfused, batch norms folded, biases free of
    -0.0; shapes checked."""
    model = positive_zero_biases(fold_batch_norm(split_activations(erase_dropout(model))))
    infer_shapes(model)
    return model


def is_normalized(model: Model) -> bool:
    for layer in model.layers:
        if isinstance(layer, (BatchNorm, Dropout)):
            return False
        if isinstance(layer, Conv2D) and (layer.activation is not None or _has_negative_zero(layer.bias)):
            return False
    return True

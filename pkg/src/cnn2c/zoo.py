"""The three small reference architectures, with seeded random weights.

Sizes are (height, width, channels). The pedestrian net's final 2-filter
conv uses a 2x4 (rows x cols) kernel so that it consumes the 2x4 feature map
left after three poolings of an 18x36 input.
"""

from __future__ import annotations

import numpy as np

from .model import BatchNorm, Conv2D, Dropout, LeakyReLU, MaxPool2D, Model, ReLU, Softmax


class _Init:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def conv(self, cin, filters, kernel, stride=(1, 1), padding="valid") -> Conv2D:
        kh, kw = kernel
        # Uniform with unit variance gain so activations stay O(1) through the stack.
        limit = np.sqrt(3.0 / (kh * kw * cin))
        w = self.rng.uniform(-limit, limit, size=(kh, kw, cin, filters))
        b = self.rng.uniform(-0.1, 0.1, size=filters)
        return Conv2D(w, b, stride, padding)

    def batchnorm(self, channels, affine=True) -> BatchNorm:
        mu = self.rng.uniform(-0.2, 0.2, size=channels)
        sigma = self.rng.uniform(0.5, 2.0, size=channels)
        if not affine:
            return BatchNorm(mu, sigma)
        gamma = self.rng.uniform(0.5, 1.5, size=channels)
        beta = self.rng.uniform(-0.1, 0.1, size=channels)
        return BatchNorm(mu, sigma, gamma, beta)


def ball_net(seed: int = 0) -> Model:
    init = _Init(seed)
    layers = [
        init.conv(1, 8, (5, 5), (2, 2), "same"),
        ReLU(),
        MaxPool2D((2, 2), (2, 2)),
        init.conv(8, 12, (3, 3), padding="valid"),
        ReLU(),
        init.conv(12, 2, (2, 2), padding="valid"),
        Softmax(),
    ]
    return Model("ball", (16, 16, 1), layers)


def pedestrian_net(seed: int = 0) -> Model:
    init = _Init(seed)
    layers = [
        init.conv(1, 12, (3, 3), padding="same"),
        ReLU(),
        MaxPool2D((2, 2)),
        init.conv(12, 32, (3, 3), padding="same"),
        LeakyReLU(0.1),
        MaxPool2D((2, 2)),
        init.conv(32, 64, (3, 3), padding="same"),
        LeakyReLU(0.1),
        MaxPool2D((2, 2)),
        Dropout(0.3),
        init.conv(64, 2, (2, 4), padding="valid"),
        Softmax(),
    ]
    return Model("pedestrian", (18, 36, 1), layers)


def robot_net(seed: int = 0) -> Model:
    init = _Init(seed)
    layers = []
    cin = 3
    for filters, pool in ((8, True), (12, False), (8, True), (16, False), (20, False)):
        layers += [init.conv(cin, filters, (3, 3), padding="same"), init.batchnorm(filters)]
        layers.append(LeakyReLU(0.1))
        if pool:
            layers.append(MaxPool2D((2, 2)))
        cin = filters
    return Model("robot", (80, 60, 3), layers)


ARCHITECTURES = {"ball": ball_net, "pedestrian": pedestrian_net, "robot": robot_net}


def build(name: str, seed: int = 0) -> Model:
    try:
        return ARCHITECTURES[name](seed)
    except KeyError:
        raise KeyError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}") from None

"""Shared builders for in-memory networks and random layer stacks."""

import numpy as np
import pytest

from vidi.nn import LayerSpec, Network


def dense_layer(weight, bias=None):
    w = np.asarray(weight, dtype=np.float32)
    b = None if bias is None else np.asarray(bias, dtype=np.float32)
    return LayerSpec("dense", {"in_dim": w.shape[1], "out_dim": w.shape[0]}, w, b)


def conv_layer(weight, bias=None, stride=1, padding=0):
    w = np.asarray(weight, dtype=np.float32)
    b = None if bias is None else np.asarray(bias, dtype=np.float32)
    params = {"out_channels": w.shape[0], "kernel": [w.shape[2], w.shape[3]],
              "stride": stride, "padding": padding}
    return LayerSpec("conv2d", params, w, b)


def make_net(layers, input_shape, class_names):
    return Network(layers=tuple(layers), input_shape=tuple(input_shape),
                   class_names=tuple(class_names))


def linear_net(weight, bias=None, class_names=None):
    """Single dense layer network on flat input."""
    w = np.asarray(weight, dtype=np.float32)
    names = class_names or [f"c{i}" for i in range(w.shape[0])]
    return make_net([dense_layer(w, bias)], (w.shape[1],), names)


def random_network(rng: np.random.Generator, with_bias=True, max_blocks=2):
    """Random small conv/relu/maxpool stack ending in flatten + dense head.

    Input is (c, h, w) with h, w in [6, 12]; weights are O(1) normals.
    """
    c = int(rng.integers(1, 4))
    h = int(rng.integers(6, 13))
    w = int(rng.integers(6, 13))
    shape = (c, h, w)
    layers = []
    for _ in range(int(rng.integers(1, max_blocks + 1))):
        oc = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        pad = int(rng.integers(0, 2))
        if shape[1] + 2 * pad < k or shape[2] + 2 * pad < k:
            continue
        wgt = rng.standard_normal((oc, shape[0], k, k)).astype(np.float32)
        bias = rng.standard_normal(oc).astype(np.float32) if with_bias else None
        layers.append(conv_layer(wgt, bias, stride=1, padding=pad))
        shape = (oc, shape[1] + 2 * pad - k + 1, shape[2] + 2 * pad - k + 1)
        if rng.random() < 0.7:
            layers.append(LayerSpec("relu"))
        if rng.random() < 0.6 and shape[1] >= 2 and shape[2] >= 2:
            layers.append(LayerSpec("maxpool2d", {"window": 2, "stride": 2}))
            shape = (shape[0], (shape[1] - 2) // 2 + 1, (shape[2] - 2) // 2 + 1)
    layers.append(LayerSpec("flatten"))
    flat = int(np.prod(shape))
    hidden = int(rng.integers(2, 6))
    layers.append(dense_layer(rng.standard_normal((hidden, flat)).astype(np.float32) / np.sqrt(flat),
                              rng.standard_normal(hidden).astype(np.float32) if with_bias else None))
    layers.append(LayerSpec("relu"))
    n_classes = int(rng.integers(2, 4))
    layers.append(dense_layer(rng.standard_normal((n_classes, hidden)).astype(np.float32),
                              rng.standard_normal(n_classes).astype(np.float32) if with_bias else None))
    names = [f"c{i}" for i in range(n_classes)]
    return make_net(layers, (c, h, w), names)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)

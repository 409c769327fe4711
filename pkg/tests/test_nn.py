"""Inference engine: loader validation, forward semantics, predict, shape algebra."""

import json
import math

import numpy as np
import pytest

from vidi.errors import BlobSizeMismatch, ManifestParseError, ShapeMismatch
from vidi.nn import (
    LayerSpec,
    Network,
    forward,
    layer_output_shape,
    load_network,
    predict,
    save_network,
)

from conftest import conv_layer, dense_layer, linear_net, make_net, random_network


def write_model(tmp_path, manifest: dict, blob: np.ndarray):
    mpath = tmp_path / "model.json"
    bpath = tmp_path / "model.bin"
    mpath.write_text(json.dumps(manifest))
    np.asarray(blob, dtype="<f4").tofile(bpath)
    return mpath, bpath


def dense_manifest(in_dim=2, out_dim=2):
    return {
        "format_version": 1,
        "input_shape": [in_dim],
        "class_names": [f"c{i}" for i in range(out_dim)],
        "layers": [
            {"kind": "dense", "params": {"in_dim": in_dim, "out_dim": out_dim},
             "weight_offset": 0, "weight_len": in_dim * out_dim,
             "bias_offset": in_dim * out_dim, "bias_len": out_dim}
        ],
    }


class TestLoadNetwork:
    def test_smallest_valid_net(self, tmp_path):
        # dense(2->2): 4 weights + 2 biases = 6 float32 = 24 bytes
        blob = np.array([1, 0, 0, 1, 0, 0], dtype=np.float32)
        mpath, bpath = write_model(tmp_path, dense_manifest(), blob)
        assert bpath.stat().st_size == 24
        net = load_network(mpath, bpath)
        assert len(net.layers) == 1
        assert net.layers[0].kind == "dense"
        np.testing.assert_array_equal(net.layers[0].weight, [[1, 0], [0, 1]])

    def test_short_blob_rejected(self, tmp_path):
        # 20 bytes = 5 float32, manifest declares 6
        mpath, bpath = write_model(tmp_path, dense_manifest(), np.zeros(5, dtype=np.float32))
        assert bpath.stat().st_size == 20
        with pytest.raises(BlobSizeMismatch):
            load_network(mpath, bpath)

    def test_vgg_style_stack_accepts_224_input(self, tmp_path):
        # conv2d(3->8, 3x3, pad 1) - relu - maxpool(2x2) - flatten - dense
        conv_w, conv_b = 8 * 3 * 3 * 3, 8
        flat = 8 * 112 * 112
        dense_w, dense_b = 2 * flat, 2
        manifest = {
            "format_version": 1,
            "input_shape": [3, 224, 224],
            "class_names": ["covid", "normal"],
            "layers": [
                {"kind": "conv2d",
                 "params": {"out_channels": 8, "kernel": [3, 3], "stride": 1, "padding": 1},
                 "weight_offset": 0, "weight_len": conv_w,
                 "bias_offset": conv_w, "bias_len": conv_b},
                {"kind": "relu"},
                {"kind": "maxpool2d", "params": {"window": 2, "stride": 2}},
                {"kind": "flatten"},
                {"kind": "dense", "params": {"in_dim": flat, "out_dim": 2},
                 "weight_offset": conv_w + conv_b, "weight_len": dense_w,
                 "bias_offset": conv_w + conv_b + dense_w, "bias_len": dense_b},
            ],
        }
        total = conv_w + conv_b + dense_w + dense_b
        rng = np.random.default_rng(1)
        mpath, bpath = write_model(tmp_path, manifest,
                                   rng.standard_normal(total).astype(np.float32) * 0.01)
        net = load_network(mpath, bpath)
        assert net.input_shape == (3, 224, 224)
        trace = forward(net, rng.standard_normal((3, 224, 224)).astype(np.float32))
        assert trace.logits.shape == (2,)

    def test_declared_shape_inconsistency_rejected(self, tmp_path):
        manifest = dense_manifest()
        manifest["layers"][0]["weight_len"] = 3
        manifest["layers"][0]["bias_offset"] = 3
        manifest["layers"][0]["bias_len"] = 2
        mpath, bpath = write_model(tmp_path, manifest, np.zeros(5, dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            load_network(mpath, bpath)

    def test_garbage_manifest_rejected(self, tmp_path):
        mpath = tmp_path / "model.json"
        mpath.write_text("{not json")
        bpath = tmp_path / "model.bin"
        bpath.write_bytes(b"")
        with pytest.raises(ManifestParseError):
            load_network(mpath, bpath)

    def test_wrong_head_width_rejected(self, tmp_path):
        manifest = dense_manifest(out_dim=2)
        manifest["class_names"] = ["a", "b", "c"]
        mpath, bpath = write_model(tmp_path, manifest, np.zeros(6, dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            load_network(mpath, bpath)

    def test_weights_immutable_after_load(self, tmp_path):
        mpath, bpath = write_model(tmp_path, dense_manifest(), np.arange(6, dtype=np.float32))
        net = load_network(mpath, bpath)
        with pytest.raises(ValueError):
            net.layers[0].weight[0, 0] = 99.0

    def test_save_load_round_trip_bit_identical(self, tmp_path, rng):
        net = random_network(rng)
        save_network(net, tmp_path / "m.json", tmp_path / "m.bin")
        net2 = load_network(tmp_path / "m.json", tmp_path / "m.bin")
        assert net2.input_shape == net.input_shape
        assert net2.class_names == net.class_names
        assert len(net2.layers) == len(net.layers)
        for a, b in zip(net.layers, net2.layers):
            assert a.kind == b.kind
            if a.weight is not None:
                np.testing.assert_array_equal(a.weight, b.weight)
            if a.bias is not None:
                np.testing.assert_array_equal(a.bias, b.bias)
        x = rng.standard_normal(net.input_shape).astype(np.float32)
        np.testing.assert_array_equal(forward(net, x).logits, forward(net2, x).logits)


class TestForward:
    def test_dense_identity(self):
        net = linear_net([[1, 0], [0, 1]])
        trace = forward(net, np.array([1.0, 2.0], dtype=np.float32))
        np.testing.assert_array_equal(trace.logits, [1.0, 2.0])

    def test_relu_definition(self):
        net = make_net([LayerSpec("relu"), dense_layer(np.eye(3))], (3,), ["a", "b", "c"])
        trace = forward(net, np.array([-1.0, 0.0, 2.0], dtype=np.float32))
        np.testing.assert_array_equal(trace.outputs[0], [0.0, 0.0, 2.0])

    def test_conv_1x1_scalar_scaling(self):
        conv = conv_layer(np.full((1, 1, 1, 1), 2.0))
        layers = [conv, LayerSpec("flatten"), dense_layer(np.ones((1, 9)))]
        net = make_net(layers, (1, 3, 3), ["only"])
        trace = forward(net, np.ones((1, 3, 3), dtype=np.float32))
        np.testing.assert_array_equal(trace.outputs[0], np.full((1, 3, 3), 2.0))

    def test_trace_covers_every_layer_and_chains(self, rng):
        net = random_network(rng)
        x = rng.standard_normal(net.input_shape).astype(np.float32)
        trace = forward(net, x)
        assert len(trace.inputs) == len(trace.outputs) == len(net.layers)
        for i in range(1, len(net.layers)):
            np.testing.assert_array_equal(trace.outputs[i - 1], trace.inputs[i])

    def test_shape_mismatch_rejected(self):
        net = linear_net([[1, 0], [0, 1]])
        with pytest.raises(ShapeMismatch):
            forward(net, np.zeros(3, dtype=np.float32))

    def test_deterministic_bit_identical(self, rng):
        net = random_network(rng)
        x = rng.standard_normal(net.input_shape).astype(np.float32)
        a = forward(net, x)
        b = forward(net, x)
        for t1, t2 in zip(a.outputs, b.outputs):
            np.testing.assert_array_equal(t1, t2)

    def test_linearity_of_bias_free_networks(self):
        # relu and maxpool are positively homogeneous, conv/dense linear
        rng = np.random.default_rng(7)
        for _ in range(20):
            net = random_network(rng, with_bias=False)
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            a = np.float32(rng.uniform(0.5, 2.0))
            lhs = forward(net, a * x).logits
            rhs = a * forward(net, x).logits
            np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-6)

    def test_shape_algebra_matches_computed_shapes(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            net = random_network(rng)
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            trace = forward(net, x)
            shape = net.input_shape
            for layer, out in zip(net.layers, trace.outputs):
                shape = layer_output_shape(layer, shape)
                assert out.shape == shape


class TestPredict:
    def test_symmetric_logits_tie_break(self):
        net = linear_net(np.zeros((2, 2)))
        cls, probs = predict(net, np.array([3.0, -1.0], dtype=np.float32))
        np.testing.assert_allclose(probs, [0.5, 0.5])
        assert cls == 0

    def test_softmax_asymptote(self):
        net = linear_net(np.eye(2) * 10)
        cls, probs = predict(net, np.array([1.0, 0.0], dtype=np.float32))
        assert cls == 0
        assert probs[0] > 0.9999

    def test_softmax_derived_values(self):
        # independent float64 oracle for logits (1, 1, 4)
        logits = [1.0, 1.0, 4.0]
        denom = sum(math.exp(v) for v in logits)
        expected = [math.exp(v) / denom for v in logits]
        np.testing.assert_allclose(expected, [0.0452785, 0.0452785, 0.9094430], atol=1e-7)
        net = linear_net(np.eye(3))
        cls, probs = predict(net, np.array(logits, dtype=np.float32))
        np.testing.assert_allclose(probs, expected, atol=1e-7)
        assert cls == 2

    def test_probability_simplex(self, rng):
        for _ in range(50):
            net = random_network(rng)
            x = rng.standard_normal(net.input_shape).astype(np.float32)
            _, probs = predict(net, x)
            assert (probs >= 0).all()
            assert abs(probs.sum() - 1.0) <= 1e-6

"""Dense-tensor arithmetic and feed-forward inference for small VGG-style CNNs.

Tensors are numpy float32 arrays (row-major); per-layer accumulations run in
float64 and are rounded back to float32, which keeps summation checks stable.
A forward pass retains every layer's input and output so attribution can walk
the network backwards without recomputing anything.

Supported layer kinds: conv2d (zero padding), relu, maxpool2d (max, no
padding, row-major first-maximum tie-break), flatten, dense.

Weight file format
------------------
``model.json`` manifest::

    {
      "format_version": 1,
      "input_shape": [3, 224, 224],
      "class_names": ["covid", "normal"],
      "layers": [
        {"kind": "conv2d", "params": {"out_channels": 8, "kernel": [3, 3],
                                      "stride": 1, "padding": 1},
         "weight_offset": 0, "weight_len": 216,
         "bias_offset": 216, "bias_len": 8},
        {"kind": "relu"},
        ...
      ]
    }

Offsets count float32 elements into ``model.bin`` (raw little-endian
float32, row-major). Conv kernels are stored ``[out_ch][in_ch][kh][kw]``,
dense weights ``[out][in]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BlobSizeMismatch,
    ManifestParseError,
    NonFiniteActivation,
    ShapeMismatch,
)

FORMAT_VERSION = 1
LAYER_KINDS = ("conv2d", "relu", "maxpool2d", "flatten", "dense")


def as_tensor(values, shape=None) -> np.ndarray:
    """Coerce to a float32 tensor, optionally reshaped."""
    t = np.asarray(values, dtype=np.float32)
    if shape is not None:
        t = t.reshape(shape)
    return t


def check_finite(t: np.ndarray, context: str = "tensor") -> np.ndarray:
    if not np.isfinite(t).all():
        raise NonFiniteActivation(f"non-finite values in {context}")
    return t


def _pair(v, name: str) -> tuple[int, int]:
    """Accept an int or a [h, w] pair; return (h, w)."""
    if isinstance(v, int):
        if v < 1:
            raise ManifestParseError(f"{name} must be positive, got {v}")
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, int) for x in v):
        if min(v) < 1:
            raise ManifestParseError(f"{name} must be positive, got {v}")
        return (int(v[0]), int(v[1]))
    raise ManifestParseError(f"{name} must be an int or [h, w] pair, got {v!r}")


def _pad_pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, int):
        if v < 0:
            raise ManifestParseError(f"{name} must be non-negative, got {v}")
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(x, int) for x in v):
        if min(v) < 0:
            raise ManifestParseError(f"{name} must be non-negative, got {v}")
        return (int(v[0]), int(v[1]))
    raise ManifestParseError(f"{name} must be an int or [h, w] pair, got {v!r}")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind, kind-specific params, and bound weights (if any)."""

    kind: str
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ManifestParseError(f"unknown layer kind {self.kind!r}")
        if self.weight is not None:
            self.weight.setflags(write=False)
        if self.bias is not None:
            self.bias.setflags(write=False)


@dataclass(frozen=True)
class Network:
    """Ordered layer stack with a declared input shape and class labels.

    Immutable after construction; safe to share across threads.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    class_names: tuple[str, ...]

    def __post_init__(self):
        out_shape = self.input_shape
        for i, layer in enumerate(self.layers):
            out_shape = layer_output_shape(layer, out_shape, index=i)
        if out_shape != (len(self.class_names),):
            raise ShapeMismatch(
                f"final layer produces shape {out_shape}, expected "
                f"({len(self.class_names)},) to match class_names"
            )

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class ActivationTrace:
    """Per-layer inputs and outputs of one forward pass.

    ``inputs[i]`` is what layer i consumed and equals ``outputs[i-1]``;
    ``outputs[-1]`` is the pre-softmax logit vector.
    """

    inputs: list[np.ndarray]
    outputs: list[np.ndarray]

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]


# --- shape algebra ---

def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, ...], index: int = -1) -> tuple[int, ...]:
    """Output shape of ``layer`` on ``in_shape``; raises ShapeMismatch if incompatible."""
    where = f"layer {index} ({layer.kind})"
    p = layer.params
    if layer.kind == "relu":
        return in_shape
    if layer.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if layer.kind == "dense":
        if len(in_shape) != 1:
            raise ShapeMismatch(f"{where}: dense expects a flat input, got {in_shape}")
        if in_shape[0] != p["in_dim"]:
            raise ShapeMismatch(f"{where}: expects in_dim {p['in_dim']}, got {in_shape[0]}")
        return (p["out_dim"],)
    if len(in_shape) != 3:
        raise ShapeMismatch(f"{where}: expects (channels, h, w) input, got {in_shape}")
    c, h, w = in_shape
    if layer.kind == "conv2d":
        kh, kw = _pair(p["kernel"], "kernel")
        sh, sw = _pair(p.get("stride", 1), "stride")
        ph, pw = _pad_pair(p.get("padding", 0), "padding")
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeMismatch(f"{where}: kernel {kh}x{kw} larger than padded input {in_shape}")
        return (p["out_channels"], oh, ow)
    if layer.kind == "maxpool2d":
        wh, ww = _pair(p["window"], "window")
        sh, sw = _pair(p.get("stride", p["window"]), "stride")
        if h < wh or w < ww:
            raise ShapeMismatch(f"{where}: window {wh}x{ww} larger than input {in_shape}")
        oh = (h - wh) // sh + 1
        ow = (w - ww) // sw + 1
        return (c, oh, ow)
    raise ManifestParseError(f"unknown layer kind {layer.kind!r}")


def conv2d_weight_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, int, int, int]:
    kh, kw = _pair(layer.params["kernel"], "kernel")
    return (layer.params["out_channels"], in_shape[0], kh, kw)


# --- layer kernels (shared with the attribution backward pass) ---

def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    """Cross-correlation with zero padding; float64 accumulation."""
    oc, ic, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::sh, ::sw]                      # (ic, oh, ow, kh, kw)
    _, oh, ow, _, _ = win.shape
    col = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, ic * kh * kw)
    out = col.astype(np.float64) @ weight.reshape(oc, -1).astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out.T.reshape(oc, oh, ow).astype(np.float32)


def conv2d_backward_input(m_out: np.ndarray, weight: np.ndarray, in_shape: tuple[int, ...],
                          stride: tuple[int, int], padding: tuple[int, int]) -> np.ndarray:
    """Adjoint of conv2d_forward w.r.t. its input (float64).

    Propagates output-side multipliers back to input positions, the linear
    rule for convolutional layers.
    """
    oc, ic, kh, kw = weight.shape
    sh, sw = stride
    ph, pw = padding
    c, h, w = in_shape
    _, oh, ow = m_out.shape
    g = m_out.reshape(oc, -1).astype(np.float64)
    colgrad = weight.reshape(oc, -1).astype(np.float64).T @ g   # (ic*kh*kw, oh*ow)
    colgrad = colgrad.reshape(ic, kh, kw, oh, ow)
    grad_pad = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            grad_pad[:, i:i + sh * oh:sh, j:j + sw * ow:sw] += colgrad[:, i, j]
    return grad_pad[:, ph:ph + h, pw:pw + w]


def maxpool2d_forward(x: np.ndarray, window: tuple[int, int],
                      stride: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; returns (output, argmax) with argmax the flat within-window
    index of the first (row-major) maximal element."""
    wh, ww = window
    sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(x, (wh, ww), axis=(1, 2))
    win = win[:, ::sh, ::sw]                      # (c, oh, ow, wh, ww)
    flat = win.reshape(win.shape[:3] + (wh * ww,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out.astype(np.float32), arg


def maxpool2d_scatter(values: np.ndarray, arg: np.ndarray, in_shape: tuple[int, ...],
                      window: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    """Scatter one value per pooling window onto its argmax input position.

    Overlapping windows accumulate. ``values`` and ``arg`` are shaped like the
    pooled output.
    """
    wh, ww = window
    sh, sw = stride
    c, h, w = in_shape
    _, oh, ow = values.shape
    ci, oi, oj = np.indices(values.shape)
    ii = oi * sh + arg // ww
    jj = oj * sw + arg % ww
    out = np.zeros(in_shape, dtype=np.float64)
    np.add.at(out, (ci.ravel(), ii.ravel(), jj.ravel()), values.ravel())
    return out


def apply_layer(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "relu":
        return np.maximum(x, 0)
    if layer.kind == "flatten":
        return x.reshape(-1)
    if layer.kind == "dense":
        out = layer.weight.astype(np.float64) @ x.astype(np.float64)
        if layer.bias is not None:
            out += layer.bias.astype(np.float64)
        return out.astype(np.float32)
    if layer.kind == "conv2d":
        p = layer.params
        return conv2d_forward(x, layer.weight, layer.bias,
                              _pair(p.get("stride", 1), "stride"),
                              _pad_pair(p.get("padding", 0), "padding"))
    if layer.kind == "maxpool2d":
        p = layer.params
        out, _ = maxpool2d_forward(x, _pair(p["window"], "window"),
                                   _pair(p.get("stride", p["window"]), "stride"))
        return out
    raise ManifestParseError(f"unknown layer kind {layer.kind!r}")


# --- operations ---

def forward(net: Network, input: np.ndarray) -> ActivationTrace:
    """Run the network on one input, retaining every layer's input and output.

    Raises ShapeMismatch if the input shape differs from ``net.input_shape``
    and NonFiniteActivation if any layer produces NaN/Inf.
    """
    x = np.asarray(input, dtype=np.float32)
    if x.shape != net.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} != network input shape {net.input_shape}")
    check_finite(x, "network input")
    inputs, outputs = [], []
    for i, layer in enumerate(net.layers):
        inputs.append(x)
        x = apply_layer(layer, x)
        check_finite(x, f"output of layer {i} ({layer.kind})")
        outputs.append(x)
    return ActivationTrace(inputs=inputs, outputs=outputs)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def predict(net: Network, input: np.ndarray) -> tuple[int, np.ndarray]:
    """Class index (argmax, lowest-index tie-break) and softmax probabilities."""
    logits = forward(net, input).logits
    probs = softmax(logits)
    return int(np.argmax(probs)), probs


# --- manifest / blob I/O ---

def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ManifestParseError(f"{where}: missing required field {key!r}")
    return d[key]


def load_network(manifest_path, blob_path) -> Network:
    """Load a network from a JSON manifest plus raw float32 weight blob.

    Validates declared shapes against the implied layer stack; a blob whose
    element count differs from the declared total is rejected.
    """
    manifest_path = Path(manifest_path)
    blob_path = Path(blob_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestParseError(f"cannot read manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise ManifestParseError("manifest root must be a JSON object")
    version = _require(manifest, "format_version", "manifest")
    if version != FORMAT_VERSION:
        raise ManifestParseError(f"unsupported format_version {version}")
    input_shape = tuple(_require(manifest, "input_shape", "manifest"))
    if not input_shape or not all(isinstance(d, int) and d > 0 for d in input_shape):
        raise ManifestParseError(f"input_shape must be positive ints, got {input_shape}")
    class_names = tuple(_require(manifest, "class_names", "manifest"))
    if not class_names or not all(isinstance(c, str) for c in class_names):
        raise ManifestParseError("class_names must be a non-empty list of strings")
    layer_entries = _require(manifest, "layers", "manifest")
    if not isinstance(layer_entries, list) or not layer_entries:
        raise ManifestParseError("layers must be a non-empty list")

    try:
        blob = np.fromfile(blob_path, dtype="<f4")
    except OSError as e:
        raise ManifestParseError(f"cannot read blob {blob_path}: {e}") from e

    declared = 0
    for i, entry in enumerate(layer_entries):
        declared += int(entry.get("weight_len", 0)) + int(entry.get("bias_len", 0))
    if declared != blob.size:
        raise BlobSizeMismatch(
            f"blob holds {blob.size} float32 values ({blob.size * 4} bytes), "
            f"manifest declares {declared} ({declared * 4} bytes)"
        )

    def slice_blob(entry: dict, prefix: str, i: int) -> np.ndarray | None:
        n = int(entry.get(f"{prefix}_len", 0))
        if n == 0:
            return None
        off = int(entry.get(f"{prefix}_offset", -1))
        if off < 0 or off + n > blob.size:
            raise BlobSizeMismatch(f"layer {i}: {prefix} range [{off}, {off + n}) outside blob")
        return blob[off:off + n].copy()

    layers = []
    shape = input_shape
    for i, entry in enumerate(layer_entries):
        kind = _require(entry, "kind", f"layer {i}")
        params = dict(entry.get("params", {}))
        w_flat = slice_blob(entry, "weight", i)
        b_flat = slice_blob(entry, "bias", i)
        if kind == "conv2d":
            for key in ("out_channels", "kernel"):
                _require(params, key, f"layer {i} (conv2d) params")
            spec = LayerSpec(kind, params)
            wshape = conv2d_weight_shape(spec, shape)
            if w_flat is None or w_flat.size != int(np.prod(wshape)):
                raise ShapeMismatch(
                    f"layer {i} (conv2d): weight_len "
                    f"{0 if w_flat is None else w_flat.size} != required {np.prod(wshape)} "
                    f"for kernel shape {wshape}"
                )
            bias = None
            if b_flat is not None:
                if b_flat.size != params["out_channels"]:
                    raise ShapeMismatch(f"layer {i} (conv2d): bias_len != out_channels")
                bias = b_flat
            spec = LayerSpec(kind, params, w_flat.reshape(wshape), bias)
        elif kind == "dense":
            for key in ("in_dim", "out_dim"):
                _require(params, key, f"layer {i} (dense) params")
            n_in, n_out = params["in_dim"], params["out_dim"]
            if w_flat is None or w_flat.size != n_in * n_out:
                raise ShapeMismatch(
                    f"layer {i} (dense): weight_len "
                    f"{0 if w_flat is None else w_flat.size} != in_dim*out_dim {n_in * n_out}"
                )
            bias = None
            if b_flat is not None:
                if b_flat.size != n_out:
                    raise ShapeMismatch(f"layer {i} (dense): bias_len != out_dim")
                bias = b_flat
            spec = LayerSpec(kind, params, w_flat.reshape(n_out, n_in), bias)
        elif kind in ("relu", "flatten", "maxpool2d"):
            if kind == "maxpool2d":
                _require(params, "window", f"layer {i} (maxpool2d) params")
            if w_flat is not None or b_flat is not None:
                raise ShapeMismatch(f"layer {i} ({kind}): takes no weights")
            spec = LayerSpec(kind, params)
        else:
            raise ManifestParseError(f"layer {i}: unknown kind {kind!r}")
        shape = layer_output_shape(spec, shape, index=i)
        layers.append(spec)

    return Network(layers=tuple(layers), input_shape=input_shape, class_names=class_names)


def save_network(net: Network, manifest_path, blob_path) -> None:
    """Write a network back out as manifest + blob (inverse of load_network)."""
    entries = []
    parts = []
    offset = 0
    for layer in net.layers:
        entry: dict = {"kind": layer.kind}
        if layer.params:
            entry["params"] = layer.params
        if layer.weight is not None:
            n = int(layer.weight.size)
            entry["weight_offset"], entry["weight_len"] = offset, n
            parts.append(np.ascontiguousarray(layer.weight, dtype="<f4").reshape(-1))
            offset += n
        if layer.bias is not None:
            n = int(layer.bias.size)
            entry["bias_offset"], entry["bias_len"] = offset, n
            parts.append(np.ascontiguousarray(layer.bias, dtype="<f4").reshape(-1))
            offset += n
        entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "class_names": list(net.class_names),
        "layers": entries,
    }
    Path(manifest_path).write_text(json.dumps(manifest, indent=2))
    blob = np.concatenate(parts) if parts else np.zeros(0, dtype="<f4")
    blob.astype("<f4").tofile(blob_path)

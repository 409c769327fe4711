"""Difference-from-reference attribution for the networks in :mod:`vidi.nn`.

Contribution scores are backpropagated multipliers: starting from a one-hot
vector on the target logit, each layer converts output-side multipliers into
input-side ones, and the per-element contribution is multiplier times the
input's difference from the baseline. Linear layers (dense, conv) propagate
through their transpose; nonlinearities use the rescale rule

    m = delta_out / delta_in

falling back to the local gradient where |delta_in| < 1e-7. Maxpool routes
each window's multiplier onto window maxima (first row-major): the gain
share of the output delta goes to the actual input's argmax, the loss share
to the baseline's argmax, each rescaled by the input delta at its routed
position so the summation-to-delta contract survives pooling.

The resulting maps satisfy sum(contributions) == logit(x) - logit(baseline)
up to float32 rounding. Multi-baseline attribution averages per-baseline
maps elementwise, Shapley-style.

All functions are pure; attribution of distinct images/baselines can run in
parallel over an immutable Network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ClassIndexOutOfRange, EmptyBaselineSet, ShapeMismatch
from .nn import (
    ActivationTrace,
    Network,
    _pair,
    _pad_pair,
    check_finite,
    conv2d_backward_input,
    forward,
    maxpool2d_scatter,
)

# below this input delta the rescale ratio is replaced by the local gradient
DELTA_EPS = 1e-7


@dataclass(frozen=True)
class Baseline:
    """Reference input anchoring the difference-from-reference attribution."""

    reference: np.ndarray

    def __post_init__(self):
        check_finite(self.reference, "baseline reference")

    @staticmethod
    def zeros(net: Network) -> "Baseline":
        return Baseline(np.zeros(net.input_shape, dtype=np.float32))


@dataclass
class AttributionMap:
    """Signed per-element contributions toward one class's logit.

    ``contributions`` is shaped like the network input; its sum matches
    ``delta_t`` (target logit minus baseline logit) within float tolerance.
    """

    image_id: str
    target_class: int
    contributions: np.ndarray
    delta_t: float
    baseline_count: int


@dataclass
class SaliencyPair:
    """Exact sign split of a contribution map.

    ``favorable`` keeps the positive part (regions pushing toward the class),
    ``glum`` the negative part; favorable + glum reconstructs the map.
    """

    favorable: np.ndarray
    glum: np.ndarray


def _layer_multiplier_step(layer, x_in, b_in, x_out, b_out, m_out):
    """Convert output-side multipliers of one layer into input-side ones."""
    kind = layer.kind
    if kind == "dense":
        return layer.weight.astype(np.float64).T @ m_out
    if kind == "flatten":
        return m_out.reshape(x_in.shape)
    if kind == "relu":
        dx = x_in.astype(np.float64) - b_in.astype(np.float64)
        dy = x_out.astype(np.float64) - b_out.astype(np.float64)
        grad = (x_in > 0).astype(np.float64)
        ratio = np.where(np.abs(dx) < DELTA_EPS, grad, dy / np.where(np.abs(dx) < DELTA_EPS, 1.0, dx))
        return m_out * ratio
    if kind == "conv2d":
        p = layer.params
        return conv2d_backward_input(m_out, layer.weight, x_in.shape,
                                     _pair(p.get("stride", 1), "stride"),
                                     _pad_pair(p.get("padding", 0), "padding"))
    if kind == "maxpool2d":
        p = layer.params
        window = _pair(p["window"], "window")
        stride = _pair(p.get("stride", p["window"]), "stride")
        return _maxpool_multipliers(x_in, b_in, x_out, b_out, m_out, window, stride)
    raise ShapeMismatch(f"no multiplier rule for layer kind {kind!r}")


def _window_argmax(t: np.ndarray, window, stride):
    """Per-window values and first-row-major argmax index."""
    wh, ww = window
    sh, sw = stride
    win = np.lib.stride_tricks.sliding_window_view(t, (wh, ww), axis=(1, 2))[:, ::sh, ::sw]
    flat = win.reshape(win.shape[:3] + (wh * ww,))
    arg = flat.argmax(axis=-1)
    return flat, arg


def _maxpool_multipliers(x_in, b_in, x_out, b_out, m_out, window, stride):
    """Cross-max routing of pooled multipliers onto window maxima.

    The window's output delta splits into a gain share max(dy, 0) routed to
    the actual input's argmax and a loss share min(dy, 0) routed to the
    baseline's argmax; each share divided by the input delta at its routed
    position gives that position's multiplier. The split is what keeps
    summation-to-delta exact even when the window winner flips between input
    and baseline (single-sided argmax routing provably cannot).
    """
    flat_x, arg_x = _window_argmax(x_in, window, stride)
    flat_b, arg_b = _window_argmax(b_in, window, stride)
    y_x = x_out.astype(np.float64)
    y_b = b_out.astype(np.float64)
    cross = np.maximum(y_x, y_b)

    def routed_multiplier(mass, arg):
        x_at = np.take_along_axis(flat_x, arg[..., None], axis=-1)[..., 0].astype(np.float64)
        b_at = np.take_along_axis(flat_b, arg[..., None], axis=-1)[..., 0].astype(np.float64)
        dx = x_at - b_at
        small = np.abs(dx) < DELTA_EPS
        return np.where(small, 0.0, mass / np.where(small, 1.0, dx))

    m_in = maxpool2d_scatter(routed_multiplier(m_out * (cross - y_b), arg_x),
                             arg_x, x_in.shape, window, stride)
    m_in += maxpool2d_scatter(routed_multiplier(m_out * (y_x - cross), arg_b),
                              arg_b, x_in.shape, window, stride)
    return m_in


def _input_multipliers(net: Network, trace_x: ActivationTrace, trace_b: ActivationTrace,
                       target_class: int) -> np.ndarray:
    """Backpropagate multipliers from the target logit to the input (float64)."""
    m = np.zeros(net.n_classes, dtype=np.float64)
    m[target_class] = 1.0
    for i in range(len(net.layers) - 1, -1, -1):
        m = _layer_multiplier_step(net.layers[i], trace_x.inputs[i], trace_b.inputs[i],
                                   trace_x.outputs[i], trace_b.outputs[i], m)
    return m


def _map_from_traces(net, trace_x, trace_b, target_class, image_id) -> AttributionMap:
    m = _input_multipliers(net, trace_x, trace_b, target_class)
    dx = trace_x.inputs[0].astype(np.float64) - trace_b.inputs[0].astype(np.float64)
    contributions = (m * dx).astype(np.float32)
    check_finite(contributions, "attribution map")
    delta_t = float(trace_x.logits[target_class]) - float(trace_b.logits[target_class])
    return AttributionMap(image_id=image_id, target_class=target_class,
                          contributions=contributions, delta_t=delta_t, baseline_count=1)


def _check_target(net: Network, target_class: int):
    if not 0 <= target_class < net.n_classes:
        raise ClassIndexOutOfRange(
            f"target_class {target_class} outside [0, {net.n_classes})")


def _check_input(net: Network, t: np.ndarray, what: str):
    if tuple(t.shape) != net.input_shape:
        raise ShapeMismatch(f"{what} shape {t.shape} != network input shape {net.input_shape}")


def deeplift(net: Network, input: np.ndarray, baseline: Baseline, target_class: int,
             image_id: str = "") -> AttributionMap:
    """Single-baseline contribution map for one class's logit."""
    _check_target(net, target_class)
    _check_input(net, input, "input")
    _check_input(net, baseline.reference, "baseline")
    trace_x = forward(net, input)
    trace_b = forward(net, baseline.reference)
    return _map_from_traces(net, trace_x, trace_b, target_class, image_id)


def _average_maps(maps: list[AttributionMap]) -> AttributionMap:
    stack = np.stack([m.contributions.astype(np.float64) for m in maps])
    mean = stack.mean(axis=0).astype(np.float32)
    return AttributionMap(
        image_id=maps[0].image_id,
        target_class=maps[0].target_class,
        contributions=mean,
        delta_t=float(np.mean([m.delta_t for m in maps])),
        baseline_count=len(maps),
    )


def deepshap(net: Network, input: np.ndarray, baselines: list[Baseline], target_class: int,
             image_id: str = "") -> AttributionMap:
    """Elementwise mean of single-baseline maps over a background set."""
    if not baselines:
        raise EmptyBaselineSet("deepshap requires at least one baseline")
    per = [deeplift(net, input, b, target_class, image_id) for b in baselines]
    return _average_maps(per)


def attribute_all_classes(net: Network, input: np.ndarray, baselines: list[Baseline],
                          image_id: str = "") -> list[AttributionMap]:
    """One averaged map per class, forwarding each input/baseline exactly once."""
    if not baselines:
        raise EmptyBaselineSet("attribution requires at least one baseline")
    _check_input(net, input, "input")
    for b in baselines:
        _check_input(net, b.reference, "baseline")
    trace_x = forward(net, input)
    traces_b = [forward(net, b.reference) for b in baselines]
    out = []
    for cls in range(net.n_classes):
        per = [_map_from_traces(net, trace_x, tb, cls, image_id) for tb in traces_b]
        out.append(_average_maps(per))
    return out


def split_saliency(map: AttributionMap) -> SaliencyPair:
    """Exact positive/negative decomposition of a contribution map."""
    c = map.contributions
    return SaliencyPair(favorable=np.maximum(c, 0), glum=np.minimum(c, 0))

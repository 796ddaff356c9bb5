"""Layer DAG of the segmentation network: construction, static shape
inference, parameter accounting, and forward/backward execution.

The canonical network is a three-branch encoder-decoder: a pivotal 3x3
path plus complementary 5x5 and 9x9 branches whose feature maps are fused
back in by channel concatenation, four transposed-convolution upsampling
stages, batch norm and dropout before a 1x1 sigmoid output conv.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import (
    INFER,
    TRAIN,
    BatchNormState,
    ConvSpec,
    TransposeConvSpec,
    batchnorm_backward,
    batchnorm_forward,
    concat_backward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    convT2d_backward,
    convT2d_forward,
    dropout,
    dropout_backward,
    relu,
    sigmoid,
    sigmoid_backward,
)

KINDS = ("input", "conv", "convT", "concat", "batchnorm", "dropout")
ACTIVATIONS = ("none", "relu", "sigmoid")


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer DAG; ``inputs`` lists producer layer ids."""

    id: int
    kind: str
    inputs: tuple[int, ...] = ()
    kernel: int | None = None
    stride: int | None = None
    out_channels: int | None = None
    activation: str = "none"
    rate: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.kind in ("conv", "convT"):
            if len(self.inputs) != 1:
                raise ShapeError(f"layer {self.id}: conv layers take exactly one input")
            if self.kernel is None or self.stride is None or self.out_channels is None:
                raise ShapeError(f"layer {self.id}: conv layers need kernel/stride/channels")
        if self.kind == "input" and self.inputs:
            raise ShapeError(f"layer {self.id}: input layers take no inputs")
        if self.kind in ("concat", "batchnorm", "dropout") and not self.inputs:
            raise ShapeError(f"layer {self.id}: {self.kind} needs at least one input")
        if self.kind == "dropout" and (self.rate is None or not 0 <= self.rate < 1):
            raise ShapeError(f"layer {self.id}: dropout rate must be in [0, 1)")


class ModelGraph:
    """Immutable layer table plus mutable named parameters.

    Layers must be listed so that every input id refers to an earlier row,
    which makes list order a valid execution order.
    """

    def __init__(self, layers, in_channels: int = 3, input_divisor: int = 1,
                 bn_momentum: float = 0.99):
        self.layers = list(layers)
        self.in_channels = in_channels
        self.input_divisor = input_divisor
        self.bn_momentum = bn_momentum
        self.by_id = {}
        for layer in self.layers:
            if layer.id in self.by_id:
                raise ShapeError(f"duplicate layer id {layer.id}")
            for src in layer.inputs:
                if src not in self.by_id:
                    raise ShapeError(
                        f"layer {layer.id} references {src}, which is not defined earlier"
                    )
            self.by_id[layer.id] = layer
        self.channels = self._infer_channels()
        self.params: dict[int, dict[str, np.ndarray]] = {}
        self.bn_states: dict[int, BatchNormState] = {}

    def _infer_channels(self) -> dict[int, int]:
        channels = {}
        for layer in self.layers:
            if layer.kind == "input":
                channels[layer.id] = self.in_channels
            elif layer.kind in ("conv", "convT"):
                channels[layer.id] = layer.out_channels
            elif layer.kind == "concat":
                channels[layer.id] = sum(channels[i] for i in layer.inputs)
            else:
                channels[layer.id] = channels[layer.inputs[0]]
        return channels

    def conv_spec(self, layer: LayerSpec):
        cin = self.channels[layer.inputs[0]]
        if layer.kind == "conv":
            return ConvSpec(layer.kernel, layer.stride, cin, layer.out_channels)
        return TransposeConvSpec(layer.kernel, layer.stride, cin, layer.out_channels)

    def initialize_parameters(self, rng, dtype=np.float32) -> None:
        """Fan-in scaled uniform weights, zero biases, identity batch norm.

        Draws happen in ascending layer order so a fixed seed reproduces the
        exact same parameters.
        """
        self.params.clear()
        self.bn_states.clear()
        for layer in self.layers:
            if layer.kind in ("conv", "convT"):
                spec = self.conv_spec(layer)
                fan_in = spec.in_channels * layer.kernel * layer.kernel
                limit = math.sqrt(6.0 / fan_in)
                weight = rng.uniform(-limit, limit, size=spec.weight_shape())
                self.params[layer.id] = {
                    "weight": weight.astype(dtype),
                    "bias": np.zeros(layer.out_channels, dtype=dtype),
                }
            elif layer.kind == "batchnorm":
                self.bn_states[layer.id] = BatchNormState.create(
                    self.channels[layer.id], momentum=self.bn_momentum, dtype=dtype
                )

    def parameter_items(self):
        """Yield (layer_id, name, array) for every trainable tensor, in the
        canonical order used by the optimizer and checkpoints."""
        for layer in self.layers:
            if layer.kind in ("conv", "convT"):
                p = self.params[layer.id]
                yield layer.id, "weight", p["weight"]
                yield layer.id, "bias", p["bias"]
            elif layer.kind == "batchnorm":
                st = self.bn_states[layer.id]
                yield layer.id, "gamma", st.gamma
                yield layer.id, "beta", st.beta

    def fingerprint(self) -> int:
        """Architecture hash; identical tables give identical fingerprints
        regardless of the parameter values."""
        from .io import checksum64

        rows = [f"in:{self.in_channels}:div:{self.input_divisor}"]
        for l in self.layers:
            rows.append(
                f"{l.id}:{l.kind}:k{l.kernel}:s{l.stride}:c{l.out_channels}"
                f":a{l.activation}:r{l.rate}:{','.join(map(str, l.inputs))}"
            )
        return checksum64("|".join(rows).encode())


def build_mvfcn(in_channels: int = 3, dropout_rate: float = 0.3,
                bn_momentum: float = 0.99) -> ModelGraph:
    """Construct the canonical 32-layer multi-view network.

    Inception head with 3/5/9 kernels at stride 1, subsampling convs at
    stride k-1, channel-concat skip connections, four 2x upsampling stages,
    and a batch-norm / 128-channel conv / dropout / 1x1 sigmoid head.
    """
    L = LayerSpec
    layers = [
        L(1, "input"),
        L(2, "conv", (1,), 3, 1, 16, "relu"),
        L(3, "conv", (1,), 5, 1, 16, "relu"),
        L(4, "conv", (1,), 9, 1, 16, "relu"),
        L(5, "conv", (2,), 3, 2, 16, "relu"),
        L(6, "conv", (5,), 3, 2, 32, "relu"),
        L(7, "conv", (3,), 5, 4, 32, "relu"),
        L(8, "concat", (6, 7)),
        L(9, "conv", (8,), 3, 2, 32, "relu"),
        L(10, "conv", (7,), 3, 2, 32, "relu"),
        L(11, "conv", (4,), 9, 8, 32, "relu"),
        L(12, "concat", (9, 10, 11)),
        L(13, "conv", (12,), 3, 2, 32, "relu"),
        L(14, "conv", (7,), 5, 4, 32, "relu"),
        L(15, "conv", (11,), 3, 2, 32, "relu"),
        L(16, "concat", (13, 14, 15)),
        L(17, "conv", (16,), 3, 1, 64, "relu"),
        L(18, "convT", (17,), 3, 2, 64),
        L(19, "concat", (18, 12)),
        L(20, "conv", (19,), 3, 1, 32, "relu"),
        L(21, "convT", (20,), 3, 2, 32),
        L(22, "concat", (21, 8)),
        L(23, "conv", (22,), 3, 1, 32, "relu"),
        L(24, "convT", (23,), 3, 2, 16),
        L(25, "concat", (24, 5)),
        L(26, "conv", (25,), 3, 1, 32, "relu"),
        L(27, "convT", (26,), 3, 2, 64),
        L(28, "concat", (27, 2, 3, 4)),
        L(29, "batchnorm", (28,)),
        L(30, "conv", (29,), 3, 1, 128, "relu"),
        L(31, "dropout", (30,), rate=dropout_rate),
        L(32, "conv", (31,), 1, 1, 1, "sigmoid"),
    ]
    return ModelGraph(layers, in_channels=in_channels, input_divisor=16,
                      bn_momentum=bn_momentum)


def infer_shapes(graph: ModelGraph, input_shape) -> dict[int, tuple[int, int, int]]:
    """Static per-layer output shapes (c, h, w) for a symbolic batch.

    Fails fast on channel mismatches, concat spatial disagreements, or an
    input size the upsampling stages cannot reproduce exactly.
    """
    c, h, w = input_shape
    if c != graph.in_channels:
        raise ShapeError(f"input has {c} channels, graph expects {graph.in_channels}")
    d = graph.input_divisor
    if h % d or w % d:
        raise ShapeError(f"input size {h}x{w} is not divisible by {d}")
    shapes: dict[int, tuple[int, int, int]] = {}
    for layer in graph.layers:
        if layer.kind == "input":
            shapes[layer.id] = (c, h, w)
        elif layer.kind == "conv":
            _, ih, iw = shapes[layer.inputs[0]]
            spec = graph.conv_spec(layer)
            oh, ow = spec.output_hw(ih, iw)
            shapes[layer.id] = (layer.out_channels, oh, ow)
        elif layer.kind == "convT":
            _, ih, iw = shapes[layer.inputs[0]]
            shapes[layer.id] = (layer.out_channels, layer.stride * ih, layer.stride * iw)
        elif layer.kind == "concat":
            parts = [shapes[i] for i in layer.inputs]
            hw = {p[1:] for p in parts}
            if len(hw) != 1:
                raise ShapeError(
                    f"layer {layer.id}: concat inputs disagree spatially: {parts}"
                )
            shapes[layer.id] = (sum(p[0] for p in parts),) + parts[0][1:]
        else:
            shapes[layer.id] = shapes[layer.inputs[0]]
    return shapes


def count_params(graph: ModelGraph) -> tuple[int, list[tuple[int, int]]]:
    """Trainable parameter count: k^2*cin*cout + cout per conv, 2c per
    batch norm, zero elsewhere. Independent of the input size."""
    per_layer = []
    for layer in graph.layers:
        if layer.kind in ("conv", "convT"):
            cin = graph.channels[layer.inputs[0]]
            n = layer.kernel * layer.kernel * cin * layer.out_channels + layer.out_channels
        elif layer.kind == "batchnorm":
            n = 2 * graph.channels[layer.id]
        else:
            n = 0
        per_layer.append((layer.id, n))
    return sum(n for _, n in per_layer), per_layer


@dataclass
class ForwardCache:
    """Per-layer activations and residuals kept for the backward pass."""

    mode: str
    outputs: dict[int, np.ndarray] = field(default_factory=dict)
    extras: dict[int, object] = field(default_factory=dict)
    logits: np.ndarray | None = None


def forward(graph: ModelGraph, x, mode: str = INFER, rng=None):
    """Run the graph on a batch, returning (score_map, cache).

    The score map is the final layer's post-activation output; when the
    final activation is a sigmoid the cache also records its pre-activation
    logits so a fused loss can skip the saturating exponent.
    """
    if mode not in (TRAIN, INFER):
        raise ValueError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")
    if mode == TRAIN and rng is None:
        raise ValueError("train-mode forward needs the engine rng for dropout")
    if not graph.layers:
        raise ShapeError("cannot run an empty graph")
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"input must be rank-4, got {x.shape}")
    n, c, h, w = x.shape
    if c != graph.in_channels:
        raise ShapeError(f"input has {c} channels, graph expects {graph.in_channels}")
    d = graph.input_divisor
    if h % d or w % d:
        raise ShapeError(f"input size {h}x{w} is not divisible by {d}")

    cache = ForwardCache(mode=mode)
    last = graph.layers[-1]
    for layer in graph.layers:
        if layer.kind == "input":
            out = x
        elif layer.kind == "conv":
            p = graph.params[layer.id]
            z = conv2d_forward(cache.outputs[layer.inputs[0]], p["weight"],
                               p["bias"], graph.conv_spec(layer))
            out = _activate(layer, z)
            if layer is last and layer.activation == "sigmoid":
                cache.logits = z
        elif layer.kind == "convT":
            p = graph.params[layer.id]
            z = convT2d_forward(cache.outputs[layer.inputs[0]], p["weight"],
                                p["bias"], graph.conv_spec(layer))
            out = _activate(layer, z)
            if layer is last and layer.activation == "sigmoid":
                cache.logits = z
        elif layer.kind == "concat":
            out = concat_channels([cache.outputs[i] for i in layer.inputs])
        elif layer.kind == "batchnorm":
            out, bn_cache = batchnorm_forward(cache.outputs[layer.inputs[0]],
                                              graph.bn_states[layer.id], mode)
            cache.extras[layer.id] = bn_cache
        else:  # dropout
            out, mask = dropout(cache.outputs[layer.inputs[0]], layer.rate, rng, mode)
            cache.extras[layer.id] = mask
        cache.outputs[layer.id] = out
    score = cache.outputs[last.id]
    if cache.logits is None:
        cache.logits = score
    return score, cache


def _activate(layer, z):
    if layer.activation == "relu":
        return relu(z)
    if layer.activation == "sigmoid":
        return sigmoid(z)
    return z


def backward(graph: ModelGraph, cache: ForwardCache, d_final,
             final_pre_activation: bool = True):
    """Backpropagate a gradient through the whole graph.

    ``d_final`` is taken w.r.t. the final layer's pre-activation when
    ``final_pre_activation`` is set (the fused-loss convention); otherwise
    it chains through the final activation as well. Returns a dict
    layer_id -> {name: gradient} mirroring the parameter shapes.
    """
    if cache.mode != TRAIN:
        raise RuntimeError("backward needs the cache of a train-mode forward")
    if not cache.outputs:
        raise RuntimeError("forward cache is empty")
    last = graph.layers[-1]
    d_acc: dict[int, np.ndarray] = {last.id: np.asarray(d_final)}
    grads: dict[int, dict[str, np.ndarray]] = {}
    for layer in reversed(graph.layers):
        d = d_acc.pop(layer.id, None)
        if d is None or layer.kind == "input":
            continue
        out = cache.outputs[layer.id]
        skip_activation = final_pre_activation and layer is last
        if not skip_activation:
            if layer.activation == "relu":
                d = d * (out > 0)
            elif layer.activation == "sigmoid":
                d = sigmoid_backward(d, out)
        if layer.kind == "conv":
            p = graph.params[layer.id]
            d_x, d_w, d_b = conv2d_backward(cache.outputs[layer.inputs[0]],
                                            p["weight"], graph.conv_spec(layer), d)
            grads[layer.id] = {"weight": d_w, "bias": d_b}
            _accumulate(d_acc, layer.inputs[0], d_x)
        elif layer.kind == "convT":
            p = graph.params[layer.id]
            d_x, d_w, d_b = convT2d_backward(cache.outputs[layer.inputs[0]],
                                             p["weight"], graph.conv_spec(layer), d)
            grads[layer.id] = {"weight": d_w, "bias": d_b}
            _accumulate(d_acc, layer.inputs[0], d_x)
        elif layer.kind == "concat":
            widths = [graph.channels[i] for i in layer.inputs]
            for src, part in zip(layer.inputs, concat_backward(d, widths)):
                _accumulate(d_acc, src, part)
        elif layer.kind == "batchnorm":
            d_x, d_g, d_b = batchnorm_backward(d, graph.bn_states[layer.id],
                                               cache.extras[layer.id])
            grads[layer.id] = {"gamma": d_g, "beta": d_b}
            _accumulate(d_acc, layer.inputs[0], d_x)
        else:  # dropout
            _accumulate(d_acc, layer.inputs[0],
                        dropout_backward(d, cache.extras[layer.id], layer.rate))
    # layers the gradient never reached still owe zero-filled entries
    for lid, name, arr in graph.parameter_items():
        grads.setdefault(lid, {}).setdefault(name, np.zeros_like(arr))
    return grads


def _accumulate(d_acc, src, part):
    if src in d_acc:
        d_acc[src] = d_acc[src] + part
    else:
        d_acc[src] = part


_KIND_LABEL = {
    "input": "Input Layer",
    "concat": "Concatenation",
    "batchnorm": "BatchNorm",
    "dropout": "Dropout",
}


def summary(graph: ModelGraph, input_shape=(3, 240, 320)) -> str:
    """Plain-text layer table: id, type, output shape, inputs, parameters.

    Tab-separated rows, shapes printed channel-last with a symbolic batch,
    ending with the total trainable parameter count.
    """
    lines = ["id\ttype\toutput shape\tinputs\tparams"]
    if graph.layers:
        shapes = infer_shapes(graph, input_shape)
        total, per_layer = count_params(graph)
        counts = dict(per_layer)
        for layer in graph.layers:
            if layer.kind in ("conv", "convT"):
                label = ("Conv2D" if layer.kind == "conv" else "Conv2DT")
                label += f" ({layer.kernel}, {layer.stride})"
            else:
                label = _KIND_LABEL[layer.kind]
            c, h, w = shapes[layer.id]
            srcs = ", ".join(map(str, layer.inputs)) if layer.inputs else "mini-batch"
            lines.append(
                f"{layer.id}\t{label}\t(None, {h}, {w}, {c})\t{srcs}\t{counts[layer.id]}"
            )
    else:
        total = 0
    lines.append(f"Total trainable parameters: {total}")
    return "\n".join(lines)

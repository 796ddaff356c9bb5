"""Rank-4 tensors and the differentiable layer primitives.

Data layout is channel-major (batch, channel, height, width), row-major in
memory. Convolutions use same-floor zero padding: the output spatial size
is ceil(in / stride) and any odd padding row/column lands on the
bottom/right edge. Transposed convolution is implemented as the exact
adjoint of that convolution, so the upsampling path inverts the
downsampling path size-for-size.

Every op runs in the dtype of its inputs: float32 in production, float64
when the gradient-check harness wants extra headroom.
"""

import numpy as np
from dataclasses import dataclass

from .errors import ConfigError, ShapeError

TRAIN = "train"
INFER = "infer"


def _check_nchw(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def same_floor_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Return (pad_begin, pad_end, out_size) for one spatial axis.

    out_size = ceil(size / stride); the extra padding row/column when the
    total is odd goes on the end (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    begin = total // 2
    return begin, total - begin, out


def _pad_input(x, pt, pb, pl, pr):
    if pt == pb == pl == pr == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=x.dtype)
    xp[:, :, pt:pt + h, pl:pl + w] = x
    return xp


@dataclass(frozen=True)
class ConvSpec:
    """Square odd kernel, same-floor padded convolution."""

    kernel: int
    stride: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return -(-h // self.stride), -(-w // self.stride)


@dataclass(frozen=True)
class TransposeConvSpec:
    """Learnable upsampling: the adjoint of a same-floor strided convolution.

    Weights are stored (in_channels, out_channels, k, k). The default target
    spatial size is stride times the input size.
    """

    kernel: int
    stride: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ShapeError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be positive")

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.in_channels, self.out_channels, self.kernel, self.kernel)


def transpose_alpha(target: int, kernel: int, stride: int, padding: int) -> int:
    """Count of zeros added on the top/right edge of the dilated input so the
    upsampled output hits exactly ``target``."""
    m = target + 2 * padding - kernel
    if m < 0:
        raise ShapeError(
            f"invalid upsampling target {target} for kernel {kernel}, padding {padding}"
        )
    return m % stride


def transpose_output_size(in_size: int, kernel: int, stride: int,
                          padding: int, alpha: int) -> int:
    """Spatial size produced by a transposed convolution."""
    return stride * (in_size - 1) + alpha + kernel - 2 * padding


def conv2d_forward(x, weights, bias, spec: ConvSpec):
    """Cross-correlate ``x`` with ``weights`` plus per-channel ``bias``.

    x: (n, cin, h, w); weights: (cout, cin, k, k); bias: (cout,) or None.
    Returns (n, cout, ceil(h/s), ceil(w/s)).
    """
    x = _check_nchw(x)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    weights = np.asarray(weights)
    if weights.shape != spec.weight_shape():
        raise ShapeError(
            f"weights shaped {weights.shape}, spec expects {spec.weight_shape()}"
        )
    k, s = spec.kernel, spec.stride
    pt, pb, oh = same_floor_padding(h, k, s)
    pl, pr, ow = same_floor_padding(w, k, s)
    if oh < 1 or ow < 1:
        raise ShapeError(f"empty output {oh}x{ow} after striding")
    xp = _pad_input(x, pt, pb, pl, pr)
    acc = np.zeros((spec.out_channels, n, oh, ow), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            window = xp[:, :, ki:ki + (oh - 1) * s + 1:s, kj:kj + (ow - 1) * s + 1:s]
            acc += np.tensordot(weights[:, :, ki, kj], window, axes=(1, 1))
    out = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)[:, None, None]
    return out


def conv2d_backward(x, weights, spec: ConvSpec, d_out):
    """Gradients of a scalar loss through :func:`conv2d_forward`.

    Returns (d_x, d_weights, d_bias) with shapes matching the forward inputs.
    """
    x = _check_nchw(x)
    n, c, h, w = x.shape
    k, s = spec.kernel, spec.stride
    pt, pb, oh = same_floor_padding(h, k, s)
    pl, pr, ow = same_floor_padding(w, k, s)
    d_out = np.asarray(d_out)
    if d_out.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(
            f"upstream gradient shaped {d_out.shape}, forward produced "
            f"{(n, spec.out_channels, oh, ow)}"
        )
    weights = np.asarray(weights)
    xp = _pad_input(x, pt, pb, pl, pr)
    d_bias = d_out.sum(axis=(0, 2, 3))
    d_w = np.zeros_like(weights)
    d_xp = np.zeros_like(xp)
    for ki in range(k):
        for kj in range(k):
            hs = slice(ki, ki + (oh - 1) * s + 1, s)
            ws = slice(kj, kj + (ow - 1) * s + 1, s)
            d_w[:, :, ki, kj] = np.tensordot(d_out, xp[:, :, hs, ws],
                                             axes=([0, 2, 3], [0, 2, 3]))
            d_xp[:, :, hs, ws] += np.moveaxis(
                np.tensordot(weights[:, :, ki, kj], d_out, axes=(0, 1)), 0, 1)
    d_x = np.ascontiguousarray(d_xp[:, :, pt:pt + h, pl:pl + w])
    return d_x, d_w, d_bias


def convT2d_forward(x, weights, bias, spec: TransposeConvSpec, out_hw=None):
    """Transposed convolution: scatter each input neuron through the kernel.

    Equivalent to dilating the input with stride-1 interleaved zeros plus the
    edge zeros counted by :func:`transpose_alpha`, then convolving at unit
    stride; implemented directly as the adjoint of :func:`conv2d_forward`.
    Default output size is (stride*h, stride*w).
    """
    x = _check_nchw(x)
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ShapeError(f"input has {c} channels, spec expects {spec.in_channels}")
    weights = np.asarray(weights)
    if weights.shape != spec.weight_shape():
        raise ShapeError(
            f"weights shaped {weights.shape}, spec expects {spec.weight_shape()}"
        )
    k, s = spec.kernel, spec.stride
    out_h, out_w = out_hw if out_hw is not None else (s * h, s * w)
    pt, pb, ih = same_floor_padding(out_h, k, s)
    pl, pr, iw = same_floor_padding(out_w, k, s)
    if (ih, iw) != (h, w):
        raise ShapeError(
            f"target {out_h}x{out_w} is not a stride-{s} preimage of input {h}x{w}"
        )
    buf = np.zeros((n, spec.out_channels, out_h + pt + pb, out_w + pl + pr),
                   dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            hs = slice(ki, ki + (h - 1) * s + 1, s)
            ws = slice(kj, kj + (w - 1) * s + 1, s)
            buf[:, :, hs, ws] += np.moveaxis(
                np.tensordot(weights[:, :, ki, kj], x, axes=(0, 1)), 0, 1)
    out = np.ascontiguousarray(buf[:, :, pt:pt + out_h, pl:pl + out_w])
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)[:, None, None]
    return out


def convT2d_backward(x, weights, spec: TransposeConvSpec, d_out):
    """Gradients through :func:`convT2d_forward`.

    d_x is exactly a forward convolution of d_out with the same kernel.
    """
    x = _check_nchw(x)
    n, c, h, w = x.shape
    k, s = spec.kernel, spec.stride
    d_out = np.asarray(d_out)
    if d_out.ndim != 4 or d_out.shape[:2] != (n, spec.out_channels):
        raise ShapeError(
            f"upstream gradient shaped {d_out.shape} does not match "
            f"(n={n}, cout={spec.out_channels}, ...)"
        )
    out_h, out_w = d_out.shape[2:]
    pt, pb, ih = same_floor_padding(out_h, k, s)
    pl, pr, iw = same_floor_padding(out_w, k, s)
    if (ih, iw) != (h, w):
        raise ShapeError(
            f"upstream gradient {out_h}x{out_w} is not a stride-{s} image of {h}x{w}"
        )
    d_bias = d_out.sum(axis=(0, 2, 3))
    conv_spec = ConvSpec(k, s, in_channels=spec.out_channels,
                         out_channels=spec.in_channels)
    d_x = conv2d_forward(d_out, weights, None, conv_spec)
    dp = _pad_input(d_out, pt, pb, pl, pr)
    d_w = np.zeros_like(weights)
    for ki in range(k):
        for kj in range(k):
            hs = slice(ki, ki + (h - 1) * s + 1, s)
            ws = slice(kj, kj + (w - 1) * s + 1, s)
            d_w[:, :, ki, kj] = np.tensordot(x, dp[:, :, hs, ws],
                                             axes=([0, 2, 3], [0, 2, 3]))
    return d_x, d_w, d_bias


def relu(x):
    return np.maximum(x, 0)


def relu_backward(d_out, x):
    """Pass the upstream gradient where x > 0, zero elsewhere."""
    return d_out * (x > 0)


def sigmoid(x):
    """Numerically stable logistic function, output in (0, 1)."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid_backward(d_out, y):
    """Chain rule through the logistic function given its output y."""
    return d_out * y * (1.0 - y)


@dataclass
class BatchNormState:
    """Per-channel scale/shift plus running statistics for inference."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-3
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, momentum: float = 0.99, dtype=np.float32):
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm_forward(x, state: BatchNormState, mode: str = TRAIN):
    """Normalize per channel over (batch, h, w), then scale and shift.

    Train mode uses mini-batch statistics and updates the running averages;
    infer mode uses the running statistics and requires them to have been
    trained or loaded from a checkpoint. Returns (y, cache) where cache feeds
    :func:`batchnorm_backward` (None in infer mode).
    """
    x = _check_nchw(x)
    if x.shape[1] != state.channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, state holds {state.channels}"
        )
    gamma = state.gamma.reshape(1, -1, 1, 1)
    beta = state.beta.reshape(1, -1, 1, 1)
    if mode == TRAIN:
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mu).astype(
            state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(
            state.running_var.dtype)
        state.initialized = True
        return gamma * xhat + beta, (xhat, inv_std)
    if mode == INFER:
        if not state.initialized:
            raise RuntimeError(
                "batch norm running statistics are uninitialized; train at "
                "least one step or load them from a checkpoint"
            )
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean.reshape(1, -1, 1, 1)) \
            * inv_std.reshape(1, -1, 1, 1)
        return gamma * xhat + beta, None
    raise ConfigError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")


def batchnorm_backward(d_out, state: BatchNormState, cache):
    """Gradients through the train-mode normalization.

    Returns (d_x, d_gamma, d_beta).
    """
    if cache is None:
        raise RuntimeError("batch norm backward needs a train-mode cache")
    xhat, inv_std = cache
    d_out = np.asarray(d_out)
    m = d_out.shape[0] * d_out.shape[2] * d_out.shape[3]
    d_beta = d_out.sum(axis=(0, 2, 3))
    d_gamma = (d_out * xhat).sum(axis=(0, 2, 3))
    dxhat = d_out * state.gamma.reshape(1, -1, 1, 1)
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    d_x = (inv_std.reshape(1, -1, 1, 1) / m) \
        * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return d_x, d_gamma, d_beta


def concat_channels(inputs):
    """Stack tensors along the channel axis in argument order."""
    if not inputs:
        raise ShapeError("concat needs at least one input")
    arrs = [_check_nchw(t, f"concat input {i}") for i, t in enumerate(inputs)]
    base = arrs[0].shape
    for i, a in enumerate(arrs[1:], start=1):
        if a.shape[0] != base[0] or a.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat input {i} shaped {a.shape} does not match {base} on "
                "(batch, h, w)"
            )
    return np.concatenate(arrs, axis=1)


def concat_backward(d_out, channel_sizes):
    """Split the upstream gradient back into the per-input channel blocks."""
    offsets = np.cumsum(channel_sizes)[:-1]
    return np.split(d_out, offsets, axis=1)


def dropout(x, rate: float, rng, mode: str = TRAIN):
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Returns (y, keep_mask); the mask is None whenever the op is an identity
    (infer mode or rate 0).
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == INFER or rate == 0.0:
        return x, None
    if mode != TRAIN:
        raise ConfigError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")
    mask = rng.uniform(size=x.shape) >= rate
    return x * (mask / (1.0 - rate)).astype(x.dtype), mask


def dropout_backward(d_out, mask, rate: float):
    if mask is None:
        return d_out
    return d_out * (mask / (1.0 - rate)).astype(d_out.dtype)


def resize_nearest(image, target_h: int, target_w: int):
    """Nearest-neighbor resize over the last two axes; values are copied,
    never interpolated, so the value set is preserved."""
    image = np.asarray(image)
    if image.ndim < 2:
        raise ShapeError("resize needs at least 2 spatial dimensions")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"target size must be positive, got {target_h}x{target_w}")
    h, w = image.shape[-2], image.shape[-1]
    if (h, w) == (target_h, target_w):
        return image.copy()
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    return image[..., rows[:, None], cols[None, :]]

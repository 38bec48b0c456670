"""Dense tensor operations: dilated convolution, dilated max-pooling, and
elementwise nonlinearities.

Tensors are plain numpy arrays, float32 by convention (float64 is accepted
for numerical checks). Feature maps are [channels, rows, cols]; convolution
kernels are [out_channels, in_channels, rows, cols].

Dilation follows the zeros-inserted convention: `rate` is the number of
fixed zeros between adjacent kernel taps, so a kernel of extent k covers
k + (k-1)*rate input samples. rate=0 is standard convolution. Only valid
(no-padding) windows are computed.

All operations are pure and deterministic: per output element, taps
accumulate in (in-channel, row, column) order with the bias added last, so
repeated runs, any thread count, and both kernel backends produce
bit-identical results.
"""

import contextlib
import threading

import numpy as np

from .backend import get_kernels, resolve_threads
from .errors import ShapeError

_DTYPES = (np.float32, np.float64)

_counts = threading.local()


@contextlib.contextmanager
def count_ops():
    """Count kernel invocations by op name (conv2d, maxpool2d, relu,
    softmax). Used to assert evaluation counts, e.g. that dense inference
    runs each layer exactly once per slice."""
    prev = getattr(_counts, "d", None)
    _counts.d = {}
    try:
        yield _counts.d
    finally:
        _counts.d = prev


def _bump(name):
    d = getattr(_counts, "d", None)
    if d is not None:
        d[name] = d.get(name, 0) + 1


def effective_extent(extent, rate):
    """Input samples covered by a kernel of the given extent at `rate`."""
    return extent + (extent - 1) * rate


def output_extent(in_extent, extent, stride, rate):
    eff = effective_extent(extent, rate)
    if eff > in_extent:
        raise ShapeError(
            f"effective kernel extent {eff} exceeds input extent {in_extent}")
    return (in_extent - eff) // stride + 1


def zero_stuff(kernel, rate):
    """Explicitly inflate a [out,in,kh,kw] kernel by inserting `rate` zeros
    between taps along both spatial axes."""
    if rate == 0:
        return kernel.copy()
    co, ci, kh, kw = kernel.shape
    out = np.zeros((co, ci, effective_extent(kh, rate), effective_extent(kw, rate)),
                   dtype=kernel.dtype)
    out[:, :, ::rate + 1, ::rate + 1] = kernel
    return out


def _check_common(x, name, min_rank=1):
    if not isinstance(x, np.ndarray) or x.dtype.type not in _DTYPES:
        raise ShapeError(f"{name} must be a float32/float64 ndarray")
    if x.ndim < min_rank:
        raise ShapeError(f"{name} must have rank >= {min_rank}, got {x.ndim}")
    if any(s == 0 for s in x.shape):
        raise ShapeError(f"{name} has a zero extent: {x.shape}")


def _check_params(stride, rate):
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if rate < 0:
        raise ShapeError(f"dilation rate must be non-negative, got {rate}")


def _as_c(x):
    return np.ascontiguousarray(x)


def conv2d_batch(x, weights, bias=None, stride=1, rate=0, threads=None):
    """Valid dilated convolution of a [n, c_in, h, w] batch with a
    [c_out, c_in, kh, kw] kernel. Returns [n, c_out, h', w'] where
    h' = (h - (kh + (kh-1)*rate)) // stride + 1 (and likewise w')."""
    _check_common(x, "input", 4)
    _check_common(weights, "kernel", 4)
    _check_params(stride, rate)
    if weights.ndim != 4:
        raise ShapeError(f"kernel must be rank 4, got {weights.ndim}")
    if x.dtype != weights.dtype:
        raise ShapeError(f"input dtype {x.dtype} != kernel dtype {weights.dtype}")
    if weights.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {weights.shape[1]} input channels, input has {x.shape[1]}")
    if bias is None:
        bias = np.zeros(weights.shape[0], dtype=x.dtype)
    if bias.shape != (weights.shape[0],) or bias.dtype != x.dtype:
        raise ShapeError("bias must be a vector of length out_channels, same dtype")
    output_extent(x.shape[2], weights.shape[2], stride, rate)
    output_extent(x.shape[3], weights.shape[3], stride, rate)
    _bump("conv2d")
    k = get_kernels()
    return k.conv2d_fwd(_as_c(x), _as_c(weights), _as_c(bias),
                        stride, rate, resolve_threads(threads))


def conv2d(x, weights, bias=None, stride=1, rate=0, threads=None):
    """conv2d_batch for a single [c_in, h, w] feature map."""
    _check_common(x, "input", 3)
    if x.ndim != 3:
        raise ShapeError(f"input must be rank 3 [c,h,w], got {x.ndim}")
    return conv2d_batch(x[None], weights, bias, stride, rate, threads)[0]


def maxpool2d_batch(x, window, stride=1, rate=0, threads=None, want_argmax=False):
    """Valid dilated max-pooling over window x window samples spaced
    (rate+1) apart. Output extents follow the conv2d arithmetic. With
    want_argmax, also returns the flat in-plane index of each maximum
    (first-encountered on ties, scanning window rows then columns)."""
    _check_common(x, "input", 4)
    _check_params(stride, rate)
    if window < 1:
        raise ShapeError(f"window must be positive, got {window}")
    output_extent(x.shape[2], window, stride, rate)
    output_extent(x.shape[3], window, stride, rate)
    _bump("maxpool2d")
    k = get_kernels()
    out, am = k.maxpool2d_fwd(_as_c(x), window, stride, rate,
                              resolve_threads(threads), want_argmax)
    return (out, am) if want_argmax else out


def maxpool2d(x, window, stride=1, rate=0, threads=None):
    """maxpool2d_batch for a single [c, h, w] feature map."""
    _check_common(x, "input", 3)
    if x.ndim != 3:
        raise ShapeError(f"input must be rank 3 [c,h,w], got {x.ndim}")
    return maxpool2d_batch(x[None], window, stride, rate, threads)[0]


def conv2d_backward(x, weights, gout, stride=1, rate=0):
    """Gradients of a conv2d_batch output: returns (gx, gweights, gbias)."""
    _bump("conv2d_backward")
    k = get_kernels()
    return k.conv2d_bwd(_as_c(x), _as_c(weights), _as_c(gout), stride, rate)


def maxpool2d_backward(x_shape, argmax, gout):
    """Scatter pooled gradients back to the argmax input samples."""
    _bump("maxpool2d_backward")
    k = get_kernels()
    return k.maxpool2d_bwd(tuple(x_shape), _as_c(argmax), _as_c(gout))


def relu(x):
    """Elementwise max(0, x); shape and dtype preserved."""
    _check_common(x, "input")
    _bump("relu")
    return np.maximum(x, x.dtype.type(0))


def softmax_channels(x):
    """Per-location softmax over the channel axis of a [c, h, w] map,
    stabilized by subtracting the per-location maximum."""
    _check_common(x, "input", 3)
    if x.ndim != 3:
        raise ShapeError(f"input must be rank 3 [c,h,w], got {x.ndim}")
    if x.shape[0] < 2:
        raise ShapeError(f"softmax needs >= 2 channels, got {x.shape[0]}")
    _bump("softmax")
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)

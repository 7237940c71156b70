"""Dense layer primitives with hand-written backward passes.

Tensors are plain ``float64`` numpy arrays laid out channel-planar: a single
sample is ``(C, H, W)``, a batch is ``(B, C, H, W)``. Every layer function
accepts either form and returns the same rank it was given.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


@dataclass
class ConvParams:
    """Weights ``(K, L, M, N)``, bias ``(K,)``, stride and zero padding."""

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ShapeError(f"conv weights must be 4-D (K, L, M, N), got shape {self.weights.shape}")
        k, _, m, n = self.weights.shape
        if min(self.weights.shape) < 1:
            raise ShapeError(f"conv weight extents must be >= 1, got {self.weights.shape}")
        if self.bias.shape != (k,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {k} output channels")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def kernel_size(self):
        return self.weights.shape[2], self.weights.shape[3]

    def copy(self):
        return ConvParams(self.weights.copy(), self.bias.copy(), self.stride, self.padding)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got shape {x.shape}")


def conv_output_extent(size, kernel, stride, padding):
    """Output extent of a strided convolution; raises if it is not a positive integer."""
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            f"gives non-integer or empty output ({span}/{stride} + 1)"
        )
    return span // stride + 1


def conv_macs(in_shape, params):
    """Multiply-accumulate count of one forward convolution on a (B, L, H, W) input."""
    b, _, h, w = in_shape
    k, l, m, n = params.weights.shape
    ho = conv_output_extent(h, m, params.stride, params.padding)
    wo = conv_output_extent(w, n, params.stride, params.padding)
    return b * k * ho * wo * l * m * n


def conv2d_forward(x, params, return_cols=False):
    """Cross-correlate ``x`` with ``params``; out-of-bounds input reads as zero.

    With ``return_cols=True`` the unfolded input matrix is also returned so a
    later :func:`conv2d_backward` call can reuse it.
    """
    xb, single = _as_batch(x)
    b, l, h, w = xb.shape
    k, lw, m, n = params.weights.shape
    if l != lw:
        raise ShapeError(f"input has {l} channels but filters expect {lw}")
    ho = conv_output_extent(h, m, params.stride, params.padding)
    wo = conv_output_extent(w, n, params.stride, params.padding)
    cols = kernels.im2col(xb, m, n, params.stride, params.padding)
    y = cols @ params.weights.reshape(k, -1).T
    y += params.bias
    y = np.ascontiguousarray(y.reshape(b, ho, wo, k).transpose(0, 3, 1, 2))
    if single:
        y = y[0]
    if return_cols:
        return y, cols
    return y


def conv2d_backward(x, params, upstream, cols=None):
    """Gradients of ``sum(upstream * conv2d_forward(x))``.

    Returns ``(input_grad, weight_grad, bias_grad)``.
    """
    xb, single = _as_batch(x)
    gb, _ = _as_batch(upstream)
    b, l, h, w = xb.shape
    k, lw, m, n = params.weights.shape
    if l != lw:
        raise ShapeError(f"input has {l} channels but filters expect {lw}")
    ho = conv_output_extent(h, m, params.stride, params.padding)
    wo = conv_output_extent(w, n, params.stride, params.padding)
    if gb.shape != (b, k, ho, wo):
        raise ShapeError(f"upstream gradient shape {gb.shape} != forward output shape {(b, k, ho, wo)}")
    if cols is None:
        cols = kernels.im2col(xb, m, n, params.stride, params.padding)
    g = gb.transpose(0, 2, 3, 1).reshape(-1, k)
    weight_grad = (g.T @ cols).reshape(params.weights.shape)
    bias_grad = g.sum(axis=0)
    dcols = g @ params.weights.reshape(k, -1)
    input_grad = kernels.col2im(dcols, (b, l, h, w), m, n, params.stride, params.padding)
    if single:
        input_grad = input_grad[0]
    return input_grad, weight_grad, bias_grad


def relu(z):
    return np.maximum(z, 0.0)


def relu_backward(z, upstream):
    """Upstream gradient masked by ``z > 0``; the derivative at exactly 0 is 0."""
    return np.where(np.asarray(z) > 0, upstream, 0.0)


def upsample_nearest(x, s):
    """Nearest-neighbour upsampling: ``out[..., i, j] = x[..., i // s, j // s]``."""
    if s < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {s}")
    x = np.asarray(x, dtype=np.float64)
    if s == 1:
        return x.copy()
    return np.repeat(np.repeat(x, s, axis=-2), s, axis=-1)


def upsample_backward(upstream, s):
    """Sum each ``s x s`` block of the upstream gradient into its source cell."""
    if s < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {s}")
    g = np.asarray(upstream, dtype=np.float64)
    if s == 1:
        return g.copy()
    *lead, h, w = g.shape
    if h % s or w % s:
        raise ShapeError(f"gradient extent {(h, w)} is not a multiple of {s}")
    # fixed row-major accumulation order; np.sum over strided axes leaves it unspecified
    out = np.zeros((*lead, h // s, w // s))
    for di in range(s):
        for dj in range(s):
            out += g[..., di::s, dj::s]
    return out


def softmax(logits, axis=-3):
    """Per-pixel softmax over the class axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean per-pixel cross-entropy and its gradient with respect to the logits.

    ``logits`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``labels`` holds integer
    class ids of shape ``(H, W)`` or ``(B, H, W)``. The mean runs over every
    pixel of the batch, so the gradient is ``(p - onehot) / N``.
    """
    z, single = _as_batch(logits)
    t = np.asarray(labels)
    if single:
        t = t[None]
    b, c, h, w = z.shape
    if t.shape != (b, h, w):
        raise ShapeError(f"labels shape {t.shape} does not match logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), found range [{t.min()}, {t.max()}]")
    t = t.astype(np.intp)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    picked = np.take_along_axis(log_p, t[:, None], axis=1)
    npix = b * h * w
    loss = -picked.sum() / npix
    grad = np.exp(log_p)
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1.0, axis=1)
    grad /= npix
    if single:
        grad = grad[0]
    return float(loss), grad


class NonFiniteGradient(FloatingPointError):
    """Raised when an update would consume a NaN or infinite gradient."""


def sgd_step(params, grads, learning_rate, l2=0.0, l1=0.0):
    """One SGD step with L2 and L1 penalties, returning new arrays.

    ``params`` and ``grads`` are matching sequences of arrays. The effective
    gradient is ``g + 2*l2*theta + l1*sign(theta)`` with ``sign(0) = 0``.
    """
    if not learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    out = []
    for i, (theta, g) in enumerate(zip(params, grads)):
        theta = np.asarray(theta, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if theta.shape != g.shape:
            raise ShapeError(f"parameter {i}: gradient shape {g.shape} != parameter shape {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {i} (shape {g.shape})")
        eff = g
        if l2:
            eff = eff + 2.0 * l2 * theta
        if l1:
            eff = eff + l1 * np.sign(theta)
        out.append(theta - learning_rate * eff)
    return out

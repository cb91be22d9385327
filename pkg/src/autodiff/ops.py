"""Layer primitives with exact gradients.

Activations are batch-leading: (B, C, T) for signals and (B, F) for vectors.
Convolution uses the cross-correlation convention (no kernel flip).
"""

from typing import List, Optional, Sequence

import numpy as np

from src.autodiff.tensor import Tensor, current_tape
from src.errors import DegenerateBatch, ShapeMismatch

TINY = np.finfo(np.float64).tiny
ONE_MINUS_ULP = np.nextafter(1.0, 0.0)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    out.is_leaf = False
    if track:
        tape.record(op, out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _require_ndim(x: Tensor, ndim: int, op: str) -> None:
    if x.data.ndim != ndim:
        raise ShapeMismatch(f"{op} expects a {ndim}-d input, got shape {x.shape}")


# Elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}")

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: cannot broadcast {a.shape} with {b.shape}")

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", data, (a, b), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {x.shape} as {shape}")

    return _record("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: List[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, boundaries, axis=axis))

    return _record("concat", data, tensors, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # Clipped to [tiny, 1 - ulp]
    s = np.clip(_stable_sigmoid(x.data), TINY, ONE_MINUS_ULP)
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


# Layer primitives

def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    1-D cross-correlation with zero padding.

    Args:
        x (Tensor): Input of shape (B, C_in, T)
        weight (Tensor): Kernel of shape (C_out, C_in, K), K odd
        bias (Tensor, optional): Bias of shape (C_out,)
        stride (int): Step between output positions
        padding (int): Zeros added on both ends

    Returns:
        Tensor: Output of shape (B, C_out, floor((T + 2p - K) / s) + 1)
    """
    _require_ndim(x, 3, "conv1d")
    batch, c_in, length = x.shape
    c_out, w_in, kernel = weight.shape
    if w_in != c_in:
        raise ShapeMismatch(f"conv1d: input has {c_in} channels, kernel expects {w_in}")
    if kernel % 2 == 0:
        raise ShapeMismatch(f"conv1d: kernel size must be odd, got {kernel}")
    if length + 2 * padding < kernel:
        raise ShapeMismatch(f"conv1d: padded length {length + 2 * padding} shorter than kernel {kernel}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv1d: bias shape {bias.shape} != ({c_out},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    out_length = (length + 2 * padding - kernel) // stride + 1
    span = stride * (out_length - 1) + 1
    w = weight.data

    out = np.zeros((batch, c_out, out_length))
    for k in range(kernel):
        out += np.matmul(w[:, :, k], xp[:, :, k:k + span:stride])
    if bias is not None:
        out += bias.data[None, :, None]

    def backward_fn(g):
        grad_w = np.zeros_like(w)
        grad_xp = np.zeros_like(xp)
        for k in range(kernel):
            window = xp[:, :, k:k + span:stride]
            grad_w[:, :, k] = np.tensordot(g, window, axes=([0, 2], [0, 2]))
            grad_xp[:, :, k:k + span:stride] += np.matmul(w[:, :, k].T, g)
        grad_x = grad_xp[:, :, padding:padding + length]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv1d", out, inputs, backward_fn)


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """
    Per-channel batch normalization over (B, T).

    Train mode normalizes with batch statistics and updates the running
    statistics in place: r <- (1 - momentum) * r + momentum * batch_stat.
    Eval mode uses the running statistics.

    Raises:
        DegenerateBatch: Fewer than two values per channel in train mode
    """
    _require_ndim(x, 3, "batch_norm1d")
    batch, channels, length = x.shape
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatch(f"batch_norm1d: affine shape mismatch for {channels} channels")

    count = batch * length
    if training:
        if count < 2:
            raise DegenerateBatch(f"batch_norm1d needs at least 2 values per channel, got {count}")
        mean = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean.copy(), running_var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma.data[None, :, None] * x_hat + beta.data[None, :, None]

    def backward_fn(g):
        grad_gamma = (g * x_hat).sum(axis=(0, 2))
        grad_beta = g.sum(axis=(0, 2))
        grad_x_hat = g * gamma.data[None, :, None]
        if training:
            grad_x = (inv_std[None, :, None] / count) * (
                count * grad_x_hat
                - grad_x_hat.sum(axis=(0, 2), keepdims=True)
                - x_hat * (grad_x_hat * x_hat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            grad_x = grad_x_hat * inv_std[None, :, None]
        return grad_x, grad_gamma, grad_beta

    return _record("batch_norm1d", out, (x, gamma, beta), backward_fn)


def max_pool1d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """
    Max pooling with -inf padding; ties route the gradient to the lowest index.
    """
    _require_ndim(x, 3, "max_pool1d")
    batch, channels, length = x.shape
    if length < 1 or padding > kernel // 2 or length + 2 * padding < kernel:
        raise ShapeMismatch(f"max_pool1d: invalid geometry for length {length}, kernel {kernel}, padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)), constant_values=-np.inf) if padding else x.data
    out_length = (length + 2 * padding - kernel) // stride + 1
    span = stride * (out_length - 1) + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, :span:stride]
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        grad_xp = np.zeros(xp.shape)
        for k in range(kernel):
            grad_xp[:, :, k:k + span:stride] += np.where(argmax == k, g, 0.0)
        return (grad_xp[:, :, padding:padding + length],)

    return _record("max_pool1d", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_ndim(x, 3, "global_avg_pool")
    length = x.shape[2]
    if length < 1:
        raise ShapeMismatch("global_avg_pool: empty temporal axis")

    def backward_fn(g):
        return (np.repeat(g[:, :, None] / length, length, axis=2),)

    return _record("global_avg_pool", x.data.mean(axis=2), (x,), backward_fn)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer: x @ weight.T + bias, weight of shape (F_out, F_in)."""
    _require_ndim(x, 2, "dense")
    if weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"dense: input width {x.shape[1]} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]

    def backward_fn(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("dense", out, inputs, backward_fn)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when rate is 0."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def bce_mean(logits: Tensor, targets) -> Tensor:
    """
    Mean binary cross-entropy computed from logits (sigmoid fused).

    Args:
        logits (Tensor): Shape (B, classes)
        targets: 0/1 array of the same shape

    Returns:
        Tensor: Scalar loss; gradient (sigmoid(logit) - target) / (B * classes)
    """
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ShapeMismatch(f"bce_mean: logits {logits.shape} vs targets {targets.shape}")

    z = logits.data
    count = z.size
    losses = np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z)))

    def backward_fn(g):
        return (float(g) * (_stable_sigmoid(z) - targets) / count,)

    return _record("bce_mean", np.array(losses.mean()), (logits,), backward_fn)

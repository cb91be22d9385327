from typing import List, Optional

import numpy as np

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import ShapeMismatch


def batch_norm(x: Tensor, params, prefix: str, training: bool) -> Tensor:
    config = params.config
    return ops.batch_norm1d(
        x,
        params.tensors[f"{prefix}.gamma"],
        params.tensors[f"{prefix}.beta"],
        params.buffers[f"{prefix}.running_mean"],
        params.buffers[f"{prefix}.running_var"],
        training=training,
        eps=config.bn_eps,
        momentum=config.bn_momentum,
    )


def se_block(
    x: Tensor,
    w1: Tensor,
    w2: Tensor,
    bypass: bool = False,
    gate_log: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """
    Squeeze-and-excitation channel recalibration.

    z = mean_T(x); s = sigmoid(W2 relu(W1 z)); output channel c is x_c * s_c.

    Args:
        x (Tensor): Input of shape (B, C, T)
        w1 (Tensor): Squeeze projection of shape (C/r, C)
        w2 (Tensor): Excite projection of shape (C, C/r)
        bypass (bool): Force every gate to 1 (plain residual block)
        gate_log (List[np.ndarray], optional): Receives the (B, C) gate values

    Returns:
        Tensor: Recalibrated features of shape (B, C, T)
    """
    batch, channels, _ = x.shape
    if w1.shape[1] != channels or w2.shape != (channels, w1.shape[0]):
        raise ShapeMismatch(f"se_block: weights {w1.shape}/{w2.shape} do not fit {channels} channels")

    if bypass:
        if gate_log is not None:
            gate_log.append(np.ones((batch, channels)))
        return x

    z = ops.global_avg_pool(x)
    s = ops.sigmoid(ops.dense(ops.relu(ops.dense(z, w1)), w2))
    if gate_log is not None:
        gate_log.append(s.data.copy())
    return ops.mul(x, ops.reshape(s, (batch, channels, 1)))


def res_block(
    x: Tensor,
    params,
    prefix: str,
    stride: int,
    training: bool,
    rng: np.random.Generator = None,
    se_bypass: bool = False,
    gate_log: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """
    Residual block: conv-BN-ReLU-dropout-conv-BN-SE on the main path plus a shortcut.

    The shortcut is the identity when shape is preserved and a strided 1x1
    convolution with BN otherwise. Output is ReLU(main + shortcut).

    Args:
        x (Tensor): Input of shape (B, C_in, T)
        params (ModelParams): Parameter collection
        prefix (str): Block name, e.g. "blocks.3"
        stride (int): 1 or 2
        training (bool): Train-mode BN and dropout
        rng (np.random.Generator, optional): Dropout random source
        se_bypass (bool): Force SE gates to 1
        gate_log (List[np.ndarray], optional): Receives SE gate values

    Returns:
        Tensor: Output of shape (B, C_out, ceil(T / stride))
    """
    if stride not in (1, 2):
        raise ShapeMismatch(f"res_block: stride must be 1 or 2, got {stride}")

    tensors = params.tensors
    kernel = params.config.block_kernel
    pad = kernel // 2

    main = ops.conv1d(x, tensors[f"{prefix}.conv1.weight"], stride=stride, padding=pad)
    main = ops.relu(batch_norm(main, params, f"{prefix}.bn1", training))
    main = ops.dropout(main, params.config.dropout_rate, training, rng)
    main = ops.conv1d(main, tensors[f"{prefix}.conv2.weight"], stride=1, padding=pad)
    main = batch_norm(main, params, f"{prefix}.bn2", training)
    main = se_block(main, tensors[f"{prefix}.se.w1"], tensors[f"{prefix}.se.w2"], se_bypass, gate_log)

    shortcut_key = f"{prefix}.shortcut.conv.weight"
    if shortcut_key in tensors:
        shortcut = ops.conv1d(x, tensors[shortcut_key], stride=stride, padding=0)
        shortcut = batch_norm(shortcut, params, f"{prefix}.shortcut.bn", training)
    else:
        if stride != 1 or x.shape[1] != main.shape[1]:
            raise ShapeMismatch(f"{prefix}: identity shortcut needs matching shape, got {x.shape} -> {main.shape}")
        shortcut = x

    return ops.relu(ops.add(main, shortcut))

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.autodiff import ops
from src.autodiff.tensor import Tensor
from src.errors import ShapeMismatch
from src.model.layers import batch_norm, res_block

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    num_leads: int = 12
    stem_filters: int = 64
    stem_kernel: int = 15
    block_kernel: int = 7
    num_blocks: int = 8
    channel_plan: List[int] = Field(default_factory=lambda: [64, 64, 128, 128, 256, 256, 512, 512])
    downsample_after_blocks: List[int] = Field(default_factory=lambda: [4, 6, 8])
    se_reduction: int = 16
    dropout_rate: float = Field(default=0.2, ge=0.0, lt=1.0)
    demographic_dim: int = 10
    num_classes: int = 24
    width_scale: float = Field(default=1.0, gt=0.0)
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_padding: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @model_validator(mode="after")
    def check_architecture(self) -> "ModelConfig":
        if len(self.channel_plan) != self.num_blocks:
            raise ValueError(f"channel_plan has {len(self.channel_plan)} entries for {self.num_blocks} blocks")
        for i, channels in enumerate(self.channel_plan):
            if channels != self.stem_filters * 2 ** (i // 2):
                raise ValueError("channel_plan must double every second block starting from stem_filters")
        if any(b < 1 or b > self.num_blocks for b in self.downsample_after_blocks):
            raise ValueError("downsample_after_blocks must index blocks 1..num_blocks")
        for channels in [self.stem_channels] + self.block_channels:
            if channels < 1 or channels % self.se_reduction:
                raise ValueError(
                    f"se_reduction {self.se_reduction} must divide every scaled channel count, got {channels}"
                )
        return self

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_scale)))

    @property
    def stem_channels(self) -> int:
        return self.scaled(self.stem_filters)

    @property
    def block_channels(self) -> List[int]:
        return [self.scaled(c) for c in self.channel_plan]

    @property
    def block_strides(self) -> List[int]:
        return [2 if i + 1 in self.downsample_after_blocks else 1 for i in range(self.num_blocks)]

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1]

    @property
    def fused_dim(self) -> int:
        return self.feature_dim + self.demographic_dim


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)
    buffers: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()


def _bn_shapes(prefix: str, channels: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.gamma", (channels,)), (f"{prefix}.beta", (channels,))]


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """
    Learnable array shapes in canonical order.

    Convolutions and SE projections are bias-free; the classifier has a bias.
    """
    shapes = OrderedDict()
    stem = config.stem_channels
    shapes["stem.conv.weight"] = (stem, config.num_leads, config.stem_kernel)
    shapes.update(_bn_shapes("stem.bn", stem))

    c_in = stem
    for i, (c_out, stride) in enumerate(zip(config.block_channels, config.block_strides)):
        prefix = f"blocks.{i}"
        hidden = c_out // config.se_reduction
        shapes[f"{prefix}.conv1.weight"] = (c_out, c_in, config.block_kernel)
        shapes.update(_bn_shapes(f"{prefix}.bn1", c_out))
        shapes[f"{prefix}.conv2.weight"] = (c_out, c_out, config.block_kernel)
        shapes.update(_bn_shapes(f"{prefix}.bn2", c_out))
        shapes[f"{prefix}.se.w1"] = (hidden, c_out)
        shapes[f"{prefix}.se.w2"] = (c_out, hidden)
        if stride != 1 or c_in != c_out:
            shapes[f"{prefix}.shortcut.conv.weight"] = (c_out, c_in, 1)
            shapes.update(_bn_shapes(f"{prefix}.shortcut.bn", c_out))
        c_in = c_out

    shapes["classifier.weight"] = (config.num_classes, config.fused_dim)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape in param_shapes(config).values()))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """
    He-normal weights, unit BN scale, zero shifts and biases.

    Args:
        config (ModelConfig): Architecture
        rng (np.random.Generator): Seeded random source

    Returns:
        ModelParams: Fresh parameters with running stats at mean 0, variance 1
    """
    params = ModelParams(config=config)
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            # fan_in is every axis but the output one
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params.tensors[name] = Tensor(data, requires_grad=True, name=name)

        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            params.buffers[f"{prefix}.running_mean"] = np.zeros(shape)
            params.buffers[f"{prefix}.running_var"] = np.ones(shape)
    return params


def feature_extractor(
    signal,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator = None,
    se_bypass: bool = False,
    gate_log: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """
    Stem convolution, BN, ReLU and max-pool, the residual stack, then global average pooling.

    Args:
        signal: (B, 12, T) array or Tensor
        params (ModelParams): Parameters
        mode (str): "train" or "eval"
        rng (np.random.Generator, optional): Dropout random source
        se_bypass (bool): Force every SE gate to 1
        gate_log (List[np.ndarray], optional): Receives SE gate values per block

    Returns:
        Tensor: Deep features of shape (B, feature_dim)
    """
    config = params.config
    x = ops.as_tensor(signal)
    if x.data.ndim != 3 or x.shape[1] != config.num_leads:
        raise ShapeMismatch(f"feature_extractor expects (B, {config.num_leads}, T), got {x.shape}")
    training = mode == "train"

    x = ops.conv1d(x, params.tensors["stem.conv.weight"], stride=1, padding=config.stem_kernel // 2)
    x = ops.relu(batch_norm(x, params, "stem.bn", training))
    x = ops.max_pool1d(x, config.pool_kernel, config.pool_stride, config.pool_padding)

    for i, stride in enumerate(config.block_strides):
        x = res_block(x, params, f"blocks.{i}", stride, training, rng, se_bypass, gate_log)

    return ops.global_avg_pool(x)


def forward(
    signal,
    demographics,
    params: ModelParams,
    mode: str = "eval",
    rng: np.random.Generator = None,
    se_bypass: bool = False,
    gate_log: Optional[List[np.ndarray]] = None,
) -> Tuple[np.ndarray, Tensor]:
    """
    Full network: deep features fused with demographics, dense layer, sigmoid.

    Args:
        signal: (B, 12, T) array or Tensor
        demographics: (B, demographic_dim) array or Tensor
        params (ModelParams): Parameters
        mode (str): "train" or "eval"

    Returns:
        Tuple[np.ndarray, Tensor]: Probabilities (B, classes) and logits for the fused loss
    """
    config = params.config
    demo = ops.as_tensor(demographics)
    features = feature_extractor(signal, params, mode, rng, se_bypass, gate_log)
    if demo.shape != (features.shape[0], config.demographic_dim):
        raise ShapeMismatch(f"demographics must be ({features.shape[0]}, {config.demographic_dim}), got {demo.shape}")

    fused = ops.concat([features, demo], axis=1)
    logits = ops.dense(fused, params.tensors["classifier.weight"], params.tensors["classifier.bias"])
    probabilities = ops.sigmoid(logits).data
    return probabilities, logits


class SEResNet:
    def __init__(self, config: ModelConfig = None, params: ModelParams = None, seed: int = 0):
        """
        Initialize the SEResNet around a parameter collection.

        Args:
            config (ModelConfig, optional): Architecture, default when omitted
            params (ModelParams, optional): Existing parameters; freshly initialized otherwise
            seed (int): Seed for fresh initialization
        """
        if params is None:
            config = config or ModelConfig()
            params = init_params(config, np.random.default_rng(seed))
        self.params = params
        self.config = params.config
        self.last_gates: List[np.ndarray] = []
        self.logger = logging.getLogger(__name__)
        self.logger.debug(f"SEResNet with {self.params.count()} learnable values")

    def forward(self, signal, demographics, mode: str = "eval", rng: np.random.Generator = None,
                se_bypass: bool = False) -> Tuple[np.ndarray, Tensor]:
        self.last_gates = []
        return forward(signal, demographics, self.params, mode, rng, se_bypass, self.last_gates)

    def predict_proba(self, signals: np.ndarray, demographics: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """
        Eval-mode probabilities for a stack of inputs, processed in batches.

        Args:
            signals (np.ndarray): (N, 12, T) inputs
            demographics (np.ndarray): (N, demographic_dim) features
            batch_size (int): Rows per forward pass

        Returns:
            np.ndarray: (N, classes) probabilities
        """
        outputs = []
        for start in range(0, len(signals), batch_size):
            probabilities, _ = forward(signals[start:start + batch_size], demographics[start:start + batch_size],
                                       self.params, mode="eval")
            outputs.append(probabilities)
        return np.concatenate(outputs, axis=0)

    def parameters(self) -> List[Tensor]:
        return self.params.parameters()

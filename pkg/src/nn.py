"""Parameterized layers built on the tensor engine."""

import math
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .config import ConfigurationError
from .tensor import (
    Tensor, TensorLike, ShapeError, as_tensor, conv2d, conv_transpose2d, gelu,
    layer_norm, relu, softmax,
)


class Parameter(Tensor):
    """A trainable (or frozen) tensor owned by a Module."""

    __slots__ = ("frozen",)

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen, name=name)
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _named(value, path: str) -> Iterator[Tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _named(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _named(item, f"{path}.{key}")


class Module:
    """
    Base class for layers. Parameters are discovered by walking attributes,
    lists and dicts in insertion order, which fixes their dotted names.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attribute, value in vars(self).items():
            yield from _named(value, f"{prefix}{attribute}")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def assign_names(self, prefix: str = "") -> None:
        for name, parameter in self.named_parameters(prefix):
            parameter.name = name

    def freeze(self) -> None:
        for parameter in self.parameters():
            parameter.freeze()

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int,
                   gain: float = math.sqrt(6.0)) -> np.ndarray:
    """Uniform(-b, b) with b = gain / sqrt(fan_in)."""
    bound = gain / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x @ W + b with W stored as [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, gain: float = math.sqrt(3.0), zero_init: bool = False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init:
            weight = np.zeros((in_features, out_features))
        else:
            weight = fan_in_uniform(rng, (in_features, out_features), in_features, gain)
        self.weight = Parameter(weight)
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, gain: float = math.sqrt(6.0)):
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(fan_in_uniform(rng, shape, fan_in, gain))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: TensorLike) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed convolution with weight [Cin, Cout, k, k]."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        self.stride = stride
        self.padding = padding
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        fan_in = max(in_channels * kernel_size * kernel_size // (stride * stride), 1)
        self.weight = Parameter(fan_in_uniform(rng, shape, fan_in, gain=math.sqrt(3.0)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: TensorLike) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: TensorLike) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


def multi_head_self_attention(x: TensorLike, heads: int, query: Linear, key: Linear, value: Linear,
                              output: Linear) -> Tuple[Tensor, np.ndarray]:
    """
    Scaled dot-product self-attention over tokens.

    Args:
        x: Tokens of shape [B, N, D].
        heads: Number of heads; must divide D.
        query, key, value, output: Projections D -> D.

    Returns:
        tuple: (output tokens [B, N, D], attention weights [B, heads, N, N])

    Raises:
        ConfigurationError: If D is not divisible by heads.
        ShapeError: If x is not 3-D.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"attention expects [B, N, D], got {x.shape}")
    batch, tokens, dim = x.shape
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"token dim {dim} is not divisible by {heads} heads")
    head_dim = dim // heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(batch, tokens, heads, head_dim).transpose(0, 2, 1, 3)

    q, k, v = split(query(x)), split(key(x)), split(value(x))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    context = (weights @ v).transpose(0, 2, 1, 3).reshape(batch, tokens, dim)
    return output(context), weights.data


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"token dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: TensorLike) -> Tensor:
        out, self.last_attention = multi_head_self_attention(
            x, self.heads, self.query, self.key, self.value, self.output)
        return out


class TransformerBlock(Module):
    """Pre-norm block: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attention = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp_in = Linear(dim, dim * mlp_ratio, rng)
        self.mlp_out = Linear(dim * mlp_ratio, dim, rng)

    def forward(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        x = x + self.attention(self.norm1(x))
        return x + self.mlp_out(gelu(self.mlp_in(self.norm2(x))))


def tokens_from_map(feature_map: Tensor) -> Tensor:
    """[B, C, h, w] -> [B, h*w, C]."""
    batch, channels, height, width = feature_map.shape
    return feature_map.reshape(batch, channels, height * width).transpose(0, 2, 1)


def map_from_tokens(tokens: Tensor, height: int, width: int) -> Tensor:
    """[B, h*w, C] -> [B, C, h, w]."""
    batch, count, channels = tokens.shape
    if count != height * width:
        raise ShapeError(f"{count} tokens cannot form a {height}x{width} map")
    return tokens.transpose(0, 2, 1).reshape(batch, channels, height, width)


class SpatialTransformer(Module):
    """Runs a TransformerBlock over the pixels of a feature map."""

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        self.block = TransformerBlock(channels, heads, rng)

    def forward(self, feature_map: TensorLike) -> Tensor:
        feature_map = as_tensor(feature_map)
        if feature_map.ndim != 4:
            raise ShapeError(f"expected [B, C, h, w], got {feature_map.shape}")
        height, width = feature_map.shape[2:]
        return map_from_tokens(self.block(tokens_from_map(feature_map)), height, width)


class ResidualBlock(Module):
    """relu(skip(x) + conv2(relu(conv1(x)))) with 3x3 convs; skip is 1x1 when widths differ."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1, gain=math.sqrt(6.0) / 4)
        self.skip = Conv2d(in_channels, out_channels, 1, rng) if in_channels != out_channels else None

    def forward(self, x: TensorLike) -> Tensor:
        x = as_tensor(x)
        shortcut = self.skip(x) if self.skip is not None else x
        return relu(shortcut + self.conv2(relu(self.conv1(x))))

"""Global feature extractor: frozen ViT taps, token reduction, prompt conditioning, grid projection."""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .config import ConfigurationError
from .nn import Conv2d, ConvTranspose2d, Linear, Module, Parameter, TransformerBlock
from .tensor import Tensor, TensorLike, ShapeError, as_tensor, concat, no_grad

GLOBAL_CHANNELS = 64


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    depth: int = 6
    token_dim: int = 128
    heads: int = 4
    tap_layers: Tuple[int, ...] = (2, 4, 6)
    reduce_dim: int = 64

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"gfe.image_size {self.image_size} is not divisible by gfe.patch_size {self.patch_size}")
        if not self.tap_layers or any(not 1 <= j <= self.depth for j in self.tap_layers):
            raise ConfigurationError(f"gfe.tap_layers {self.tap_layers} must lie in [1, {self.depth}]")
        if len(set(self.tap_layers)) != len(self.tap_layers):
            raise ConfigurationError(f"gfe.tap_layers {self.tap_layers} has duplicates")
        if self.token_dim % self.heads:
            raise ConfigurationError(f"gfe.token_dim {self.token_dim} not divisible by gfe.heads {self.heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2 + 1

    @classmethod
    def desk(cls) -> "ViTConfig":
        return cls()

    @classmethod
    def paper(cls) -> "ViTConfig":
        return cls(image_size=352, patch_size=16, depth=12, token_dim=768, heads=12,
                   tap_layers=(3, 6, 9), reduce_dim=64)


class VisionTransformer(Module):
    """Patch embedding, class token, learned positions and pre-norm blocks; frozen after init."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator):
        self.config = config
        self.patch_embed = Conv2d(3, config.token_dim, config.patch_size, rng, stride=config.patch_size)
        self.class_token = Parameter(rng.normal(0.0, 0.02, (1, 1, config.token_dim)))
        self.position_embedding = Parameter(rng.normal(0.0, 0.02, (1, config.num_tokens, config.token_dim)))
        self.blocks = [TransformerBlock(config.token_dim, config.heads, rng) for _ in range(config.depth)]
        self.freeze()

    def forward(self, images: TensorLike) -> List[Tensor]:
        images = as_tensor(images)
        batch = images.shape[0]
        patches = self.patch_embed(images)
        tokens = patches.reshape(batch, self.config.token_dim, -1).transpose(0, 2, 1)
        cls = np.repeat(self.class_token.data, batch, axis=0)
        x = concat([cls, tokens], axis=1) + self.position_embedding
        taps = []
        last = max(self.config.tap_layers)
        for depth, block in enumerate(self.blocks[:last], start=1):
            x = block(x)
            if depth in self.config.tap_layers:
                taps.append((depth, x))
        return [z for _, z in sorted(taps, key=lambda t: t[0])]


def vit_forward(images: TensorLike, config: ViTConfig, backbone: VisionTransformer) -> List[Tensor]:
    """
    Token stacks Z(j), one per tap layer in layer order.

    Raises:
        ShapeError: If images are not [B, 3, image_size, image_size].
    """
    images = as_tensor(images)
    expected = (3, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"ViT expects images [B, {expected[0]}, {expected[1]}, {expected[2]}], got {images.shape}")
    with no_grad():
        return backbone(images)


def reduce_aggregate(token_stacks: Sequence[TensorLike], reducers: Sequence[Linear]) -> Tensor:
    """A = sum_j W(j) Z(j)[:, 1:, :] with the class token dropped."""
    stacks = [as_tensor(z) for z in token_stacks]
    if not stacks or len(stacks) != len(reducers):
        raise ShapeError(f"{len(stacks)} token stacks for {len(reducers)} reducers")
    if len({z.shape for z in stacks}) != 1:
        raise ShapeError(f"token stacks differ in shape: {[z.shape for z in stacks]}")
    total = None
    for z, reducer in zip(stacks, reducers):
        reduced = reducer(z[:, 1:, :])
        total = reduced if total is None else total + reduced
    return total


class TokenConditioner(Module):
    """c = W_c e_c; scale = W_mul c; shift = W_add c."""

    def __init__(self, embed_dim: int, reduce_dim: int, rng: np.random.Generator):
        self.embed_dim = embed_dim
        self.context = Linear(embed_dim, reduce_dim, rng, bias=False)
        self.scale = Linear(reduce_dim, reduce_dim, rng, gain=0.1)
        self.shift = Linear(reduce_dim, reduce_dim, rng, gain=0.1)
        self.scale.bias.data[:] = 1.0


def condition_tokens(reduced: TensorLike, e_c: TensorLike, conditioner: TokenConditioner) -> Tensor:
    """
    Scale and shift every reduced token by vectors derived from the global prompt.

    Args:
        reduced: A of shape [B, N-1, r].
        e_c: Global prompt embedding [d] or [B, d].
        conditioner: Holds W_c, W_mul and W_add.

    Returns:
        Tensor of the same shape as A.
    """
    reduced, e_c = as_tensor(reduced), as_tensor(e_c)
    if e_c.ndim == 1:
        e_c = e_c.reshape(1, -1)
    if e_c.shape[-1] != conditioner.embed_dim:
        raise ShapeError(f"global embedding must have length {conditioner.embed_dim}, got {e_c.shape}")
    if e_c.shape[0] not in (1, reduced.shape[0]):
        raise ShapeError(f"embedding batch {e_c.shape[0]} does not match tokens {reduced.shape[0]}")
    c = conditioner.context(e_c)
    scale = conditioner.scale(c).reshape(e_c.shape[0], 1, -1)
    shift = conditioner.shift(c).reshape(e_c.shape[0], 1, -1)
    return reduced * scale + shift


class GridProjector(Module):
    """
    Learned 2x upsampling from the token grid to the global feature map.

    Args:
        reduce_dim: Token width r after reduction; the input channel count.
        rng: Generator for the kernel initialization.
        channels: Output channels of F_g.
    """

    def __init__(self, reduce_dim: int, rng: np.random.Generator, channels: int = GLOBAL_CHANNELS):
        self.upsample = ConvTranspose2d(reduce_dim, channels, 2, rng, stride=2)


def project_to_grid(tokens: TensorLike, projector: GridProjector) -> Tensor:
    """
    Lay conditioned tokens out on their patch grid and upsample it by 2.

    Args:
        tokens: Conditioned tokens [B, g*g, r], class token already dropped.
        projector: Holds the stride-2 transposed conv.

    Returns:
        Tensor: F_g of shape [B, 64, 2g, 2g].

    Raises:
        ShapeError: If the token count is not a perfect square.
    """
    tokens = as_tensor(tokens)
    batch, count, dim = tokens.shape
    side = math.isqrt(count)
    if side * side != count:
        raise ShapeError(f"{count} tokens do not form a square grid")
    grid = tokens.transpose(0, 2, 1).reshape(batch, dim, side, side)
    return projector.upsample(grid)


class GlobalFeatureExtractor(Module):
    """Frozen ViT taps, reduced and summed, conditioned on e_c and projected to F_g."""

    def __init__(self, config: ViTConfig, embed_dim: int, rng: np.random.Generator):
        self.config = config
        self.backbone = VisionTransformer(config, rng)
        self.reduce = [Linear(config.token_dim, config.reduce_dim, rng, bias=False) for _ in config.tap_layers]
        self.condition = TokenConditioner(embed_dim, config.reduce_dim, rng)
        self.project = GridProjector(config.reduce_dim, rng)

    @property
    def grid_size(self) -> int:
        return 2 * self.config.grid

    def forward(self, images: TensorLike, e_c: TensorLike) -> Tensor:
        stacks = vit_forward(images, self.config, self.backbone)
        reduced = reduce_aggregate(stacks, self.reduce)
        return project_to_grid(condition_tokens(reduced, e_c, self.condition), self.project)

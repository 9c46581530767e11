"""Semantic feature adjustment: prompt-conditioned channel-wise affine modulation."""

from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .nn import Linear, Module
from .tensor import Tensor, TensorLike, ShapeError, add, as_tensor, gelu


@dataclass
class ModulationParams:
    """gamma and beta of shape [B, C, 1, 1]."""
    gamma: Tensor
    beta: Tensor

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


class StageProjector(Module):
    """
    Two-layer perceptron d -> d -> 2C for one modulated stage.

    The output layer starts at zero, so gamma = 1 and beta = 0 at initialization.
    """

    def __init__(self, stage: str, embed_dim: int, channels: int, rng: np.random.Generator):
        self.stage = stage
        self.embed_dim = embed_dim
        self.channels = channels
        self.hidden = Linear(embed_dim, embed_dim, rng)
        self.output = Linear(embed_dim, 2 * channels, rng, zero_init=True)

    def forward(self, e: TensorLike) -> Tensor:
        return self.output(gelu(self.hidden(e)))


def predict_modulation(e: TensorLike, projector: StageProjector) -> ModulationParams:
    """
    Map an embedding to per-channel scale and shift.

    Args:
        e: Embedding of shape [d] or [B, d].
        projector: Projector for the target stage.

    Returns:
        ModulationParams with gamma = 1 + z[:, :C] and beta = z[:, C:].

    Raises:
        ShapeError: If the embedding length differs from the projector input.
    """
    e = as_tensor(e)
    if e.ndim == 1:
        e = e.reshape(1, -1)
    if e.ndim != 2 or e.shape[1] != projector.embed_dim:
        raise ShapeError(f"stage '{projector.stage}' expects embeddings of length {projector.embed_dim}, "
                         f"got shape {e.shape}")
    z = projector(e)
    channels = projector.channels
    batch = e.shape[0]
    gamma = (z[:, :channels] + 1.0).reshape(batch, channels, 1, 1)
    beta = z[:, channels:].reshape(batch, channels, 1, 1)
    return ModulationParams(gamma, beta)


def apply_affine(feature_map: TensorLike, m: ModulationParams) -> Tensor:
    """F_hat = gamma * F + beta, broadcast over the spatial dims."""
    feature_map = as_tensor(feature_map)
    if feature_map.ndim != 4 or feature_map.shape[1] != m.channels:
        raise ShapeError(f"modulation has {m.channels} channels, feature map has shape {feature_map.shape}")
    if m.gamma.shape[0] not in (1, feature_map.shape[0]):
        raise ShapeError(f"modulation batch {m.gamma.shape[0]} does not match features {feature_map.shape[0]}")
    return feature_map * m.gamma + m.beta


def apply_residual(modulated: TensorLike, feature_map: TensorLike) -> Tensor:
    modulated, feature_map = as_tensor(modulated), as_tensor(feature_map)
    if modulated.shape != feature_map.shape:
        raise ShapeError(f"residual needs equal shapes, got {modulated.shape} and {feature_map.shape}")
    return add(modulated, feature_map)


GLOBAL_STAGE = "global"
LOCAL_STAGES = ("enc4", "dec4", "dec3", "dec2")


class SemanticFeatureAdjustment(Module):
    """
    One projector per modulated stage: the global feature map plus the four
    local stages. The residual skip is configured per branch.
    """

    def __init__(self, embed_dim: int, stage_channels: Dict[str, int], rng: np.random.Generator,
                 residual_global: bool = False, residual_local: bool = True):
        self.residual_global = residual_global
        self.residual_local = residual_local
        self.projectors = {stage: StageProjector(stage, embed_dim, channels, rng)
                           for stage, channels in stage_channels.items()}

    @property
    def stages(self) -> Sequence[str]:
        return tuple(self.projectors)

    def modulation(self, stage: str, e: TensorLike) -> ModulationParams:
        if stage not in self.projectors:
            raise ShapeError(f"no SFA projector for stage '{stage}'")
        return predict_modulation(e, self.projectors[stage])

    def apply(self, stage: str, feature_map: TensorLike, m: ModulationParams) -> Tensor:
        modulated = apply_affine(feature_map, m)
        residual = self.residual_global if stage == GLOBAL_STAGE else self.residual_local
        return apply_residual(modulated, feature_map) if residual else modulated

    def modulate(self, stage: str, feature_map: TensorLike, e: TensorLike) -> Tensor:
        return self.apply(stage, feature_map, self.modulation(stage, e))


def sfa_schedule(e_local: TensorLike, sfa: Optional[SemanticFeatureAdjustment]) -> Dict[str, ModulationParams]:
    """Modulation for every local stage (enc4, dec4, dec3, dec2), all from the local embedding."""
    if sfa is None:
        return {}
    return {stage: sfa.modulation(stage, e_local) for stage in LOCAL_STAGES if stage in sfa.projectors}

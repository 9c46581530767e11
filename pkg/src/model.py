"""Full network assembly, segmentation loss and the trained-state container."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .config import ConfigurationError, RunConfig
from .gfe import GLOBAL_CHANNELS, GlobalFeatureExtractor, ViTConfig
from .lfe import LFEConfig, LocalFeatureExtractor
from .nn import Conv2d, Module, Parameter, ResidualBlock
from .prompts import PromptPair, SizeBins, TextEncoder, TextEncoderConfig
from .sfa import GLOBAL_STAGE, SemanticFeatureAdjustment
from .tensor import (
    Tensor, TensorLike, ShapeError, as_tensor, bilinear_upsample, binary_cross_entropy_with_logits,
    concat_channels, no_grad, sigmoid,
)
from .validator import ValidationError

FEATURE_MAPS = (
    "F_g", "F_g_mod", "F_l", "F_l_mod", "F_cat", "F_1", "F_fused",
    "enc1", "enc2", "enc3", "enc4", "enc5", "enc4_star", "center", "dec4", "dec3", "dec2", "dec1",
)
DEFAULT_CAM_LAYER = "F_fused"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of one XBusNet: profile-sized branches, SFA residual flags and ablation switches."""
    profile: str = "desk"
    seed: int = 0
    vit: ViTConfig = field(default_factory=ViTConfig.desk)
    lfe: LFEConfig = field(default_factory=LFEConfig.desk)
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)
    residual_global: bool = False
    residual_local: bool = True
    use_gfe: bool = True
    use_lfe: bool = True
    use_sfa: bool = True

    def __post_init__(self):
        if not (self.use_gfe or self.use_lfe):
            raise ConfigurationError("At least one of model.use_gfe / model.use_lfe must be enabled")
        if self.vit.image_size % 32:
            raise ConfigurationError(f"image size {self.vit.image_size} must be divisible by 32")

    @property
    def image_size(self) -> int:
        return self.vit.image_size

    @property
    def grid(self) -> Tuple[int, int]:
        side = 2 * self.vit.grid
        return side, side

    @property
    def fusion_channels(self) -> int:
        return GLOBAL_CHANNELS * self.use_gfe + self.lfe.out_channels * self.use_lfe

    @classmethod
    def for_profile(cls, profile: str, seed: int, **overrides) -> "ModelConfig":
        """
        Network settings for a named profile.

        Args:
            profile: "desk" or "paper".
            seed: Initialization seed.
            **overrides: Any other ModelConfig field, e.g. use_sfa=False.

        Returns:
            ModelConfig: Profile-sized ViT and LFE settings.

        Raises:
            ConfigurationError: If the profile is unknown.
        """
        if profile == "desk":
            return cls(profile=profile, seed=seed, vit=ViTConfig.desk(), lfe=LFEConfig.desk(), **overrides)
        if profile == "paper":
            return cls(profile=profile, seed=seed, vit=ViTConfig.paper(), lfe=LFEConfig.paper(), **overrides)
        raise ConfigurationError(f"Unknown profile '{profile}'")

    @classmethod
    def from_run_config(cls, config: RunConfig) -> "ModelConfig":
        """Profile defaults, then any architecture keys set in the run config."""
        base = cls.for_profile(config.profile, config.seed if config.seed is not None else 0)
        vit = base.vit
        vit_overrides = {
            "image_size": config.image_size, "patch_size": config.patch_size, "depth": config.vit_depth,
            "token_dim": config.token_dim, "heads": config.vit_heads, "tap_layers": config.tap_layers,
            "reduce_dim": config.reduce_dim,
        }
        vit_values = {**asdict(vit), **{k: v for k, v in vit_overrides.items() if v is not None}}
        vit_values["tap_layers"] = tuple(vit_values["tap_layers"])
        lfe_values = asdict(base.lfe)
        if config.lfe_widths is not None:
            lfe_values["widths"] = tuple(config.lfe_widths)
        if config.lfe_heads is not None:
            lfe_values["heads"] = config.lfe_heads
        lfe_values["widths"] = tuple(lfe_values["widths"])
        return cls(
            profile=config.profile, seed=base.seed, vit=ViTConfig(**vit_values), lfe=LFEConfig(**lfe_values),
            residual_global=config.residual_global, residual_local=config.residual_local,
            use_gfe=config.use_gfe, use_lfe=config.use_lfe, use_sfa=config.use_sfa,
        )

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values["vit"]["tap_layers"] = list(self.vit.tap_layers)
        values["lfe"]["widths"] = list(self.lfe.widths)
        return values

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        values = dict(values)
        vit = dict(values.pop("vit"))
        vit["tap_layers"] = tuple(vit["tap_layers"])
        lfe = dict(values.pop("lfe"))
        lfe["widths"] = tuple(lfe["widths"])
        text = TextEncoderConfig(**values.pop("text"))
        return cls(vit=ViTConfig(**vit), lfe=LFEConfig(**lfe), text=text, **values)


class FusionHead(Module):
    """Two residual blocks and a 1x1 conv to one logit channel."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.block1 = ResidualBlock(channels, channels, rng)
        self.block2 = ResidualBlock(channels, channels, rng)
        self.classifier = Conv2d(channels, 1, 1, rng)


def _component_rng(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng([seed, component])


class XBusNet(Module):
    """
    Dual-branch text-conditioned segmentation network.

    The global branch (frozen ViT taps, reduction, conditioning on the global
    prompt) and the local branch (residual U-Net conditioned on the local prompt
    through SFA) are concatenated and fused into one logit map.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.use_sfa = config.use_sfa
        self.text_encoder = TextEncoder(config.text, _component_rng(config.seed, 0))
        self.gfe = GlobalFeatureExtractor(config.vit, config.text.dim, _component_rng(config.seed, 1)) \
            if config.use_gfe else None
        self.lfe = LocalFeatureExtractor(config.lfe, _component_rng(config.seed, 2)) if config.use_lfe else None
        if config.use_sfa:
            stages: Dict[str, int] = {}
            if config.use_gfe:
                stages[GLOBAL_STAGE] = GLOBAL_CHANNELS
            if config.use_lfe:
                stages.update(self.lfe.stage_channels)
            self.sfa = SemanticFeatureAdjustment(config.text.dim, stages, _component_rng(config.seed, 3),
                                                 config.residual_global, config.residual_local)
        else:
            self.sfa = None
        self.fusion = FusionHead(config.fusion_channels, _component_rng(config.seed, 4))
        self.assign_names()

    def parameter_groups(self) -> Dict[str, List[Parameter]]:
        """Parameters keyed by group: gfe.backbone, gfe.reduce, ..., lfe, sfa, fusion, text_encoder."""
        groups: Dict[str, List[Parameter]] = {}
        for name, parameter in self.named_parameters():
            head = name.split(".")
            key = ".".join(head[:2]) if head[0] == "gfe" else head[0]
            groups.setdefault(key, []).append(parameter)
        return groups

    def forward(self, images: TensorLike, e_global: TensorLike, e_local: TensorLike,
                features: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """
        Logits for a batch.

        Args:
            images: [B, 3, H, W] with H = W = image size of the profile.
            e_global: Global prompt embeddings [B, d] (or [d], shared).
            e_local: Local prompt embeddings [B, d] (or [d], shared).
            features: Optional dict receiving named feature maps (see FEATURE_MAPS).

        Returns:
            Logits [B, 1, H, W].

        Raises:
            ShapeError: On a wrong image size or a grid mismatch between branches.
        """
        images = as_tensor(images)
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1:] != (3, size, size):
            raise ShapeError(f"model expects images [B, 3, {size}, {size}], got {images.shape}")
        sfa = self.sfa if self.use_sfa else None
        grid = self.config.grid
        captured: Dict[str, Tensor] = {}
        branches = []
        if self.gfe is not None:
            global_map = self.gfe(images, e_global)
            captured["F_g"] = global_map
            if sfa is not None:
                global_map = sfa.modulate(GLOBAL_STAGE, global_map, e_global)
            captured["F_g_mod"] = global_map
            branches.append(global_map)
        if self.lfe is not None:
            local_map = self.lfe(images, e_local, sfa, grid, captured)
            captured["F_l"] = local_map
            captured["F_l_mod"] = local_map
            branches.append(local_map)
        if len({b.shape[2:] for b in branches}) != 1:
            raise ShapeError(f"branch grids differ: {[b.shape for b in branches]}")

        fused_input = concat_channels(branches) if len(branches) > 1 else branches[0]
        first = self.fusion.block1(fused_input)
        fused = self.fusion.block2(first)
        logits = bilinear_upsample(self.fusion.classifier(fused), (images.shape[2], images.shape[3]))
        captured.update({"F_cat": fused_input, "F_1": first, "F_fused": fused})
        if features is not None:
            features.update(captured)
        return logits

    def predict_proba(self, images: TensorLike, prompts: List[PromptPair]) -> np.ndarray:
        """Probability maps [B, 1, H, W] without recording a graph."""
        e_global = np.stack([p.global_embedding for p in prompts])
        e_local = np.stack([p.local_embedding for p in prompts])
        with no_grad():
            return expit(self.forward(images, e_global, e_local).data)


def segmentation_loss(logits: TensorLike, mask: np.ndarray, bce_weight: float = 0.5,
                      dice_weight: float = 0.5, eps: float = 1e-8) -> Tensor:
    """
    bce_weight * BCE-with-logits + dice_weight * soft Dice loss.

    Soft Dice is computed per image, 1 - (2 sum(p m) + eps) / (sum p + sum m + eps),
    and averaged over the batch.

    Raises:
        ValidationError: If the mask holds values other than 0 and 1.
        ShapeError: If shapes differ.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != logits.shape:
        raise ShapeError(f"mask shape {mask.shape} != logits shape {logits.shape}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValidationError("mask values must be in {0, 1}")
    axes = tuple(range(1, logits.ndim))
    probabilities = sigmoid(logits)
    intersection = (probabilities * mask).sum(axis=axes)
    denominator = probabilities.sum(axis=axes) + mask.sum(axis=axes)
    dice = 1.0 - (intersection * 2.0 + eps) / (denominator + eps)
    return binary_cross_entropy_with_logits(logits, mask) * bce_weight + dice.mean() * dice_weight


@dataclass
class ModelState:
    """
    A network with the fold-level artifacts needed to run it.

    Attributes:
        model: The assembled XBusNet.
        seed: Seed the network was initialized from.
        size_bins: Size thresholds fit on the training fold; inference needs them to verbalize size.
        fold: Cross-validation fold index, or None for a single run.
        run_config: Effective RunConfig.to_dict() of the training run.
        loss_trace: Per-step training loss.
    """
    model: XBusNet
    seed: int
    size_bins: Optional[SizeBins] = None
    fold: Optional[int] = None
    run_config: Dict[str, Any] = field(default_factory=dict)
    loss_trace: List[float] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def frozen_parameters(self) -> List[Parameter]:
        return [p for p in self.model.parameters() if p.frozen]

    def trainable_parameters(self) -> List[Parameter]:
        return self.model.trainable_parameters()

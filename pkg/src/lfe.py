"""Local feature extractor: residual encoder, deep transformer blocks, SFA-modulated U-Net decoder."""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .config import ConfigurationError
from .nn import Conv2d, Module, ResidualBlock, SpatialTransformer
from .sfa import ModulationParams, SemanticFeatureAdjustment, sfa_schedule
from .tensor import Tensor, TensorLike, ShapeError, as_tensor, bilinear_upsample, concat_channels, relu

LOCAL_CHANNELS = 32
STAGES = 5


@dataclass(frozen=True)
class LFEConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128, 256)
    heads: int = 4
    out_channels: int = LOCAL_CHANNELS

    def __post_init__(self):
        if len(self.widths) != STAGES or any(w < 1 for w in self.widths):
            raise ConfigurationError(f"lfe.widths needs {STAGES} positive widths, got {self.widths}")
        for width in self.widths[3:]:
            if width % self.heads:
                raise ConfigurationError(f"lfe width {width} not divisible by lfe.heads {self.heads}")

    @classmethod
    def desk(cls) -> "LFEConfig":
        return cls()

    @classmethod
    def paper(cls) -> "LFEConfig":
        return cls(widths=(64, 256, 512, 1024, 2048), heads=8)


@dataclass
class EncoderPyramid:
    enc1: Tensor
    enc2: Tensor
    enc3: Tensor
    enc4: Tensor
    enc5: Tensor


class EncoderStage(Module):
    """Stride-2 3x3 conv followed by a residual block."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.down = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)
        self.block = ResidualBlock(out_channels, out_channels, rng)

    def forward(self, x: TensorLike) -> Tensor:
        return self.block(relu(self.down(x)))


class UpBlock(Module):
    """Bilinear 2x upsample, concat the skip, then two 3x3 conv + ReLU."""

    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.skip_channels = skip_channels
        self.conv1 = Conv2d(in_channels + skip_channels, out_channels, 3, rng, padding=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1)

    def forward(self, x: TensorLike, skip: TensorLike) -> Tensor:
        x, skip = as_tensor(x), as_tensor(skip)
        if x.shape[1] != self.in_channels or skip.shape[1] != self.skip_channels:
            raise ShapeError(f"up block expects {self.in_channels}+{self.skip_channels} channels, "
                             f"got {x.shape[1]}+{skip.shape[1]}")
        up = bilinear_upsample(x, skip.shape[2:])
        return relu(self.conv2(relu(self.conv1(concat_channels([up, skip])))))


class LocalFeatureExtractor(Module):
    """
    Residual encoder, transformer blocks at enc4 and the bottleneck, and a U-Net decoder
    emitting a 32-channel map at the global grid.
    """

    def __init__(self, config: LFEConfig, rng: np.random.Generator):
        self.config = config
        w1, w2, w3, w4, w5 = config.widths
        channels = (3,) + config.widths
        self.stages = [EncoderStage(channels[i], channels[i + 1], rng) for i in range(STAGES)]
        self.enc4_transformer = SpatialTransformer(w4, config.heads, rng)
        self.center_transformer = SpatialTransformer(w5, config.heads, rng)
        self.up4 = UpBlock(w5, w4, w4, rng)
        self.up3 = UpBlock(w4, w3, w3, rng)
        self.up2 = UpBlock(w3, w2, w2, rng)
        self.up1 = UpBlock(w2, w1, w1, rng)
        self.head = Conv2d(w1, config.out_channels, 1, rng)

    @property
    def stage_channels(self) -> Dict[str, int]:
        """Channel width of every SFA-modulated stage."""
        _, w2, w3, w4, _ = self.config.widths
        return {"enc4": w4, "dec4": w4, "dec3": w3, "dec2": w2}

    def encode(self, images: TensorLike) -> EncoderPyramid:
        """
        Run the five residual stages.

        Raises:
            ShapeError: If H or W is not divisible by 32.
        """
        images = as_tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"LFE expects images [B, 3, H, W], got {images.shape}")
        if images.shape[2] % 32 or images.shape[3] % 32:
            raise ShapeError(f"LFE input size {images.shape[2:]} must be divisible by 32")
        maps = []
        x = images
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return EncoderPyramid(*maps)

    def apply_deep_transformers(self, enc4: TensorLike, enc5: TensorLike) -> Tuple[Tensor, Tensor]:
        return self.enc4_transformer(enc4), self.center_transformer(enc5)

    def decode(self, pyramid: EncoderPyramid, center: TensorLike, modulations: Dict[str, ModulationParams],
               sfa: Optional[SemanticFeatureAdjustment], grid: Tuple[int, int],
               features: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """
        Decode to the 32-channel local feature map at the global grid.

        Args:
            pyramid: Encoder maps; enc4 is the transformer output.
            center: Transformer output at the bottleneck.
            modulations: Per-stage modulation from sfa_schedule; missing stages are left as is.
            sfa: Adjuster applying the modulation (and residual skip).
            grid: (h, w) of the global feature map.
            features: Optional dict collecting named intermediate maps.
        """
        def adjust(stage: str, feature_map: Tensor) -> Tensor:
            if sfa is None or stage not in modulations:
                return feature_map
            return sfa.apply(stage, feature_map, modulations[stage])

        enc4_star = adjust("enc4", pyramid.enc4)
        dec4 = adjust("dec4", self.up4(center, enc4_star))
        dec3 = adjust("dec3", self.up3(dec4, pyramid.enc3))
        dec2 = adjust("dec2", self.up2(dec3, pyramid.enc2))
        dec1 = self.up1(dec2, pyramid.enc1)
        local = bilinear_upsample(self.head(dec1), grid)
        if features is not None:
            features.update({"enc4_star": enc4_star, "center": center, "dec4": dec4, "dec3": dec3,
                             "dec2": dec2, "dec1": dec1})
        return local

    def forward(self, images: TensorLike, e_local: TensorLike, sfa: Optional[SemanticFeatureAdjustment],
                grid: Tuple[int, int], features: Optional[Dict[str, Tensor]] = None) -> Tensor:
        pyramid = self.encode(images)
        enc4, center = self.apply_deep_transformers(pyramid.enc4, pyramid.enc5)
        if features is not None:
            features.update({f"enc{i}": getattr(pyramid, f"enc{i}") for i in range(1, STAGES + 1)})
        pyramid = EncoderPyramid(pyramid.enc1, pyramid.enc2, pyramid.enc3, enc4, pyramid.enc5)
        return self.decode(pyramid, center, sfa_schedule(e_local, sfa), sfa, grid, features)

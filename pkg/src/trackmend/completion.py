"""Completion networks: spatial generator, temporal generator, discriminators.

Both generators keep frame shape. The spatial generator encodes a zero-masked
frame to quarter resolution (five 3x3 convolutions, stride 2 at the second and
fourth), widens its view with four dilated convolutions, and decodes back with
two transposed convolutions; output is tanh-bounded to (-1, 1). The temporal
generator runs the same encoder on the current frame and on the two adjacent
frames (the adjacent pair shares one encoder), matches patches with the
parameter-free temporal attention layer, and decodes the concatenated
features. Two refiner variants without attention (a widened plain autoencoder
and a concat-only three-encoder net) exist for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .attention import temporal_attention
from .data import Region, region_band

PROFILE_TINY = "tiny"
PROFILE_PAPER = "paper"

_ENCODER_STRIDES = (1, 2, 1, 2, 1)


@dataclass(frozen=True)
class GeneratorConfig:
    frame_size: tuple[int, int] = (64, 32)
    in_channels: int = 3
    channels: tuple[int, ...] = (32, 64, 64, 128, 128)
    dilations: tuple[int, ...] = (2, 4, 8, 16)
    decoder_channels: tuple[int, int] = (64, 32)

    def __post_init__(self) -> None:
        h, w = self.frame_size
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"frame size must be divisible by 4, got {h}x{w}")
        if len(self.channels) != len(_ENCODER_STRIDES):
            raise ValueError(f"encoder schedule must have {len(_ENCODER_STRIDES)} channel counts")

    @classmethod
    def for_profile(cls, profile: str, frame_size: tuple[int, int] | None = None) -> "GeneratorConfig":
        if profile == PROFILE_PAPER:
            return cls(frame_size=frame_size or (128, 64))
        if profile == PROFILE_TINY:
            return cls(
                frame_size=frame_size or (64, 32),
                channels=(16, 32, 32, 64, 64),
                decoder_channels=(32, 16),
            )
        raise ValueError(f"unknown profile {profile!r}")

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]


def encoder_receptive_field(config: GeneratorConfig) -> int:
    """Receptive field (input pixels) of the encoder plus dilated stack."""
    rf, jump = 1, 1
    for stride in _ENCODER_STRIDES:
        rf += 2 * jump
        jump *= stride
    for dilation in config.dilations:
        rf += 2 * dilation * jump
    return rf


class _Encoder(nn.Module):
    """Five 3x3 conv layers (stride 2 twice) plus the dilated stack, all ELU."""

    def __init__(self, config: GeneratorConfig, width_factor: int = 1):
        super().__init__()
        layers: list[nn.Module] = []
        prev = config.in_channels
        for out, stride in zip(config.channels, _ENCODER_STRIDES):
            out = out * width_factor
            layers += [nn.Conv2d(prev, out, kernel_size=3, stride=stride, padding=1), nn.ELU()]
            prev = out
        for dilation in config.dilations:
            layers += [
                nn.Conv2d(prev, prev, kernel_size=3, stride=1, padding=dilation, dilation=dilation),
                nn.ELU(),
            ]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class _Decoder(nn.Module):
    """Two x2 transposed convolutions, then a saturating 3-channel projection."""

    def __init__(self, config: GeneratorConfig, in_channels: int):
        super().__init__()
        d1, d2 = config.decoder_channels
        self.body = nn.Sequential(
            nn.ConvTranspose2d(in_channels, d1, kernel_size=4, stride=2, padding=1),
            nn.ELU(),
            nn.ConvTranspose2d(d1, d2, kernel_size=4, stride=2, padding=1),
            nn.ELU(),
            nn.Conv2d(d2, config.in_channels, kernel_size=3, stride=1, padding=1),
            nn.Tanh(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


def _check_frame_shape(x: torch.Tensor) -> None:
    h, w = x.shape[-2:]
    if h % 4 != 0 or w % 4 != 0:
        raise ValueError(f"generator input size must be divisible by 4, got {h}x{w}")


class SpatialGenerator(nn.Module):
    """Predict a full frame in (-1, 1) from a zero-masked frame."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.encoder = _Encoder(config)
        self.decoder = _Decoder(config, config.feature_channels)

    def forward(self, masked_frame: torch.Tensor) -> torch.Tensor:
        _check_frame_shape(masked_frame)
        return self.decoder(self.encoder(masked_frame))


class TemporalGenerator(nn.Module):
    """Refine a first-pass completion using the two adjacent unoccluded frames.

    The adjacent-frame encoder is shared between the previous and next frame,
    so symmetric inputs produce symmetric attention.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.current_encoder = _Encoder(config)
        self.adjacent_encoder = _Encoder(config)
        self.decoder = _Decoder(config, 3 * config.feature_channels)

    def forward(
        self,
        first_pass: torch.Tensor,
        previous: torch.Tensor,
        following: torch.Tensor,
        return_attention: bool = False,
    ):
        if first_pass.shape != previous.shape or first_pass.shape != following.shape:
            raise ValueError("the three input frames must share one shape")
        _check_frame_shape(first_pass)
        current = self.current_encoder(first_pass)
        prev_feat = self.adjacent_encoder(previous)
        next_feat = self.adjacent_encoder(following)
        attended_prev, weights_prev = temporal_attention(current, prev_feat, return_weights=True)
        attended_next, weights_next = temporal_attention(current, next_feat, return_weights=True)
        out = self.decoder(torch.cat([current, attended_prev, attended_next], dim=-3))
        if return_attention:
            return out, (weights_prev, weights_next)
        return out


class RefinerAutoencoder(nn.Module):
    """Ablation variant: plain autoencoder on the first pass, encoder widened 3x."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.encoder = _Encoder(config, width_factor=3)
        self.decoder = _Decoder(config, 3 * config.feature_channels)

    def forward(self, first_pass: torch.Tensor, previous=None, following=None) -> torch.Tensor:
        _check_frame_shape(first_pass)
        return self.decoder(self.encoder(first_pass))


class TemporalConcatRefiner(nn.Module):
    """Ablation variant: three encoders concatenated without the attention layer."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.current_encoder = _Encoder(config)
        self.adjacent_encoder = _Encoder(config)
        self.decoder = _Decoder(config, 3 * config.feature_channels)

    def forward(self, first_pass: torch.Tensor, previous: torch.Tensor, following: torch.Tensor) -> torch.Tensor:
        if first_pass.shape != previous.shape or first_pass.shape != following.shape:
            raise ValueError("the three input frames must share one shape")
        _check_frame_shape(first_pass)
        feats = [
            self.current_encoder(first_pass),
            self.adjacent_encoder(previous),
            self.adjacent_encoder(following),
        ]
        return self.decoder(torch.cat(feats, dim=-3))


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------

def discriminator_layers(input_size: tuple[int, int], profile: str) -> int:
    """Stride-2 layer count derived from resolution, capped per profile."""
    cap = 6 if profile == PROFILE_PAPER else 4
    return min(cap, int(math.log2(min(input_size))))


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: tuple[int, int]
    layers: int
    base_channels: int = 32
    max_channels: int = 256
    in_channels: int = 3

    @classmethod
    def for_profile(cls, profile: str, input_size: tuple[int, int]) -> "DiscriminatorConfig":
        layers = discriminator_layers(input_size, profile)
        if profile == PROFILE_PAPER:
            return cls(input_size=input_size, layers=layers, base_channels=64, max_channels=512)
        return cls(input_size=input_size, layers=layers)


class Discriminator(nn.Module):
    """Stride-2 conv stack plus a sigmoid fully-connected head: P(input is real)."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        h, w = config.input_size
        if min(h, w) < 2**config.layers:
            raise ValueError(
                f"spatial size {h}x{w} too small for {config.layers} stride-2 layers"
            )
        self.config = config
        layers: list[nn.Module] = []
        prev = config.in_channels
        for i in range(config.layers):
            out = min(config.base_channels * 2**i, config.max_channels)
            layers += [nn.Conv2d(prev, out, kernel_size=3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = out
            h, w = (h + 1) // 2, (w + 1) // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev * h * w, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.shape[-2:] != tuple(self.config.input_size):
            raise ValueError(
                f"expected {tuple(self.config.input_size)} input, got {tuple(images.shape[-2:])}"
            )
        feats = self.features(images)
        return torch.sigmoid(self.head(feats.flatten(1))).squeeze(-1)


def local_discriminator_input(
    images: torch.Tensor, regions: list[Region], output_size: tuple[int, int]
) -> torch.Tensor:
    """Crop each image's masked band and resize the crops to one common size."""
    if images.shape[0] != len(regions):
        raise ValueError("one region per image required")
    crops = []
    height = images.shape[-2]
    for img, region in zip(images, regions):
        lo, hi = region_band(region, height)
        crop = img[..., lo:hi, :].unsqueeze(0)
        crops.append(F.interpolate(crop, size=output_size, mode="bilinear", align_corners=False))
    return torch.cat(crops, dim=0)


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

TEMPORAL_ATTENTION = "attention"
TEMPORAL_AE = "ae"
TEMPORAL_TAE = "tae"
_TEMPORAL_CLASSES = {
    TEMPORAL_ATTENTION: TemporalGenerator,
    TEMPORAL_AE: RefinerAutoencoder,
    TEMPORAL_TAE: TemporalConcatRefiner,
}


@dataclass
class BundleOptions:
    profile: str = PROFILE_TINY
    frame_size: tuple[int, int] = (64, 32)
    use_temporal: bool = True
    temporal_variant: str = TEMPORAL_ATTENTION
    use_local_disc: bool = True
    use_global_disc: bool = True

    def __post_init__(self) -> None:
        if self.temporal_variant not in _TEMPORAL_CLASSES:
            raise ValueError(f"unknown temporal variant {self.temporal_variant!r}")

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "frame_size": list(self.frame_size),
            "use_temporal": self.use_temporal,
            "temporal_variant": self.temporal_variant,
            "use_local_disc": self.use_local_disc,
            "use_global_disc": self.use_global_disc,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "BundleOptions":
        payload = dict(payload)
        payload["frame_size"] = tuple(payload["frame_size"])
        return cls(**payload)


@dataclass
class CompletionBundle:
    """The trainable completion networks plus an optional frozen identity guider."""

    options: BundleOptions
    spatial: SpatialGenerator
    temporal: nn.Module | None = None
    local_disc: Discriminator | None = None
    global_disc: Discriminator | None = None
    guider: nn.Module | None = None

    def generator_parameters(self):
        params = list(self.spatial.parameters())
        if self.temporal is not None:
            params += list(self.temporal.parameters())
        return params

    def eval(self) -> "CompletionBundle":
        for module in (self.spatial, self.temporal, self.local_disc, self.global_disc, self.guider):
            if module is not None:
                module.eval()
        return self

    def state_dicts(self) -> dict:
        out = {"spatial": self.spatial.state_dict()}
        if self.temporal is not None:
            out["temporal"] = self.temporal.state_dict()
        if self.local_disc is not None:
            out["local_disc"] = self.local_disc.state_dict()
        if self.global_disc is not None:
            out["global_disc"] = self.global_disc.state_dict()
        return out

    def load_state_dicts(self, states: dict) -> None:
        self.spatial.load_state_dict(states["spatial"])
        if self.temporal is not None and "temporal" in states:
            self.temporal.load_state_dict(states["temporal"])
        if self.local_disc is not None and "local_disc" in states:
            self.local_disc.load_state_dict(states["local_disc"])
        if self.global_disc is not None and "global_disc" in states:
            self.global_disc.load_state_dict(states["global_disc"])


def build_bundle(options: BundleOptions, guider: nn.Module | None = None) -> CompletionBundle:
    gen_config = GeneratorConfig.for_profile(options.profile, options.frame_size)
    h, w = options.frame_size
    bundle = CompletionBundle(options=options, spatial=SpatialGenerator(gen_config), guider=guider)
    if options.use_temporal:
        bundle.temporal = _TEMPORAL_CLASSES[options.temporal_variant](gen_config)
    if options.use_global_disc:
        bundle.global_disc = Discriminator(DiscriminatorConfig.for_profile(options.profile, (h, w)))
    if options.use_local_disc:
        bundle.local_disc = Discriminator(
            DiscriminatorConfig.for_profile(options.profile, (h // 2, w // 2))
        )
    return bundle

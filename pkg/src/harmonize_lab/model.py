"""Harmonization network: residual-UNet encoder/decoder with per-stage
skip attention and external background style fusion.

The encoder halves resolution per stage while doubling width; the decoder
mirrors it. Decoder stages run: channel-reducing transposed conv, bilinear
x2 upsample, conv+norm+activation, skip attention on the concatenated
encoder feature, style fusion with the encoder feature and rescaled mask,
then a residual block. The final conv maps back to RGB through a sigmoid.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .style_fusion import StyleFusionLayer, rescale_mask


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 4
    base_width: int = 32
    stages: int = 4
    interlayer_width: int = 512
    image_size: int = 256
    blend_background_at_inference: bool = True
    use_style_fusion: bool = True

    def __post_init__(self):
        if self.stages < 1 or self.base_width < 1:
            raise ConfigError("stages and base_width must be positive")
        expected = self.base_width * 2**self.stages
        if self.interlayer_width != expected:
            raise ConfigError(
                f"interlayer_width must be base_width * 2**stages = {expected}, "
                f"got {self.interlayer_width}"
            )
        if self.image_size % 2**self.stages != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2**stages = {2**self.stages}"
            )

    def stage_width(self, i):
        """Encoder width of stage i (0-indexed)."""
        return self.base_width * 2**i


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    out_size: int = 0

    def __post_init__(self):
        if self.kind == "resunet_block" and self.c_in != self.c_out:
            raise ConfigError("resunet_block keeps its width (residual addition)")


@dataclass
class FeaturePyramid:
    """Ordered per-stage feature maps; encoder pyramids are stored reversed
    so layer i matches decoder stage i in shape."""

    layers: list
    orientation: str  # "encoder" | "decoder"

    def shapes(self):
        return [tuple(t.shape) for t in self.layers]


def _conv_bn_act(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, 1, 1),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.01, inplace=True),
    )


class ResUNetBlock(nn.Module):
    """Three stacked conv+BN+LReLU layers with an identity residual."""

    def __init__(self, channels):
        super().__init__()
        self.branch = nn.Sequential(
            _conv_bn_act(channels, channels),
            _conv_bn_act(channels, channels),
            _conv_bn_act(channels, channels),
        )
        self.channels = channels

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")
        return x + self.branch(x)


class SkipAttention(nn.Module):
    """Attention block joining the encoder skip and the decoder feature.

    Concatenates both (2c channels), applies a squeeze-excite channel gate,
    a residual two-conv refinement (zero-initialized, so the block starts
    out as gate + projection), and a 1x1 projection back to c channels.
    The refinement carries most of this block's capacity.
    """

    def __init__(self, in_channels, reduction=16, expansion=2):
        super().__init__()
        hidden = max(in_channels // reduction, 4)
        self.gate = nn.Sequential(
            nn.Linear(in_channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, in_channels),
            nn.Sigmoid(),
        )
        mid = in_channels * expansion
        self.refine = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, 1, 1),
            nn.BatchNorm2d(mid),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv2d(mid, in_channels, 3, 1, 1),
            nn.BatchNorm2d(in_channels),
        )
        nn.init.zeros_(self.refine[3].weight)
        nn.init.zeros_(self.refine[3].bias)
        self.project = nn.Conv2d(in_channels, in_channels // 2, 1)
        self.in_channels = in_channels

    def forward(self, skip, dec):
        if skip.shape != dec.shape:
            raise ShapeError(f"skip {tuple(skip.shape)} vs decoder {tuple(dec.shape)}")
        x = torch.cat([skip, dec], dim=1)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} concat channels, got {x.shape[1]}")
        weights = self.gate(x.mean(dim=(2, 3)))
        gated = x * weights.unsqueeze(-1).unsqueeze(-1)
        refined = gated + self.refine(gated)
        return self.project(refined)


class _EncoderStage(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = _conv_bn_act(c_in, c_out)
        self.block = ResUNetBlock(c_out)

    def forward(self, x):
        return self.block(self.conv(x))


class _DecoderStage(nn.Module):
    def __init__(self, c_in, c_out, stage, use_style_fusion):
        super().__init__()
        self.reduce = nn.ConvTranspose2d(c_in, c_out, 3, 1, 1)
        self.conv = _conv_bn_act(c_out, c_out)
        self.attn = SkipAttention(2 * c_out)
        self.fuse = StyleFusionLayer(c_out, stage=stage) if use_style_fusion else None
        self.block = ResUNetBlock(c_out)

    def forward(self, x, skip, mask):
        x = self.reduce(x)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x)
        if x.shape != skip.shape:
            raise ShapeError(
                f"decoder feature {tuple(x.shape)} does not mirror skip {tuple(skip.shape)}"
            )
        x = self.attn(skip, x)
        if self.fuse is not None:
            mask_i = rescale_mask(mask, x.shape[-2:])
            x = self.fuse(x, skip, mask_i)
        return self.block(x)


class HarmonizationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = [config.stage_width(i) for i in range(config.stages)]
        self.encoder = nn.ModuleList(
            _EncoderStage(c_in, c_out)
            for c_in, c_out in zip([config.in_channels] + widths[:-1], widths)
        )
        self.pool = nn.MaxPool2d(2, 2)
        self.inter = nn.Sequential(
            _conv_bn_act(widths[-1], config.interlayer_width),
            ResUNetBlock(config.interlayer_width),
        )
        dec_widths = widths[::-1]  # decoder stage i mirrors encoder stage stages-1-i
        self.decoder = nn.ModuleList(
            _DecoderStage(c_in, c_out, stage=i, use_style_fusion=config.use_style_fusion)
            for i, (c_in, c_out) in enumerate(
                zip([config.interlayer_width] + dec_widths[:-1], dec_widths)
            )
        )
        self.out_conv = nn.Conv2d(config.base_width, 3, 3, 1, 1)

    def _check_inputs(self, composite, mask):
        if composite.dim() != 4 or mask.dim() != 4:
            raise ShapeError("expected batched (B,3,S,S) composite and (B,1,S,S) mask")
        b, c, h, w = composite.shape
        if c != 3 or h != w:
            raise ShapeError(f"composite must be square RGB, got {tuple(composite.shape)}")
        if mask.shape != (b, 1, h, w):
            raise ShapeError(
                f"mask {tuple(mask.shape)} does not match composite {tuple(composite.shape)}"
            )
        if h % 2**self.config.stages != 0:
            raise ShapeError(f"spatial size {h} not divisible by 2**{self.config.stages}")

    def encode(self, composite, mask):
        """Run the encoder; returns the reversed skip pyramid and bottleneck."""
        self._check_inputs(composite, mask)
        x = torch.cat([composite, mask], dim=1)
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        bottleneck = self.inter(x)
        return FeaturePyramid(layers=skips[::-1], orientation="encoder"), bottleneck

    def decode(self, bottleneck, pyramid, mask, composite=None, blend=None):
        if len(pyramid.layers) != len(self.decoder):
            raise ShapeError(
                f"pyramid has {len(pyramid.layers)} layers for {len(self.decoder)} decoder stages"
            )
        x = bottleneck
        for skip, stage in zip(pyramid.layers, self.decoder):
            x = stage(x, skip, mask)
        out = torch.sigmoid(self.out_conv(x))
        if blend is None:
            blend = self.config.blend_background_at_inference and not self.training
        if blend:
            if composite is None:
                raise ValueError("blending requires the composite image")
            out = out * mask + composite * (1.0 - mask)
        return out

    def forward(self, composite, mask, blend=None):
        pyramid, bottleneck = self.encode(composite, mask)
        return self.decode(bottleneck, pyramid, mask, composite=composite, blend=blend)

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())

    def layer_specs(self):
        """Per-layer spec table (kind, widths, expected output size) derived
        from the config's halving/doubling rule."""
        cfg = self.config
        size = cfg.image_size
        specs = []
        c_prev = cfg.in_channels
        for i in range(cfg.stages):
            c = cfg.stage_width(i)
            specs.append(LayerSpec("conv", c_prev, c, out_size=size))
            specs.append(LayerSpec("resunet_block", c, c, out_size=size))
            size //= 2
            specs.append(LayerSpec("maxpool", c, c, kernel=2, stride=2, padding=0, out_size=size))
            c_prev = c
        specs.append(LayerSpec("conv", c_prev, cfg.interlayer_width, out_size=size))
        specs.append(LayerSpec("resunet_block", cfg.interlayer_width, cfg.interlayer_width, out_size=size))
        c_prev = cfg.interlayer_width
        for i in range(cfg.stages):
            c = cfg.stage_width(cfg.stages - 1 - i)
            size *= 2
            specs.append(LayerSpec("transposed_conv", c_prev, c, out_size=size // 2))
            specs.append(LayerSpec("upsample", c, c, kernel=2, stride=2, padding=0, out_size=size))
            specs.append(LayerSpec("conv", c, c, out_size=size))
            specs.append(LayerSpec("s2am", 2 * c, c, kernel=1, padding=0, out_size=size))
            if cfg.use_style_fusion:
                specs.append(LayerSpec("style_fusion", c, c, kernel=1, padding=0, out_size=size))
            specs.append(LayerSpec("resunet_block", c, c, out_size=size))
            c_prev = c
        specs.append(LayerSpec("output_conv", cfg.base_width, 3, out_size=size))
        return specs


def build_network(config: NetworkConfig) -> HarmonizationNet:
    """Instantiate the harmonization network for a validated config."""
    return HarmonizationNet(config)

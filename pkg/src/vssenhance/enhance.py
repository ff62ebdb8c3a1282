"""The enhancement network and its training step.

A U-shaped encoder/decoder in which every stage is a run of VSS blocks:
concatenated aligned features are embedded to the base width, downsampled
through stride-2 convolutions (channels doubling per scale), mirrored back up
with transposed convolutions and skip concatenations, and projected to RGB.
The projection is zero-initialized and added to the center frame, so an
untrained network is an exact pass-through.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .align import FeatureExtractor, PCDAlign, pcd_align
from .layers import Conv2d, ConvTranspose2d, Module
from .optim import AdamW
from .ss2d import FeatureMap
from .tensor import ConfigurationError, DimensionError, Tensor, concat, pad2d_edges
from .vss import VSSBlock

__all__ = [
    "EnhanceNetConfig",
    "EnhanceNet",
    "VideoEnhancer",
    "TrainingDiverged",
    "charbonnier",
    "enhance_forward",
    "training_step",
    "temporal_window",
]


class TrainingDiverged(RuntimeError):
    """Raised when the loss leaves the realm of finite numbers."""


@dataclass
class EnhanceNetConfig:
    input_frames: int = 5  # temporal window 2N+1
    feature_channels: int = 16  # alignment feature width
    base_channels: int = 16  # encoder width at full resolution
    state_dim: int = 8  # per-channel SSM state size
    num_scales: int = 3  # downsampling stages
    encoder_depths: tuple[int, ...] = (2, 2, 2)
    decoder_depths: tuple[int, ...] = (2, 2, 2)
    bottleneck_depth: int = 2
    ffn_ratio: int = 2

    def __post_init__(self):
        self.encoder_depths = tuple(self.encoder_depths)
        self.decoder_depths = tuple(self.decoder_depths)
        if self.input_frames < 1 or self.input_frames % 2 == 0:
            raise ConfigurationError("input_frames must be a positive odd number")
        if self.num_scales < 1:
            raise ConfigurationError("num_scales must be >= 1")
        if len(self.encoder_depths) != self.num_scales:
            raise ConfigurationError("encoder_depths must list one depth per scale")
        if len(self.decoder_depths) != self.num_scales:
            raise ConfigurationError("decoder_depths must list one depth per scale")
        for name in ("feature_channels", "base_channels", "state_dim",
                     "bottleneck_depth", "ffn_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")

    def stage_channels(self, scale: int) -> int:
        return self.base_channels * (1 << scale)


def _blocks(channels: int, depth: int, state_dim: int, ratio: int,
            rng: np.random.Generator) -> list[VSSBlock]:
    return [VSSBlock(channels, state_dim, rng, ffn_ratio=ratio) for _ in range(depth)]


class EnhanceNet(Module):
    """VSS-block U-Net from concatenated aligned features to an RGB frame."""

    def __init__(self, cfg: EnhanceNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        c0 = cfg.base_channels
        in_ch = cfg.input_frames * cfg.feature_channels
        self.embed = Conv2d(in_ch, c0, 1, rng)

        self.encoder_stages = []
        self.downs = []
        for s in range(cfg.num_scales):
            ch = cfg.stage_channels(s)
            self.encoder_stages.append(
                _blocks(ch, cfg.encoder_depths[s], cfg.state_dim, cfg.ffn_ratio, rng)
            )
            self.downs.append(Conv2d(ch, cfg.stage_channels(s + 1), 3, rng, stride=2))

        self.bottleneck = _blocks(
            cfg.stage_channels(cfg.num_scales), cfg.bottleneck_depth,
            cfg.state_dim, cfg.ffn_ratio, rng,
        )

        self.ups = []
        self.skip_projects = []
        self.decoder_stages = []
        for s in reversed(range(cfg.num_scales)):
            ch = cfg.stage_channels(s)
            self.ups.append(ConvTranspose2d(cfg.stage_channels(s + 1), ch, 4, rng))
            self.skip_projects.append(Conv2d(2 * ch, ch, 1, rng))
            self.decoder_stages.append(
                _blocks(ch, cfg.decoder_depths[s], cfg.state_dim, cfg.ffn_ratio, rng)
            )

        self.out_project = Conv2d(c0, 3, 3, rng, zero_init=True)

    def __call__(self, aligned, center_rgb, clamp_output: bool = False) -> Tensor:
        return enhance_forward(aligned, center_rgb, self, clamp_output=clamp_output)


def enhance_forward(aligned: list[FeatureMap], center_rgb: Tensor, net: EnhanceNet,
                    clamp_output: bool = False) -> Tensor:
    """Enhance one frame from its window of aligned feature maps.

    ``aligned`` must hold ``input_frames`` maps of identical shape; the output
    is the zero-initialized RGB projection plus the center frame, cropped back
    to the input resolution after reflection padding to a multiple of 2^S.
    Clamping to [0, 1] is inference-only behavior.
    """
    cfg = net.cfg
    if len(aligned) != cfg.input_frames:
        raise DimensionError(
            f"expected {cfg.input_frames} aligned maps, got {len(aligned)}"
        )
    shapes = {f.values.shape for f in aligned}
    if len(shapes) != 1:
        raise DimensionError(f"aligned maps disagree in shape: {sorted(shapes)}")
    H, W = aligned[0].height, aligned[0].width
    if center_rgb.shape != (3, H, W):
        raise DimensionError(
            f"center frame must be (3, {H}, {W}), got {center_rgb.shape}"
        )

    x = concat([f.values for f in aligned], axis=0)
    multiple = 1 << cfg.num_scales
    pad_b = (-H) % multiple
    pad_r = (-W) % multiple
    # reflection when it fits; edge replication keeps tiny inputs legal
    pad_mode = "reflect" if (pad_b < H and pad_r < W) else "edge"
    x = pad2d_edges(x, 0, pad_b, 0, pad_r, mode=pad_mode)

    feat = net.embed(x)
    skips = []
    for stage, down in zip(net.encoder_stages, net.downs):
        for block in stage:
            feat = block(FeatureMap(feat)).values
        skips.append(feat)
        feat = down(feat)

    for block in net.bottleneck:
        feat = block(FeatureMap(feat)).values

    for up, project, stage, skip in zip(
        net.ups, net.skip_projects, net.decoder_stages, reversed(skips)
    ):
        feat = up(feat)
        feat = project(concat([feat, skip], axis=0))
        for block in stage:
            feat = block(FeatureMap(feat)).values

    residual = net.out_project(feat)
    if pad_b or pad_r:
        residual = residual[:, :H, :W]
    out = residual + center_rgb
    if clamp_output:
        out = T.clip(out, 0.0, 1.0)
    return out


class VideoEnhancer(Module):
    """Feature extraction, per-frame deformable alignment, enhancement."""

    def __init__(self, cfg: EnhanceNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.extractor = FeatureExtractor(3, cfg.feature_channels, rng)
        self.pcd = PCDAlign(cfg.feature_channels, rng)
        self.net = EnhanceNet(cfg, rng)

    def __call__(self, window: list[Tensor], clamp_output: bool = False) -> Tensor:
        if len(window) != self.cfg.input_frames:
            raise DimensionError(
                f"window must hold {self.cfg.input_frames} frames, got {len(window)}"
            )
        center = len(window) // 2
        pyramids = [self.extractor(frame) for frame in window]
        reference = pyramids[center]
        aligned = [pcd_align(p, reference, self.pcd) for p in pyramids]
        return self.net(aligned, window[center], clamp_output=clamp_output)


def temporal_window(frames: list, center: int, size: int) -> list:
    """The ``size`` frames around ``center``, edge-replicated at boundaries."""
    half = size // 2
    n = len(frames)
    return [frames[min(max(center + d, 0), n - 1)] for d in range(-half, half + 1)]


def charbonnier(pred: Tensor, target: Tensor, eps: float = 1e-3) -> Tensor:
    """Robust L1: mean of sqrt(residual^2 + eps^2)."""
    diff = pred - target
    return (diff * diff + eps * eps).sqrt().mean()


def training_step(model: VideoEnhancer, optimizer: AdamW, batch,
                  loss_eps: float = 1e-3) -> float:
    """One optimization step over ``batch`` = [(window, target), ...].

    Forward through alignment and enhancement, Charbonnier loss, reverse-mode
    gradients, AdamW update.  Deterministic given fixed parameters and batch.
    """
    optimizer.zero_grad()
    total = None
    for window, target in batch:
        out = model(window)
        sample_loss = charbonnier(out, target, eps=loss_eps)
        total = sample_loss if total is None else total + sample_loss
    loss = total * (1.0 / len(batch))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"loss became {value!r} at optimizer step {optimizer.step_count + 1}; "
            "lower the learning rate or inspect the input data"
        )
    loss.backward()
    optimizer.step()
    return value

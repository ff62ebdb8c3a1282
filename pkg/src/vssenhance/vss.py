"""The visual state-space block: pre-norm 2D selective scan with a residual,
then a pre-norm feedforward with a residual.

Both branch outputs pass through zero-initialized projections, so a freshly
constructed block is exactly the identity map; training grows the branches
from there.
"""

from __future__ import annotations

import numpy as np

from .layers import LayerNorm, Linear, Module
from .ss2d import SS2D, FeatureMap, _to_grid, _tokens
from .tensor import DimensionError, Tensor, gelu


class FeedForward(Module):
    """linear -> GELU -> linear on (L, C) tokens, expansion ratio r."""

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 2):
        if ratio < 1:
            raise DimensionError("feedforward expansion ratio must be >= 1")
        hidden = ratio * channels
        self.expand = Linear(channels, hidden, rng)
        self.project = Linear(hidden, channels, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.project(gelu(self.expand(x)))


class VSSBlock(Module):
    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator,
                 ffn_ratio: int = 2):
        self.channels = channels
        self.norm1 = LayerNorm(channels)
        self.ss2d = SS2D(channels, state_dim, rng)
        self.scan_project = Linear(channels, channels, rng, zero_init=True)
        self.norm2 = LayerNorm(channels)
        self.ffn = FeedForward(channels, rng, ratio=ffn_ratio)

    def __call__(self, f: FeatureMap) -> FeatureMap:
        return vss_forward(f, self)


def vss_forward(h_in: FeatureMap, block: VSSBlock) -> FeatureMap:
    """Token-space evaluation of the two pre-norm residual branches.

    Layer norm acts over channels at each spatial position (channels-last
    token layout); the scan branch output goes through the zero-initialized
    channel projection before the residual add.
    """
    if h_in.channels != block.channels:
        raise DimensionError(
            f"input has {h_in.channels} channels, block expects {block.channels}"
        )
    C, H, W = h_in.channels, h_in.height, h_in.width
    tokens = _tokens(h_in)  # (L, C)

    scanned = _tokens(block.ss2d(_to_grid(block.norm1(tokens), C, H, W)))
    mid = block.scan_project(scanned) + tokens
    out = block.ffn(block.norm2(mid)) + mid
    return _to_grid(out, C, H, W)

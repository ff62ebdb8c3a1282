"""Multi-frame feature alignment.

Feature extraction into a three-level pyramid, then coarse-to-fine deformable
alignment of a neighbor frame's features to the reference frame: offsets are
predicted at the coarsest level, refined at each finer level from the
upsampled coarser offsets, and a final cascading deformable convolution
polishes the full-resolution output against the reference.  There is no
fusion stage; callers concatenate the aligned maps themselves.

Offset fields are (2*k*k, H, W): channels (2t, 2t+1) hold the (dy, dx)
displacement of kernel tap t, taps enumerated row-major over the k x k
window.  Offsets are clamped to max(H, W) pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import tensor as T
from .layers import Conv2d, Module
from .ss2d import FeatureMap
from .tensor import DimensionError, Tensor, _node, _wrap, concat, gelu

__all__ = [
    "FramePyramid",
    "FeatureExtractor",
    "PCDAlign",
    "bilinear_sample",
    "bilinear_gather",
    "deformable_conv2d",
    "resize_bilinear",
    "pcd_align",
]

PYRAMID_LEVELS = 3


@dataclass
class FramePyramid:
    """Feature maps from fine (full resolution) to coarse, each level half the
    previous (ceil division); all levels share a channel count."""

    levels: list[FeatureMap]

    def __post_init__(self):
        chans = {f.channels for f in self.levels}
        if len(chans) != 1:
            raise DimensionError("pyramid levels must share a channel count")
        for fine, coarse in zip(self.levels, self.levels[1:]):
            want = (-(-fine.height // 2), -(-fine.width // 2))
            if (coarse.height, coarse.width) != want:
                raise DimensionError(
                    f"pyramid level {coarse.values.shape} does not halve {fine.values.shape}"
                )

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    def shapes(self):
        return [f.values.shape for f in self.levels]


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _corner_pieces(H: int, W: int, ys: np.ndarray, xs: np.ndarray):
    """Floor corners, interpolation weights and in-bounds masks for sampling."""
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    corners = []
    for dy, dx, w in (
        (0.0, 0.0, (1 - wy) * (1 - wx)),
        (0.0, 1.0, (1 - wy) * wx),
        (1.0, 0.0, wy * (1 - wx)),
        (1.0, 1.0, wy * wx),
    ):
        cy = y0 + dy
        cx = x0 + dx
        valid = (cy >= 0) & (cy <= H - 1) & (cx >= 0) & (cx <= W - 1)
        iy = np.clip(cy, 0, H - 1).astype(np.intp)
        ix = np.clip(cx, 0, W - 1).astype(np.intp)
        corners.append((iy * W + ix, w * valid, valid))
    return corners, wy, wx


def _gather_data(fdata: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    """Zero-outside bilinear reads of (C, H, W) data at flat coordinate arrays."""
    C, H, W = fdata.shape
    M = ys.size
    flat = fdata.reshape(C, H * W)
    corners, wy, wx = _corner_pieces(H, W, ys, xs)
    # one gather for all four corners, then mask out-of-bounds reads to zero
    all_idx = np.concatenate([idx for idx, _, _ in corners])
    all_valid = np.concatenate([valid for _, _, valid in corners])
    vals = np.take(flat, all_idx, axis=1)
    vals *= all_valid
    corner_vals = [vals[:, i * M : (i + 1) * M] for i in range(4)]
    out = np.zeros((C, M))
    for (idx, w, valid), cv in zip(corners, corner_vals):
        out += w * cv
    return out, corners, corner_vals, wy, wx


def bilinear_gather(f: Tensor, ys, xs) -> Tensor:
    """Sample (C, H, W) values at M continuous positions -> (C, M).

    Positions outside [0, H-1] x [0, W-1] contribute zeros corner-by-corner.
    Differentiable in the values and, when ``ys``/``xs`` are tensors, in the
    coordinates (piecewise, with kinks at integer coordinates).
    """
    f = _wrap(f)
    if f.data.ndim != 3:
        raise DimensionError("bilinear_gather expects (C, H, W) values")
    ys_t, xs_t = _wrap(ys), _wrap(xs)
    ya, xa = ys_t.data.reshape(-1), xs_t.data.reshape(-1)
    C, H, W = f.data.shape
    out, corners, corner_vals, wy, wx = _gather_data(f.data, ya, xa)
    M = ya.size

    def grad_fn(g):
        # values: scatter all four corners at once through a 1-nnz-per-row
        # sparse matrix (rows = samples, columns = grid cells)
        idx4 = np.concatenate([idx for idx, _, _ in corners])
        w4 = np.concatenate([w for _, w, _ in corners])
        scatter = sparse.csr_matrix(
            (w4, idx4, np.arange(4 * M + 1)), shape=(4 * M, H * W)
        )
        gf = (np.tile(g, (1, 4)) @ scatter).reshape(C, H, W)

        v00, v01, v10, v11 = corner_vals
        gsum = lambda arr: (g * arr).sum(axis=0)  # noqa: E731
        gy = gsum((1 - wx) * (v10 - v00) + wx * (v11 - v01))
        gx = gsum((1 - wy) * (v01 - v00) + wy * (v11 - v10))
        return gf, gy.reshape(ys_t.data.shape), gx.reshape(xs_t.data.shape)

    return _node(out, (f, ys_t, xs_t), grad_fn)


def bilinear_sample(f: FeatureMap, y: float, x: float) -> Tensor:
    """Interpolated (C,) read of one continuous position."""
    return bilinear_gather(f.values, np.array([float(y)]), np.array([float(x)])).reshape(
        f.channels
    )


def resize_bilinear(f: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of (C, H, W) with half-pixel centers and edge clamping."""
    f = _wrap(f)
    C, H, W = f.data.shape
    sy = H / out_h
    sx = W / out_w
    ys = np.clip((np.arange(out_h) + 0.5) * sy - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * sx - 0.5, 0, W - 1)
    yy = np.repeat(ys, out_w)
    xx = np.tile(xs, out_h)
    return bilinear_gather(f, yy, xx).reshape(C, out_h, out_w)


# ---------------------------------------------------------------------------
# deformable convolution
# ---------------------------------------------------------------------------


def deformable_conv2d(f: FeatureMap, offsets: Tensor, w: Tensor) -> FeatureMap:
    """Stride-1 deformable convolution with per-position, per-tap offsets.

    At each output position p the k x k taps sample ``f`` at
    p + tap + offset_tap(p) via bilinear interpolation (zeros outside the
    grid), then contract with ``w`` exactly like the plain convolution, so a
    zero offset field reproduces ``conv2d(f, w, stride=1, pad=(k-1)/2)``
    bitwise.
    """
    values = f.values
    offsets = _wrap(offsets)
    w = _wrap(w)
    C_out, C_in, k, k2 = w.shape
    if k != k2 or k % 2 != 1:
        raise DimensionError("deformable kernels must be square with odd size")
    C, H, W = values.shape
    if C != C_in:
        raise DimensionError(f"input has {C} channels, kernel expects {C_in}")
    if offsets.shape != (2 * k * k, H, W):
        raise DimensionError(
            f"offset field must be ({2 * k * k}, {H}, {W}), got {offsets.shape}"
        )
    limit = float(max(H, W))
    off = T.clip(offsets, -limit, limit).reshape(k * k, 2, H * W)

    r = (k - 1) // 2
    taps = np.stack(
        np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij"), axis=-1
    ).reshape(k * k, 2)
    py, px = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    base_y = taps[:, 0:1] + py.reshape(1, H * W)  # (k*k, H*W)
    base_x = taps[:, 1:2] + px.reshape(1, H * W)

    ys = off[:, 0] + Tensor(base_y.astype(np.float64))
    xs = off[:, 1] + Tensor(base_x.astype(np.float64))

    sampled = bilinear_gather(values, ys.reshape(-1), xs.reshape(-1))  # (C, k*k*H*W)
    cols = sampled.reshape(C, k * k, H * W).transpose(2, 0, 1).reshape(H * W, C * k * k)
    out = T.matmul(cols, w.reshape(C_out, C_in * k * k).transpose(1, 0))
    return FeatureMap(out.transpose(1, 0).reshape(C_out, H, W))


# ---------------------------------------------------------------------------
# feature extraction and the pyramid
# ---------------------------------------------------------------------------


class FeatureExtractor(Module):
    """Two full-resolution convolutions, then two strided stages, giving a
    three-level pyramid with a shared channel width."""

    def __init__(self, in_ch: int, channels: int, rng: np.random.Generator):
        self.conv_a = Conv2d(in_ch, channels, 3, rng)
        self.conv_b = Conv2d(channels, channels, 3, rng)
        self.down = []
        for _ in range(PYRAMID_LEVELS - 1):
            self.down.append(Conv2d(channels, channels, 3, rng, stride=2))
            self.down.append(Conv2d(channels, channels, 3, rng))

    def __call__(self, frame: Tensor) -> FramePyramid:
        feat = gelu(self.conv_b(gelu(self.conv_a(frame))))
        levels = [FeatureMap(feat)]
        for i in range(0, len(self.down), 2):
            feat = gelu(self.down[i](feat))
            feat = gelu(self.down[i + 1](feat))
            levels.append(FeatureMap(feat))
        return FramePyramid(levels)


# ---------------------------------------------------------------------------
# pyramid-cascading deformable alignment
# ---------------------------------------------------------------------------


class PCDAlign(Module):
    """Coarse-to-fine offset prediction plus a final cascading refinement.

    All offset heads are zero-initialized, so a fresh module behaves as a
    plain convolution chain over the neighbor features.
    """

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 3):
        self.k = k
        off_ch = 2 * k * k
        # level 3 (coarsest) has no coarser offsets to fold in
        self.off_a = [
            Conv2d(2 * channels + off_ch, channels, 3, rng),
            Conv2d(2 * channels + off_ch, channels, 3, rng),
            Conv2d(2 * channels, channels, 3, rng),
        ]
        self.off_b = [Conv2d(channels, channels, 3, rng) for _ in range(3)]
        self.off_head = [
            Conv2d(channels, off_ch, 3, rng, zero_init=True) for _ in range(3)
        ]
        self.dcn = [Conv2d(channels, channels, 3, rng) for _ in range(3)]
        self.fuse = [Conv2d(2 * channels, channels, 3, rng) for _ in range(2)]
        self.cas_a = Conv2d(2 * channels, channels, 3, rng)
        self.cas_b = Conv2d(channels, channels, 3, rng)
        self.cas_head = Conv2d(channels, off_ch, 3, rng, zero_init=True)
        self.cas_dcn = Conv2d(channels, channels, 3, rng)

    def __call__(self, neighbor: FramePyramid, reference: FramePyramid) -> FeatureMap:
        return pcd_align(neighbor, reference, self)


def _dcn_apply(conv: Conv2d, f: FeatureMap, offsets: Tensor) -> FeatureMap:
    out = deformable_conv2d(f, offsets, conv.weight)
    return FeatureMap(out.values + conv.bias.reshape(-1, 1, 1))


def pcd_align(
    neighbor: FramePyramid, reference: FramePyramid, weights: PCDAlign
) -> FeatureMap:
    """Align ``neighbor`` features onto ``reference``, returning a map at the
    finest (level 1) resolution."""
    if neighbor.shapes() != reference.shapes():
        raise DimensionError(
            f"pyramid shapes differ: {neighbor.shapes()} vs {reference.shapes()}"
        )
    n_levels = len(neighbor.levels)
    offsets_up = None
    aligned_up = None
    aligned = None
    for lvl in range(n_levels - 1, -1, -1):
        nbr = neighbor.levels[lvl]
        ref = reference.levels[lvl]
        H, W = nbr.height, nbr.width
        parts = [nbr.values, ref.values]
        if offsets_up is not None:
            parts.append(resize_bilinear(offsets_up, H, W) * 2.0)
        feat = gelu(weights.off_a[lvl](concat(parts, axis=0)))
        feat = gelu(weights.off_b[lvl](feat))
        offsets = weights.off_head[lvl](feat)
        moved = _dcn_apply(weights.dcn[lvl], nbr, offsets)
        if lvl == n_levels - 1:
            aligned = FeatureMap(gelu(moved.values))
        else:
            stacked = concat(
                [moved.values, resize_bilinear(aligned_up.values, H, W)], axis=0
            )
            fused = weights.fuse[lvl](stacked)
            aligned = FeatureMap(gelu(fused) if lvl > 0 else fused)
        offsets_up = offsets
        aligned_up = aligned

    ref1 = reference.levels[0]
    feat = gelu(weights.cas_a(concat([aligned.values, ref1.values], axis=0)))
    feat = gelu(weights.cas_b(feat))
    cas_offsets = weights.cas_head(feat)
    return _dcn_apply(weights.cas_dcn, aligned, cas_offsets)

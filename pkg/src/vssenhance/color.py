"""Gray-world illuminant estimation, Bradford chromatic adaptation, and the
full-reference quality metrics (PSNR, SSIM).

Adaptation runs in linear light: frames are sRGB-decoded, moved to XYZ,
scaled in Bradford cone space so the source white lands on the destination
white, then re-encoded.  The destination defaults to the working-space white
(D65, i.e. linear RGB (1, 1, 1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

__all__ = [
    "Illuminant",
    "AdaptationTransform",
    "D65_WHITE_RGB",
    "estimate_illuminant",
    "adaptation_transform",
    "chromatic_adapt",
    "psnr",
    "ssim",
]

_CHANNEL_FLOOR = 1e-6

# sRGB (D65) primaries, linear RGB <-> XYZ
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)

# Bradford cone response matrix
BRADFORD = np.array(
    [
        [0.8951, 0.2664, -0.1614],
        [-0.7502, 1.7135, 0.0367],
        [0.0389, -0.0685, 1.0296],
    ]
)
BRADFORD_INV = np.linalg.inv(BRADFORD)

D65_WHITE_RGB = (1.0, 1.0, 1.0)


def srgb_decode(v: np.ndarray) -> np.ndarray:
    """Gamma-encoded sRGB -> linear light."""
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def srgb_encode(v: np.ndarray) -> np.ndarray:
    """Linear light -> gamma-encoded sRGB (negatives clamped first)."""
    v = np.maximum(np.asarray(v, dtype=np.float64), 0.0)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1.0 / 2.4) - 0.055)


@dataclass
class Illuminant:
    """A scene illuminant as encoded RGB plus its linear-light tristimulus."""

    rgb: tuple[float, float, float]
    xyz: tuple[float, float, float] = field(init=False)

    def __post_init__(self):
        if any(c <= 0 for c in self.rgb):
            raise DimensionError("illuminant components must be positive")
        linear = srgb_decode(np.asarray(self.rgb))
        self.xyz = tuple(RGB_TO_XYZ @ linear)


@dataclass
class AdaptationTransform:
    """3x3 map in linear RGB taking source-adapted colors to the destination."""

    matrix: np.ndarray

    def apply(self, linear_rgb: np.ndarray) -> np.ndarray:
        """Apply to (3, ...) linear RGB data."""
        flat = linear_rgb.reshape(3, -1)
        return (self.matrix @ flat).reshape(linear_rgb.shape)


def estimate_illuminant(frame: np.ndarray) -> Illuminant:
    """Gray-world estimate: the per-channel mean, floored at 1e-6."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] != 3 or frame[0].size == 0:
        raise DimensionError("illuminant estimation expects a non-empty (3, H, W) frame")
    means = frame.reshape(3, -1).mean(axis=1)
    means = np.maximum(means, _CHANNEL_FLOOR)
    return Illuminant(rgb=tuple(means))


def adaptation_transform(src: Illuminant, dst: Illuminant) -> AdaptationTransform:
    """Bradford transform scaling cone responses from ``src`` to ``dst``."""
    src_cone = BRADFORD @ np.asarray(src.xyz)
    dst_cone = BRADFORD @ np.asarray(dst.xyz)
    cat = BRADFORD_INV @ np.diag(dst_cone / src_cone) @ BRADFORD
    return AdaptationTransform(matrix=XYZ_TO_RGB @ cat @ RGB_TO_XYZ)


def chromatic_adapt(frame: np.ndarray, src: Illuminant, dst: Illuminant) -> np.ndarray:
    """Re-render ``frame`` (encoded, (3, H, W), values in [0, 1]) from the
    source illuminant to the destination; clipping happens only at the end."""
    transform = adaptation_transform(src, dst)
    linear = srgb_decode(np.asarray(frame, dtype=np.float64))
    adapted = transform.apply(linear)
    return np.clip(srgb_encode(adapted), 0.0, 1.0)


# ---------------------------------------------------------------------------
# quality metrics
# ---------------------------------------------------------------------------


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs report +infinity."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise DimensionError("psnr peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering of a 2-D array."""
    k = kernel.size
    x = np.lib.stride_tricks.sliding_window_view(x, k, axis=1) @ kernel
    return np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ kernel


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0,
         k1: float = 0.01, k2: float = 0.03,
         window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows.

    Computed per channel and averaged; the luminance/contrast/structure
    product uses the standard stabilizers C1 = (k1 peak)^2, C2 = (k2 peak)^2.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.shape[1] < window_size or a.shape[2] < window_size:
        raise DimensionError(
            f"image {a.shape[1]}x{a.shape[2]} is smaller than the {window_size}x"
            f"{window_size} window"
        )
    kernel = _gaussian_window(window_size, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    scores = []
    for ca, cb in zip(a, b):
        mu_a = _windowed_mean(ca, kernel)
        mu_b = _windowed_mean(cb, kernel)
        var_a = _windowed_mean(ca * ca, kernel) - mu_a * mu_a
        var_b = _windowed_mean(cb * cb, kernel) - mu_b * mu_b
        cov = _windowed_mean(ca * cb, kernel) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))

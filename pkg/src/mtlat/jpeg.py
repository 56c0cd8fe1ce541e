"""Lossy JPEG round trip without entropy coding.

RGB -> YCbCr, 8x8 block DCT, quantization with the standard tables scaled by
quality, dequantization, inverse DCT, back to RGB. No chroma subsampling.
"""
import numpy as np
from scipy.fft import dctn, idctn

LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.float64)


def quant_table(base, quality):
    """IJG quality scaling, entries clamped to [1, 255]."""
    quality = int(np.clip(round(quality), 1, 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb):
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc):
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128, ycc[..., 2] - 128
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _blocks(plane):
    H, W = plane.shape
    return plane.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks):
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * 8, nw * 8)


def jpeg_roundtrip(image, quality):
    """Quantization-only JPEG of an HxWx3 image in [0, 1]; returns the decoded image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"jpeg_roundtrip needs an HxWx3 image, got {image.shape}")
    if not 1 <= quality <= 100:
        raise ValueError("quality must lie in [1, 100]")
    H, W, _ = image.shape
    ph, pw = (-H) % 8, (-W) % 8
    padded = np.pad(image * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = rgb_to_ycbcr(padded)
    out = np.empty_like(ycc)
    for c, base in enumerate((LUMA_TABLE, CHROMA_TABLE, CHROMA_TABLE)):
        q = quant_table(base, quality)
        coef = dctn(_blocks(ycc[..., c] - 128.0), axes=(2, 3), norm="ortho")
        coef = np.round(coef / q) * q
        out[..., c] = _unblocks(idctn(coef, axes=(2, 3), norm="ortho")) + 128.0
    rgb = ycbcr_to_rgb(out)[:H, :W] / 255.0
    return np.clip(rgb, 0.0, 1.0)

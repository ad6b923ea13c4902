"""JPEG-style block-DCT compression used as an input preprocessing defense."""
import logging

import numpy as np
from scipy.fft import dctn, idctn

from ..autodiff.tensor import Value
from ..sensors.camera import CameraImage
from ..utils.config import ConfigError

logger = logging.getLogger(__name__)

BLOCK = 8

LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

_RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_CHROMA_OFFSET = np.array([0.0, 128.0, 128.0])


def quality_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the usual quality rule, entries clipped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ConfigError(f"Compression quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((LUMINANCE_TABLE * scale + 50.0) / 100.0), 1.0, 255.0)


def _blocks(channel: np.ndarray) -> np.ndarray:
    h, w = channel.shape
    return channel.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    nh, nw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(nh * BLOCK, nw * BLOCK)


def compress_pixels(pixels: np.ndarray, quality: int) -> np.ndarray:
    """Quantise 8x8 DCT blocks of each YCbCr channel and reconstruct RGB in [0, 1]."""
    table = quality_table(quality)
    h, w, _ = pixels.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    rgb = np.pad(np.clip(pixels, 0.0, 1.0) * 255.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = rgb @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET
    out = np.empty_like(ycc)
    for c in range(3):
        coeffs = dctn(_blocks(ycc[..., c] - 128.0), axes=(2, 3), norm="ortho")
        coeffs = np.round(coeffs / table) * table
        out[..., c] = _unblocks(idctn(coeffs, axes=(2, 3), norm="ortho")) + 128.0
    rgb = (out - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T
    rgb = np.clip(np.round(rgb), 0.0, 255.0) / 255.0
    return rgb[:h, :w]


def dct_compress(image: CameraImage, quality: int = 50) -> CameraImage:
    """Non-differentiable preprocessing: the result is a constant image."""
    return CameraImage(Value(compress_pixels(image.pixels.data, quality)), image.dense_depth)


def compression_preprocess(quality: int):
    """Preprocess callable for the evaluation runner."""
    quality_table(quality)
    return lambda image: dct_compress(image, quality)

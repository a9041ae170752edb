"""Blockwise DCT quantisation used as a stand-in for a lossy video codec."""
from __future__ import annotations

import numpy as np

BLOCK = 8

# JPEG luminance quantisation table (ITU-T T.81, Annex K)
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II basis; rows are frequencies."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_D = dct_matrix()


def degrade_frame(frame: np.ndarray, q: float, table: np.ndarray | None = None) -> np.ndarray:
    """Quantise one ``[H, W]`` frame in [0, 1]; the step table is ``table * q / 16``."""
    if q < 1:
        raise ValueError("q must be >= 1")
    table = JPEG_LUMA if table is None else np.asarray(table, dtype=np.float64)
    step = table * (q / 16.0)
    h, w = frame.shape
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    x = np.asarray(frame, dtype=np.float64) * 255.0 - 128.0
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw)), mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    hb, wb = x.shape[0] // BLOCK, x.shape[1] // BLOCK
    blocks = x.reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3)
    coef = _D @ blocks @ _D.T
    coef = np.round(coef / step) * step
    rec = (_D.T @ coef @ _D).transpose(0, 2, 1, 3).reshape(x.shape)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


def degrade_clip(frames: np.ndarray, q: float, table: np.ndarray | None = None) -> np.ndarray:
    """Apply :func:`degrade_frame` to every frame of a ``[T, H, W]`` clip."""
    frames = np.asarray(frames)
    return np.stack([degrade_frame(f, q, table) for f in frames]).astype(frames.dtype, copy=False)

"""Procedural test video: smooth shading, drifting blobs, a textured panel and edges."""
from __future__ import annotations

import numpy as np


def synthetic_clip(frames: int = 15, height: int = 48, width: int = 48, seed: int = 0) -> np.ndarray:
    """A ``[T, H, W]`` float32 clip in [0, 1] with sub-pixel motion between frames."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    blobs = [
        dict(cy=rng.uniform(0, height), cx=rng.uniform(0, width), vy=rng.uniform(-1.2, 1.2),
             vx=rng.uniform(-1.2, 1.2), s=rng.uniform(3, 8), a=rng.uniform(-0.35, 0.35))
        for _ in range(5)
    ]
    fy, fx = rng.uniform(0.25, 0.6, size=2)
    pan = rng.uniform(0.4, 1.0, size=2)
    box = rng.uniform(0.25, 0.55, size=2) * np.array([height, width])
    vbox = rng.uniform(-1.0, 1.0, size=2)
    out = np.empty((frames, height, width), dtype=np.float32)
    for t in range(frames):
        img = 0.5 + gx * (xx / width - 0.5) + gy * (yy / height - 0.5)
        for b in blobs:
            d2 = (yy - b["cy"] - b["vy"] * t) ** 2 + (xx - b["cx"] - b["vx"] * t) ** 2
            img += b["a"] * np.exp(-d2 / (2 * b["s"] ** 2))
        y0, x0 = box + vbox * t
        inside = (yy >= y0) & (yy < y0 + height / 3) & (xx >= x0) & (xx < x0 + width / 3)
        texture = 0.12 * np.sin(fy * (yy - pan[0] * t)) * np.cos(fx * (xx - pan[1] * t))
        img = np.where(inside, img + 0.15 + texture, img)
        out[t] = np.clip(img, 0.0, 1.0)
    return out

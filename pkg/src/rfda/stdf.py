"""Multi-frame deformable fusion: U-Net offset prediction + grouped deformable conv."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .layers import Conv, he_uniform, zeros
from .tensor import Tensor, concat_channels, deform_conv2d, relu, upsample_bilinear

UNET_WIDTH = 32


def frame_window(frames: np.ndarray, t: int, radius: int) -> np.ndarray:
    """The 2R+1 frames centred on index ``t`` (0-based), edge-clamped in time."""
    idx = np.clip(np.arange(t - radius, t + radius + 1), 0, len(frames) - 1)
    return frames[idx]


@dataclass
class StdfParams:
    unet_in: Conv
    enc1_down: Conv
    enc1_conv: Conv
    enc2_down: Conv
    enc2_conv: Conv
    dec1: Conv
    dec2: Conv
    head: Conv
    fuse_weight: Tensor
    fuse_bias: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "StdfParams":
        n, c, k = cfg.window, UNET_WIDTH, cfg.kernel
        return cls(
            unet_in=Conv.init(rng, n, c),
            enc1_down=Conv.init(rng, c, c, stride=2),
            enc1_conv=Conv.init(rng, c, c),
            enc2_down=Conv.init(rng, c, c, stride=2),
            enc2_conv=Conv.init(rng, c, c),
            dec1=Conv.init(rng, 2 * c, c),
            dec2=Conv.init(rng, 2 * c, c),
            head=Conv.init(rng, c, n * 2 * k * k, zero=True),
            fuse_weight=he_uniform(rng, (cfg.features, n, k, k), n * k * k),
            fuse_bias=zeros((cfg.features,)),
        )

    @property
    def window(self) -> int:
        return self.fuse_weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.fuse_weight.shape[-1]


def predict_offsets(window: Tensor, p: StdfParams) -> Tensor:
    """Offsets ``[2R+1, 2K^2, H, W]`` for the fusion convolution.

    H and W must be divisible by 4 (two stride-2 levels).
    """
    n, h, w = window.shape
    return p.head(unet_features(window, p)).reshape(n, 2 * p.kernel ** 2, h, w)


def unet_features(window: Tensor, p: StdfParams) -> Tensor:
    """Decoder output of the offset U-Net, before the offset head."""
    h, w = window.shape[1:]
    if h % 4 or w % 4:
        raise ValueError(f"frame size {h}x{w} must be divisible by 4")
    x0 = relu(p.unet_in(window))
    x1 = relu(p.enc1_conv(relu(p.enc1_down(x0))))
    x2 = relu(p.enc2_conv(relu(p.enc2_down(x1))))
    y1 = relu(p.dec1(concat_channels([upsample_bilinear(x2, 2), x1])))
    return relu(p.dec2(concat_channels([upsample_bilinear(y1, 2), x0])))


def fuse_frames(window: Tensor, offsets: Tensor, p: StdfParams) -> Tensor:
    n = window.shape[0]
    if offsets.shape[0] != n:
        raise ValueError(f"offset groups {offsets.shape[0]} != window size {n}")
    return deform_conv2d(window, offsets, p.fuse_weight, p.fuse_bias, groups=n)


def stdf_forward(window: Tensor, p: StdfParams) -> Tensor:
    """Fused feature ``h_t`` of shape ``[F, H, W]`` from a ``[2R+1, H, W]`` window."""
    if window.shape[0] != p.window:
        raise ValueError(f"window has {window.shape[0]} frames, params expect {p.window}")
    return fuse_frames(window, predict_offsets(window, p), p)

"""Quality-enhancement head with deformable spatiotemporal attention blocks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .layers import Conv, Linear, count_layers
from .tensor import (
    Tensor,
    add,
    clamp,
    deform_conv2d,
    global_avg_pool,
    mul,
    pool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)

POOL_KERNEL = 7


@dataclass
class DstaParams:
    reduce: Conv
    down: Conv
    coarse_down: Conv
    coarse_conv: Conv
    fine_conv: Conv
    offset_head: Conv
    attn_weight: Tensor
    attn_bias: Tensor
    spatial: Conv
    fc1: Linear
    fc2: Linear

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator, kernel: int = 3) -> "DstaParams":
        f = cfg.features
        r = f // 4
        attn = Conv.init(rng, r, r, k=kernel)
        fc1 = Linear.init(rng, r, f // 16)
        # pooled input is non-negative (post-relu); non-negative weights keep the
        # squeeze units alive at start, which matters when F/16 is a single unit
        fc1.weight.data[:] = np.abs(fc1.weight.data)
        return cls(
            reduce=Conv.init(rng, f, r, k=1),
            down=Conv.init(rng, r, r, stride=2),
            coarse_down=Conv.init(rng, r, r, stride=2),
            coarse_conv=Conv.init(rng, r, r),
            fine_conv=Conv.init(rng, r, r),
            offset_head=Conv.init(rng, r, 2 * kernel * kernel, zero=True),
            attn_weight=attn.weight,
            attn_bias=attn.bias,
            spatial=Conv.init(rng, r, 1, k=1),
            fc1=fc1,
            fc2=Linear.init(rng, f // 16, f),
        )

    @property
    def kernel(self) -> int:
        return self.attn_weight.shape[-1]


@dataclass
class QeParams:
    entry: Conv
    blocks: list[DstaParams]
    mids: list[Conv]
    exit: Conv

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "QeParams":
        f = cfg.features
        blocks, mids = [], []
        entry = Conv.init(rng, f, f)
        for _ in range(cfg.blocks):
            blocks.append(DstaParams.init(cfg, rng))
            mids.append(Conv.init(rng, f, f))
        return cls(entry=entry, blocks=blocks, mids=mids, exit=Conv.init(rng, f, 1))

    def conv_count(self) -> int:
        """Convolutions on the main trunk (attention internals excluded)."""
        return count_layers([self.entry, self.mids, self.exit], Conv)


def predict_attention_offsets(z: Tensor, p: DstaParams) -> Tensor:
    """Two-scale offset predictor; returns ``[1, 2K^2, h, w]``."""
    _, h, w = z.shape
    if h < 2 or w < 2:
        raise ValueError(f"attention map {h}x{w} too small for offset pyramid")
    coarse = upsample_bilinear(p.coarse_conv(relu(p.coarse_down(z))), 2)
    if coarse.shape[1:] != (h, w):
        coarse = coarse[:, :h, :w]
    fine = p.fine_conv(z)
    off = p.offset_head(add(coarse, fine))
    return off.reshape(1, 2 * p.kernel ** 2, h, w)


def attention_maps(x: Tensor, p: DstaParams) -> tuple[Tensor, Tensor]:
    """Spatial mask ``[1, H, W]`` and channel weights ``[F]``, both in (0, 1)."""
    _, h, w = x.shape
    if h % 4 or w % 4:
        raise ValueError(f"feature size {h}x{w} must be divisible by 4")
    z = relu(p.reduce(x))
    z = relu(p.down(z))
    z = pool2d(z, "avg", POOL_KERNEL, 2, POOL_KERNEL // 2)
    offsets = predict_attention_offsets(z, p)
    a = relu(deform_conv2d(z, offsets, p.attn_weight, p.attn_bias, groups=1))
    mask = sigmoid(p.spatial(upsample_bilinear(a, 4)))
    weights = sigmoid(p.fc2(relu(p.fc1(global_avg_pool(a)))))
    return mask, weights


def dsta_block(x: Tensor, p: DstaParams) -> Tensor:
    mask, weights = attention_maps(x, p)
    return mul(mul(x, mask), weights.reshape(-1, 1, 1))


def _trunk(feature: Tensor, p: QeParams, masks: list | None = None) -> Tensor:
    y = p.entry(feature)
    for block, mid in zip(p.blocks, p.mids):
        if masks is not None:
            mask, weights = attention_maps(y, block)
            masks.append(mask)
            y = mul(mul(y, mask), weights.reshape(-1, 1, 1))
        else:
            y = dsta_block(y, block)
        y = relu(mid(y))
    return p.exit(y)


def qe_forward(feature, target: Tensor, p: QeParams) -> Tensor:
    """Enhanced frame ``clamp(target + residual, 0, 1)`` of shape ``[1, H, W]``.

    ``feature`` is a hidden state or its ``[F, H, W]`` tensor.
    """
    feature = getattr(feature, "feature", feature)
    if target.shape != (1,) + feature.shape[1:]:
        raise ValueError(f"target {target.shape} does not match feature {feature.shape}")
    return clamp(add(target, _trunk(feature, p)), 0.0, 1.0)


def dump_attention(feature, p: QeParams) -> list[np.ndarray]:
    """Spatial attention mask of every block, in trunk order."""
    feature = getattr(feature, "feature", feature)
    masks: list[Tensor] = []
    _trunk(feature, p, masks)
    return [m.data.copy() for m in masks]

"""Recursive fusion of the current feature with the previous hidden state."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .layers import Conv
from .tensor import Tensor, add, concat_channels, deform_conv2d, relu, scale


@dataclass
class HiddenState:
    feature: Tensor
    frame_index: int  # 1-based position in the sequence


@dataclass
class RfParams:
    offset_conv: Conv
    offset_head: Conv
    mix: Conv
    extract1: Conv
    extract2: Conv
    beta: float = 0.2

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "RfParams":
        f = cfg.features
        mix = Conv.init(rng, f, f, k=1, zero=True)
        mix.weight.data[:, :, 0, 0] = np.eye(f, dtype=np.float32)
        return cls(
            offset_conv=Conv.init(rng, 2 * f, f),
            offset_head=Conv.init(rng, f, 2 * f, zero=True),
            mix=mix,
            extract1=Conv.init(rng, 2 * f, f),
            extract2=Conv.init(rng, f, f),
            beta=cfg.beta,
        )


def _check_pair(h_t: HiddenState, h_prev: HiddenState) -> None:
    if h_t.feature.shape != h_prev.feature.shape:
        raise ValueError(f"hidden state shapes differ: {h_t.feature.shape} vs {h_prev.feature.shape}")
    if h_prev.frame_index != h_t.frame_index - 1:
        raise ValueError(f"non-consecutive frames {h_prev.frame_index} -> {h_t.frame_index}")


def sub_fusion_offsets(h_t: HiddenState, h_prev: HiddenState, p: RfParams) -> Tensor:
    f, h, w = h_t.feature.shape
    x = concat_channels([h_t.feature, h_prev.feature])
    return p.offset_head(relu(p.offset_conv(x))).reshape(f, 2, h, w)


def sub_fusion_align(h_t: HiddenState, h_prev: HiddenState, p: RfParams) -> Tensor:
    """Align ``h_prev`` to ``h_t``: per-channel displacement, then a 1x1 channel mix."""
    _check_pair(h_t, h_prev)
    offsets = sub_fusion_offsets(h_t, h_prev, p)
    f = h_t.feature.shape[0]
    return deform_conv2d(h_prev.feature, offsets, p.mix.weight, p.mix.bias, groups=f)


def feature_extract(h_t: HiddenState, aligned: Tensor, p: RfParams) -> Tensor:
    if aligned.shape != h_t.feature.shape:
        raise ValueError(f"aligned feature {aligned.shape} != {h_t.feature.shape}")
    return p.extract2(relu(p.extract1(concat_channels([h_t.feature, aligned]))))


def rf_step(h_t: HiddenState, h_prev: HiddenState | None, p: RfParams, beta: float | None = None) -> HiddenState:
    """One recursion: pass-through at frame 1, else ``h_t + beta * residual``."""
    beta = p.beta if beta is None else beta
    if h_t.frame_index == 1:
        if h_prev is not None:
            raise ValueError("frame 1 takes no previous hidden state")
        return HiddenState(h_t.feature, 1)
    if h_prev is None:
        raise ValueError(f"frame {h_t.frame_index} needs the previous hidden state")
    residual = feature_extract(h_t, sub_fusion_align(h_t, h_prev, p), p)
    return HiddenState(add(h_t.feature, scale(residual, beta)), h_t.frame_index)

"""Whole-network parameters and the streaming enhancement pipeline."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .config import ModelConfig
from .dsta import QeParams, dump_attention, qe_forward
from .layers import named_tensors
from .recursive import HiddenState, RfParams, rf_step
from .stdf import StdfParams, frame_window, stdf_forward
from .tensor import Tensor, no_grad


@dataclass
class ModelParams:
    stdf: StdfParams
    qe: QeParams
    rf: RfParams | None = None

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0, with_rf: bool = True) -> "ModelParams":
        rng = np.random.default_rng(seed)
        stdf = StdfParams.init(cfg, rng)
        qe = QeParams.init(cfg, rng)
        # RF draws last so stage-1 weights do not depend on with_rf
        rf = RfParams.init(cfg, rng) if with_rf else None
        return cls(stdf, qe, rf)

    def named(self) -> dict[str, Tensor]:
        return dict(named_tensors(self))

    def groups(self) -> dict[str, list[Tensor]]:
        out = {"stdf": [t for _, t in named_tensors(self.stdf)], "qe": [t for _, t in named_tensors(self.qe)]}
        if self.rf is not None:
            out["rf"] = [t for _, t in named_tensors(self.rf)]
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self, dtype=None) -> "ModelParams":
        """Deep copy, optionally casting every tensor (e.g. to float64)."""
        new = copy.deepcopy(self)
        for t in new.parameters():
            t.grad = None
            if dtype is not None:
                t.data = t.data.astype(dtype)
        return new

    def config(self, beta: float | None = None) -> ModelConfig:
        """Recover the architecture hyperparameters from tensor shapes."""
        f, n, k, _ = self.stdf.fuse_weight.shape
        if beta is None:
            beta = self.rf.beta if self.rf is not None else 0.2
        return ModelConfig(radius=(n - 1) // 2, features=f, kernel=k, blocks=len(self.qe.blocks),
                           beta=beta, preset="custom")


def _pad_to(frames: np.ndarray, multiple: int) -> tuple[np.ndarray, int, int]:
    h, w = frames.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        pad = [(0, 0)] * (frames.ndim - 2) + [(0, ph), (0, pw)]
        frames = np.pad(frames, pad, mode="reflect" if min(h, w) > max(ph, pw) else "edge")
    return frames, h, w


def frame_step(window: np.ndarray | Tensor, h_prev: HiddenState | None, index: int, params: ModelParams,
               use_rf: bool = True, beta: float | None = None) -> tuple[Tensor, HiddenState]:
    """Enhance the centre frame of one window; returns (enhanced [1,H,W], hidden state)."""
    win = window if isinstance(window, Tensor) else Tensor(window)
    radius = (win.shape[0] - 1) // 2
    h_t = HiddenState(stdf_forward(win, params.stdf), index)
    if use_rf and params.rf is not None:
        state = rf_step(h_t, h_prev if index > 1 else None, params.rf, beta)
    else:
        state = h_t
    target = win[radius:radius + 1]
    return qe_forward(state, target, params.qe), state


def forward_sequence(windows: np.ndarray, params: ModelParams, use_rf: bool = True,
                     beta: float | None = None, truncate: int | None = None) -> list[Tensor]:
    """Enhanced frames for consecutive windows ``[T, 2R+1, H, W]``, state reset at the first.

    ``truncate`` cuts the gradient path through the hidden state every that many frames.
    """
    outs = []
    state = None
    for i, win in enumerate(windows):
        if truncate and state is not None and i % truncate == 0:
            state = HiddenState(state.feature.detach(), state.frame_index)
        out, state = frame_step(win, state, i + 1, params, use_rf, beta)
        outs.append(out)
    return outs


def stream_video(frames: np.ndarray, params: ModelParams, use_rf: bool = True, beta: float | None = None,
                 on_frame: Callable[[int, Tensor], None] | None = None) -> Iterator[np.ndarray]:
    """Yield enhanced frames one at a time, carrying the hidden state across the video."""
    padded, h, w = _pad_to(np.asarray(frames, dtype=params.stdf.fuse_weight.dtype), 4)
    radius = (params.stdf.window - 1) // 2
    state = None
    with no_grad():
        for t in range(len(padded)):
            out, state = frame_step(frame_window(padded, t, radius), state, t + 1, params, use_rf, beta)
            if on_frame is not None:
                on_frame(t, state.feature)
            yield out.data[0, :h, :w]


def enhance_video(frames: np.ndarray, params: ModelParams, use_rf: bool = True, beta: float | None = None,
                  attention_sink: Callable[[int, list[np.ndarray]], None] | None = None) -> np.ndarray:
    """Enhance a ``[T, H, W]`` clip in [0, 1]; sizes not divisible by 4 are padded and cropped."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or len(frames) < 1:
        raise ValueError(f"expected frames [T, H, W], got {frames.shape}")
    on_frame = None
    if attention_sink is not None:
        h, w = frames.shape[1:]

        def on_frame(t, feature):
            attention_sink(t, [m[:, :h, :w] for m in dump_attention(feature, params.qe)])

    return np.stack(list(stream_video(frames, params, use_rf, beta, on_frame)))


def enhance_two_pass(frames: np.ndarray, params: ModelParams, use_rf: bool = True,
                     beta: float | None = None) -> np.ndarray:
    """Reference evaluation: all fused features first, then the recursion, then the head."""
    padded, h, w = _pad_to(np.asarray(frames, dtype=params.stdf.fuse_weight.dtype), 4)
    radius = (params.stdf.window - 1) // 2
    with no_grad():
        fused = [stdf_forward(Tensor(frame_window(padded, t, radius)), params.stdf) for t in range(len(padded))]
        states = []
        prev = None
        for t, h_t in enumerate(fused):
            cur = HiddenState(h_t, t + 1)
            if use_rf and params.rf is not None:
                prev = rf_step(cur, prev, params.rf, beta)
            else:
                prev = cur
            states.append(prev)
        outs = [qe_forward(s, Tensor(padded[t:t + 1]), params.qe).data[0, :h, :w] for t, s in enumerate(states)]
    return np.stack(outs)

"""Two-stage training: single-frame STDF+QE, then clip-level training with recursion."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ModelConfig
from .metrics import delta_metrics
from .model import ModelParams, enhance_video, forward_sequence, frame_step
from .recursive import RfParams
from .stdf import frame_window
from .tensor import NonFiniteError, Tensor, add, mul, sqrt

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient during optimisation."""


@dataclass
class TrainConfig:
    stage: int = 1
    total_iters: int = 1000
    base_lr: float = 1e-4
    stage2_lr_stdf_qe: float = 1e-5
    stage2_lr_rf: float = 1e-4
    decay_points: tuple[float, ...] = (0.6, 0.9)
    decay_factor: float = 0.5
    batch_size: int = 4
    crop: int = 48
    clip_len: int = 15
    eps: float = 1e-6
    seed: int = 0
    augment: bool = True
    grad_clip: float = 5.0
    truncate: int | None = None
    log_every: int = 50

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if min(self.base_lr, self.stage2_lr_rf, self.stage2_lr_stdf_qe) <= 0:
            raise ValueError("learning rates must be positive")
        if self.crop % 4:
            raise ValueError("crop must be divisible by 4")
        if self.stage == 2 and self.clip_len < 2:
            raise ValueError("stage 2 needs clip_len >= 2")


@dataclass
class TrainingSample:
    compressed: np.ndarray  # windows: [2R+1, h, w] (stage 1) or [L, 2R+1, h, w] (stage 2)
    ground_truth: np.ndarray  # [h, w] or [L, h, w]


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float]
    log_rows: list[dict]


def charbonnier_loss(pred: Tensor, gt, eps: float = 1e-6) -> Tensor:
    """Mean of ``sqrt((pred - gt)^2 + eps)``."""
    gt = gt if isinstance(gt, Tensor) else Tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = pred - gt
    return sqrt(add(mul(d, d), eps)).mean()


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Step decay: multiply by ``decay_factor`` at each fraction in ``decay_points``."""
    passed = sum(it >= p * cfg.total_iters for p in cfg.decay_points)
    return cfg.base_lr * cfg.decay_factor ** passed


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float | Sequence[float]) -> None:
    """In-place Adam update with bias correction. ``lr`` may be per-parameter."""
    lrs = [lr] * len(params) if np.isscalar(lr) else list(lr)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, rate in zip(params, lrs):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        key = id(p)
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (rate * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


# -- data ------------------------------------------------------------------

def dihedral(a: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 square symmetries on the last two axes: rotate k%4, then flip if k>=4."""
    out = np.rot90(a, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def dihedral_inverse(a: np.ndarray, k: int) -> np.ndarray:
    if k >= 4:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, -(k % 4), axes=(-2, -1)))


def augment(sample: TrainingSample, rng: np.random.Generator, k: int | None = None) -> TrainingSample:
    """Apply one random dihedral transform identically to inputs and targets."""
    h, w = sample.compressed.shape[-2:]
    if k is None:
        k = int(rng.integers(8))
    if k % 4 in (1, 3) and h != w:
        raise ValueError("rotations need square crops")
    return TrainingSample(dihedral(sample.compressed, k), dihedral(sample.ground_truth, k))


def crop_sample(gt: np.ndarray, comp: np.ndarray, t: int, cfg: TrainConfig, rng: np.random.Generator,
                radius: int = 3) -> TrainingSample:
    """Co-located random crop; stage 1 at frame ``t``, stage 2 for ``clip_len`` frames from ``t``."""
    if gt.shape != comp.shape:
        raise ValueError("ground truth and compressed clips differ in shape")
    n, h, w = gt.shape
    if cfg.crop > min(h, w):
        raise ValueError(f"crop {cfg.crop} larger than frame {h}x{w}")
    length = 1 if cfg.stage == 1 else cfg.clip_len
    if t < 0 or t + length > n:
        raise IndexError(f"frames {t}..{t + length - 1} outside clip of {n}")
    r0 = int(rng.integers(h - cfg.crop + 1))
    c0 = int(rng.integers(w - cfg.crop + 1))
    sl = (slice(r0, r0 + cfg.crop), slice(c0, c0 + cfg.crop))
    wins = np.stack([frame_window(comp, i, radius)[(slice(None),) + sl] for i in range(t, t + length)])
    targets = gt[(slice(t, t + length),) + sl]
    if cfg.stage == 1:
        return TrainingSample(wins[0], targets[0])
    return TrainingSample(wins, targets)


# -- loops -----------------------------------------------------------------

def _validate(params: ModelParams, val, use_rf: bool) -> float:
    comp, gt = val
    enh = enhance_video(comp, params, use_rf=use_rf)
    return delta_metrics(enh, comp, gt)[0]


def _check_loss(value: float, it: int, lr, history: list[float]) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at iteration {it} (lr={lr}); recent losses {history[-5:]}")


class _Logger:
    """Progress rows; the CSV is streamed to a side file and renamed on success."""

    def __init__(self, path, every: int):
        self.rows: list[dict] = []
        self.every = every
        self.path = path
        self.tmp = f"{path}.partial" if path else None
        self.fh = open(self.tmp, "w", encoding="utf-8", newline="") if path else None
        self.writer = csv.writer(self.fh) if self.fh else None
        if self.writer:
            self.writer.writerow(["iter", "lr", "loss", "dpsnr_val"])

    def __call__(self, it, lr, loss, dpsnr):
        row = {"iter": it, "lr": lr, "loss": loss, "dpsnr_val": dpsnr}
        self.rows.append(row)
        if self.writer:
            self.writer.writerow([it, lr, loss, "" if dpsnr is None else dpsnr])
            self.fh.flush()
        log.info("iter %d lr %.3g loss %.6f dpsnr %s", it, lr, loss, dpsnr)

    def close(self, ok: bool):
        if not self.fh:
            return
        self.fh.close()
        if ok:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)


def train_stage1(dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                 params: ModelParams | None = None, val=None, log_path=None,
                 on_step: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Single-frame training of STDF and QE with the recursion disabled.

    ``dataset`` is a sequence of ``(compressed, ground_truth)`` clips ``[T, H, W]``.
    """
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    if params is None:
        if model_cfg is None:
            raise ValueError("need model_cfg or params")
        params = ModelParams.init(model_cfg, cfg.seed, with_rf=False)
    else:
        params = params.clone()
    radius = (params.stdf.window - 1) // 2
    rng = np.random.default_rng(cfg.seed)
    groups = params.groups()
    trainable = groups["stdf"] + groups["qe"]
    state = AdamState()
    losses: list[float] = []
    logger = _Logger(log_path, cfg.log_every)
    ok = False
    try:
        for it in range(cfg.total_iters):
            lr = lr_schedule(it, cfg)
            params.zero_grad()
            terms = []
            try:
                for _ in range(cfg.batch_size):
                    comp, gt = dataset[int(rng.integers(len(dataset)))]
                    sample = crop_sample(gt, comp, int(rng.integers(len(gt))), cfg, rng, radius)
                    if cfg.augment:
                        sample = augment(sample, rng)
                    out, _ = frame_step(sample.compressed, None, 1, params, use_rf=False)
                    terms.append(charbonnier_loss(out, sample.ground_truth[None], cfg.eps))
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite activation at iteration {it}") from exc
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            loss = loss * (1.0 / len(terms))
            value = loss.item()
            _check_loss(value, it, lr, losses)
            losses.append(value)
            loss.backward()
            if on_step is not None:
                on_step(it, params)
            clip_grad_norm(trainable, cfg.grad_clip)
            adam_step(trainable, state, lr)
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
                logger(it, lr, value, _validate(params, val, False) if val is not None else None)
        ok = True
    finally:
        logger.close(ok)
    return TrainResult(params, losses, logger.rows)


def train_stage2(dataset, stage1_params: ModelParams, cfg: TrainConfig, val=None, log_path=None,
                 on_step: Callable[[int, ModelParams], None] | None = None) -> TrainResult:
    """Clip-level training with the recursion, back-propagating through the clip."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    params = stage1_params.clone()
    if params.rf is None:
        params.rf = RfParams.init(params.config(), np.random.default_rng(cfg.seed + 1))
    radius = (params.stdf.window - 1) // 2
    rng = np.random.default_rng(cfg.seed)
    usable = [d for d in dataset if len(d[1]) >= cfg.clip_len]
    if len(usable) < len(dataset):
        log.warning("skipping %d clip(s) shorter than %d frames", len(dataset) - len(usable), cfg.clip_len)
    if not usable:
        raise ValueError(f"no clip has at least {cfg.clip_len} frames")
    groups = params.groups()
    trainable = groups["stdf"] + groups["qe"] + groups["rf"]
    rf_ids = {id(t) for t in groups["rf"]}
    lrs = [cfg.stage2_lr_rf if id(t) in rf_ids else cfg.stage2_lr_stdf_qe for t in trainable]
    state = AdamState()
    losses: list[float] = []
    logger = _Logger(log_path, cfg.log_every)
    ok = False
    try:
        for it in range(cfg.total_iters):
            params.zero_grad()
            comp, gt = usable[int(rng.integers(len(usable)))]
            start = int(rng.integers(len(gt) - cfg.clip_len + 1))
            sample = crop_sample(gt, comp, start, cfg, rng, radius)
            if cfg.augment:
                sample = augment(sample, rng)
            try:
                outs = forward_sequence(sample.compressed, params, use_rf=True, truncate=cfg.truncate)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite activation at iteration {it}") from exc
            loss = charbonnier_loss(outs[0], sample.ground_truth[0:1], cfg.eps)
            for i in range(1, len(outs)):
                loss = loss + charbonnier_loss(outs[i], sample.ground_truth[i:i + 1], cfg.eps)
            loss = loss * (1.0 / len(outs))
            value = loss.item()
            _check_loss(value, it, cfg.stage2_lr_rf, losses)
            losses.append(value)
            loss.backward()
            if on_step is not None:
                on_step(it, params)
            clip_grad_norm(trainable, cfg.grad_clip)
            adam_step(trainable, state, lrs)
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
                logger(it, cfg.stage2_lr_stdf_qe, value, _validate(params, val, True) if val is not None else None)
        ok = True
    finally:
        logger.close(ok)
    return TrainResult(params, losses, logger.rows)

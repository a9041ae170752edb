"""Fast invariant and gradient checks run by ``rfda check``."""
from __future__ import annotations

import os
import tempfile
import time

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .degrade import degrade_clip
from .dsta import DstaParams, dsta_block, attention_maps
from .fileio import WeightFileError, load_weights, read_weight_entries, save_weights
from .metrics import delta_metrics, psnr, quality_fluctuation, ssim
from .model import ModelParams, enhance_two_pass, enhance_video
from .recursive import HiddenState, rf_step
from .synthetic import synthetic_clip
from .trainer import charbonnier_loss

TOL_GRAD = 1e-4


def _t64(rng, *shape, grad=False):
    return T.Tensor(rng.standard_normal(shape), requires_grad=grad)


def kernel_checks(rng, trials: int = 100):
    worst = 0.0
    for _ in range(trials):
        c_in, c_out = rng.integers(1, 5, size=2)
        h, w = rng.integers(3, 17, size=2)
        k = int(rng.choice([1, 3]))
        groups = int(rng.choice([g for g in range(1, c_in + 1) if c_in % g == 0]))
        x = _t64(rng, c_in, h, w)
        wt = _t64(rng, c_out, c_in, k, k)
        b = _t64(rng, c_out)
        off = T.Tensor(np.zeros((groups, 2 * k * k, h, w)))
        ref = T.conv2d(x, wt, b, 1, (k - 1) // 2)
        got = T.deform_conv2d(x, off, wt, b, groups)
        worst = max(worst, float(np.abs(ref.data - got.data).max()))
    yield "deform_conv2d(zero offsets) == conv2d", worst <= 1e-6


def _frac_offsets(rng, shape):
    """Offsets whose sample points sit well away from integer coordinates."""
    return rng.uniform(0.15, 0.85, size=shape) * rng.choice([-1, 1], size=shape) + rng.integers(-1, 2, size=shape)


def gradient_checks(rng):
    x = _t64(rng, 2, 6, 5)
    w = _t64(rng, 3, 2, 3, 3)
    b = _t64(rng, 3)
    gt = rng.standard_normal((3, 6, 5))

    def loss_of(y):
        return charbonnier_loss(y, gt, 1e-6)

    yield "grad conv2d/x", T.finite_diff_check(lambda v: loss_of(T.conv2d(v, w, b, 1, 1)), x) < TOL_GRAD
    yield "grad conv2d/w", T.finite_diff_check(lambda v: loss_of(T.conv2d(x, v, b, 1, 1)), w) < TOL_GRAD
    probe_s = T.Tensor(rng.standard_normal((3, 3, 3)))
    yield "grad conv2d stride2/x", T.finite_diff_check(
        lambda v: (T.conv2d(v, w, b, 2, 1) * probe_s).sum(), x) < TOL_GRAD

    off = T.Tensor(_frac_offsets(rng, (2, 18, 6, 5)))
    wd = _t64(rng, 3, 2, 3, 3)
    probe = T.Tensor(rng.standard_normal((3, 6, 5)))
    yield "grad deform/x", T.finite_diff_check(lambda v: (T.deform_conv2d(v, off, wd, b, 2) * probe).sum(), x) < TOL_GRAD
    yield "grad deform/offsets", T.finite_diff_check(
        lambda v: (T.deform_conv2d(x, v, wd, b, 2) * probe).sum(), off, h=1e-5) < TOL_GRAD
    yield "grad deform/w", T.finite_diff_check(lambda v: (T.deform_conv2d(x, off, v, b, 2) * probe).sum(), wd) < TOL_GRAD

    probe_p = T.Tensor(rng.standard_normal((2, 3, 3)))
    yield "grad pool2d", T.finite_diff_check(lambda v: (T.pool2d(v, "avg", 3, 2, 1) * probe_p).sum(), x) < TOL_GRAD
    probe_u = T.Tensor(rng.standard_normal((2, 12, 10)))
    yield "grad upsample", T.finite_diff_check(lambda v: (T.upsample_bilinear(v, 2) * probe_u).sum(), x) < TOL_GRAD
    yield "grad sigmoid", T.finite_diff_check(lambda v: (T.sigmoid(v) * probe_u[:, :6, :5]).sum(), x) < TOL_GRAD
    shifted = T.Tensor(x.data + 0.3 * np.sign(x.data))
    yield "grad relu", T.finite_diff_check(lambda v: (T.relu(v) * probe_u[:, :6, :5]).sum(), shifted) < TOL_GRAD
    cw = _t64(rng, 2, 1, 1)
    yield "grad mul broadcast", T.finite_diff_check(lambda v: (T.mul(x, v) * probe_u[:, :6, :5]).sum(), cw) < TOL_GRAD
    v1 = _t64(rng, 4)
    fw = _t64(rng, 3, 4)
    fb = _t64(rng, 3)
    yield "grad fully_connected", T.finite_diff_check(
        lambda v: (T.fully_connected(v, fw, fb) * T.Tensor(np.array([1.0, -2.0, 0.5]))).sum(), v1) < TOL_GRAD
    yield "grad global_avg_pool", T.finite_diff_check(
        lambda v: (T.global_avg_pool(v) * T.Tensor(np.array([1.5, -1.0]))).sum(), x) < TOL_GRAD
    img = _t64(rng, 5, 5)
    rows = T.Tensor(np.array([0.3, 2.6, 3.4]))
    cols = T.Tensor(np.array([1.7, 0.2, 3.9]))
    yield "grad bilinear/coords", T.finite_diff_check(
        lambda v: (T.bilinear_sample(img, v, cols) * T.Tensor(np.array([1.0, 2.0, -1.0]))).sum(), rows) < TOL_GRAD


def rf_checks(rng, cfg: ModelConfig):
    p = ModelParams.init(cfg, 3).clone(np.float64)
    for t in (p.rf.offset_head.weight,):
        t.data[:] = rng.normal(0, 0.01, t.shape)
    f = cfg.features
    h1 = HiddenState(_t64(rng, f, 8, 8), 1)
    yield "rf t=1 pass-through", np.array_equal(rf_step(h1, None, p.rf).feature.data, h1.feature.data)
    h2 = HiddenState(_t64(rng, f, 8, 8), 2)
    yield "rf beta=0 identity", np.array_equal(rf_step(h2, h1, p.rf, beta=0.0).feature.data, h2.feature.data)
    d = [rf_step(h2, h1, p.rf, beta=b).feature.data - h2.feature.data for b in (0.1, 0.2, 0.4)]
    ok = all(np.linalg.norm(di - d[0] * s) <= 1e-12 * np.linalg.norm(di) for di, s in zip(d[1:], (2.0, 4.0)))
    yield "rf residual linear in beta", ok


def dsta_checks(rng, cfg: ModelConfig):
    p = DstaParams.init(cfg, rng)
    inside = True
    for _ in range(10):
        x = T.Tensor(rng.standard_normal((cfg.features, 16, 16)).astype(np.float32))
        m, c = attention_maps(x, p)
        inside &= bool(np.all((m.data > 0) & (m.data < 1)) and np.all((c.data > 0) & (c.data < 1)))
    yield "dsta masks in (0,1)", inside
    for layer in (p.spatial, p.fc1, p.fc2):
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0
    x = T.Tensor(rng.standard_normal((cfg.features, 16, 16)))
    yield "dsta zero attention -> 0.25x", np.allclose(dsta_block(x, p).data, 0.25 * x.data, rtol=1e-6, atol=0)
    params = ModelParams.init(cfg, 0)
    yield "qe structure L+2 convs, L blocks", (params.qe.conv_count() == cfg.blocks + 2
                                               and len(params.qe.blocks) == cfg.blocks)


def pipeline_checks(rng, cfg: ModelConfig):
    p = ModelParams.init(cfg, 5)
    p.stdf.head.weight.data[:] = rng.normal(0, 1e-3, p.stdf.head.weight.shape)
    p.rf.offset_head.weight.data[:] = rng.normal(0, 1e-3, p.rf.offset_head.weight.shape)
    clip = rng.random((int(rng.integers(1, 8)), 16, 20)).astype(np.float32)
    yield "streaming == two-pass", np.array_equal(enhance_video(clip, p), enhance_two_pass(clip, p))
    p.qe.exit.weight.data[:] = 0
    p.qe.exit.bias.data[:] = 0
    yield "zero exit conv -> identity", np.array_equal(enhance_video(clip, p), clip)
    gt = synthetic_clip(4, 24, 24, seed=1)
    yield "degrade monotone in q", psnr(degrade_clip(gt, 32)[0], gt[0]) < psnr(degrade_clip(gt, 8)[0], gt[0])


def metric_checks(rng):
    a = rng.random((16, 16))
    yield "psnr uniform 0.1 -> 20 dB", abs(psnr(a * 0.5, a * 0.5 + 0.1) - 20.0) <= 1e-6
    yield "ssim(a,a) == 1", ssim(a, a) == 1.0
    pvd, sd = quality_fluctuation([30, 32, 30, 32])
    yield "sd [30,32,30,32] == 1", sd == 1.0
    yield "pvd [30,32,30,32,30] == 2", quality_fluctuation([30, 32, 30, 32, 30])[0] == 2.0
    clip = rng.random((3, 12, 12))
    yield "delta_metrics(x,x,gt) == 0", delta_metrics(clip, clip, rng.random((3, 12, 12))) == (0.0, 0.0)


def io_checks(rng, cfg: ModelConfig):
    p = ModelParams.init(cfg, 9)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.rfda")
        save_weights(p, path)
        q = load_weights(path, cfg)
        yield "weights round trip", all(np.array_equal(a.data, b.data) for a, b in zip(p.parameters(), q.parameters()))
        raw = open(path, "rb").read()
        errors = 0
        cuts = rng.choice(len(raw) - 1, size=10, replace=False)
        for cut in cuts:
            with open(path, "wb") as fh:
                fh.write(raw[:cut])
            try:
                read_weight_entries(path)
            except WeightFileError:
                errors += 1
        yield "truncated files rejected", errors == len(cuts)


def run_checks(seed: int = 0, out=print) -> int:
    """Run every suite; returns the number of failures."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(radius=1, features=16, kernel=3, blocks=1, preset="check")
    suites = {
        "kernels": lambda: kernel_checks(rng),
        "gradients": lambda: gradient_checks(rng),
        "recursive_fusion": lambda: rf_checks(rng, cfg),
        "attention": lambda: dsta_checks(rng, cfg),
        "pipeline": lambda: pipeline_checks(rng, cfg),
        "metrics": lambda: metric_checks(rng),
        "serialization": lambda: io_checks(rng, cfg),
    }
    failures = 0
    for name, suite in suites.items():
        start = time.perf_counter()
        results = list(suite())
        passed = sum(ok for _, ok in results)
        failures += len(results) - passed
        out(f"{name}: {passed}/{len(results)} passed ({time.perf_counter() - start:.2f}s)")
        for label, ok in results:
            if not ok:
                out(f"  FAIL {label}")
    return failures

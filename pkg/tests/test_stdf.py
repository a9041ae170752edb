import numpy as np
import pytest

from rfda import tensor as T
from rfda.config import ModelConfig
from rfda.stdf import StdfParams, frame_window, fuse_frames, predict_offsets, stdf_forward
from rfda.tensor import Tensor, finite_diff_check


def params64(cfg, seed=0, head_bias=None):
    p = StdfParams.init(cfg, np.random.default_rng(seed))
    for name in ("unet_in", "enc1_down", "enc1_conv", "enc2_down", "enc2_conv", "dec1", "dec2", "head"):
        conv = getattr(p, name)
        conv.weight = Tensor(conv.weight.data.astype(np.float64))
        conv.bias = Tensor(conv.bias.data.astype(np.float64))
    p.fuse_weight = Tensor(p.fuse_weight.data.astype(np.float64))
    p.fuse_bias = Tensor(p.fuse_bias.data.astype(np.float64))
    if head_bias is not None:
        rng = np.random.default_rng(seed + 100)
        p.head.weight.data[:] = rng.normal(0, 1e-3, p.head.weight.shape)
        p.head.bias.data[:] = head_bias
    return p


def test_window_clamps_at_edges():
    frames = np.arange(5)[:, None, None] * np.ones((5, 2, 2))
    assert frame_window(frames, 0, 2)[:, 0, 0].tolist() == [0, 0, 0, 1, 2]
    assert frame_window(frames, 4, 2)[:, 0, 0].tolist() == [2, 3, 4, 4, 4]
    assert frame_window(frames, 2, 2)[:, 0, 0].tolist() == [0, 1, 2, 3, 4]
    assert frame_window(frames, 0, 0).shape == (1, 2, 2)


def test_single_frame_video_window():
    frames = np.random.default_rng(0).random((1, 4, 4))
    win = frame_window(frames, 0, 3)
    assert win.shape == (7, 4, 4) and all(np.array_equal(w, frames[0]) for w in win)


def test_output_and_offset_shapes(small_cfg):
    p = StdfParams.init(small_cfg, np.random.default_rng(0))
    win = Tensor(np.random.default_rng(1).random((3, 12, 16)).astype(np.float32))
    assert predict_offsets(win, p).shape == (3, 18, 12, 16)
    assert stdf_forward(win, p).shape == (16, 12, 16)


def test_zero_head_fusion_is_plain_grouped_conv(small_cfg):
    # the head starts at zero, so fusion reduces to a grouped 3x3 convolution of the window
    p = StdfParams.init(small_cfg, np.random.default_rng(0))
    win = Tensor(np.random.default_rng(1).random((3, 8, 8)).astype(np.float32))
    ref = T.conv2d(win, p.fuse_weight, p.fuse_bias, 1, 1)
    assert np.allclose(stdf_forward(win, p).data, ref.data, atol=1e-6)


def test_radius_zero_degenerates_to_single_frame():
    cfg = ModelConfig(radius=0, features=16, blocks=1)
    p = StdfParams.init(cfg, np.random.default_rng(0))
    assert p.window == 1 and p.fuse_weight.shape == (16, 1, 3, 3)
    win = Tensor(np.random.default_rng(1).random((1, 8, 8)).astype(np.float32))
    assert np.allclose(stdf_forward(win, p).data, T.conv2d(win, p.fuse_weight, p.fuse_bias, 1, 1).data, atol=1e-6)


def test_size_must_be_multiple_of_four(small_cfg):
    p = StdfParams.init(small_cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        stdf_forward(Tensor(np.zeros((3, 10, 8), dtype=np.float32)), p)
    with pytest.raises(ValueError):
        stdf_forward(Tensor(np.zeros((5, 8, 8), dtype=np.float32)), p)


def test_fuse_rejects_wrong_offset_groups(small_cfg):
    p = StdfParams.init(small_cfg, np.random.default_rng(0))
    with pytest.raises(ValueError):
        fuse_frames(Tensor(np.zeros((3, 8, 8))), Tensor(np.zeros((2, 18, 8, 8))), p)


def test_pure_function_of_window(small_cfg):
    p = params64(small_cfg, head_bias=0.3)
    win = Tensor(np.random.default_rng(1).random((3, 8, 8)))
    a = stdf_forward(win, p).data.copy()
    stdf_forward(Tensor(np.random.default_rng(2).random((3, 8, 8))), p)
    assert np.array_equal(stdf_forward(win, p).data, a)


def test_translation_covariance_on_interior(small_cfg):
    p = params64(small_cfg, seed=3)
    rng = np.random.default_rng(4)
    p.head.weight.data[:] = rng.normal(0, 0.02, p.head.weight.shape)
    big = rng.random((3, 68, 68))
    a = Tensor(big[:, :64, :64])
    b = Tensor(big[:, 4:, 4:])
    margin = 24  # beyond the receptive field of the U-Net plus the fusion kernel
    inner = slice(margin + 4, 64 - margin)
    shifted = slice(margin, 60 - margin)
    oa, ob = predict_offsets(a, p).data, predict_offsets(b, p).data
    assert np.allclose(oa[..., inner, inner], ob[..., shifted, shifted], rtol=0, atol=1e-12)
    fa, fb = stdf_forward(a, p).data, stdf_forward(b, p).data
    assert np.allclose(fa[:, inner, inner], fb[:, shifted, shifted], rtol=0, atol=1e-12)


def test_gradient_wrt_frame_pixels(small_cfg):
    p = params64(small_cfg, head_bias=0.5)
    win = Tensor(0.2 + 0.6 * np.random.default_rng(5).random((3, 8, 8)))
    probe = Tensor(np.random.default_rng(6).standard_normal((16, 8, 8)))
    err = finite_diff_check(lambda v: (stdf_forward(v, p) * probe).sum(), win, coords=80,
                            rng=np.random.default_rng(7))
    assert err < 1e-4

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.fft import dctn

from rfda.cli import cli_main
from rfda.config import ModelConfig
from rfda.degrade import JPEG_LUMA, dct_matrix, degrade_clip, degrade_frame
from rfda.fileio import (
    VideoClip,
    WeightFileError,
    atomic_write,
    infer_config,
    load_weights,
    read_pgm,
    read_weight_entries,
    read_y4_raw,
    save_weights,
    to_bytes,
    write_pgm,
    write_y_raw,
)
from rfda.metrics import psnr
from rfda.model import ModelParams, enhance_two_pass, enhance_video
from rfda.synthetic import synthetic_clip


# -- video I/O ---------------------------------------------------------------

def test_y_only_size_arithmetic(tmp_path):
    f = tmp_path / "a.y"
    f.write_bytes(bytes(range(32)))
    clip = read_y4_raw(f, 4, 4, y_only=True)
    assert clip.frame_count == 2 and (clip.height, clip.width) == (4, 4)


def test_normalisation_endpoints(tmp_path):
    f = tmp_path / "a.y"
    f.write_bytes(bytes([0, 255, 0, 255]))
    assert read_y4_raw(f, 2, 2, y_only=True).frames.ravel().tolist() == [0.0, 1.0, 0.0, 1.0]


def test_yuv420_skips_chroma(tmp_path):
    y = np.arange(16, dtype=np.uint8).reshape(4, 4)
    frame = y.tobytes() + bytes([200] * 4) + bytes([50] * 4)
    (tmp_path / "v.yuv").write_bytes(frame * 3)
    clip = read_y4_raw(tmp_path / "v.yuv", 4, 4)
    assert clip.frame_count == 3
    assert np.array_equal(to_bytes(clip.frames[2]), y)


def test_size_mismatch_is_an_error(tmp_path):
    (tmp_path / "v").write_bytes(bytes(33))
    with pytest.raises(ValueError):
        read_y4_raw(tmp_path / "v", 4, 4, y_only=True)
    with pytest.raises(ValueError):
        read_y4_raw(tmp_path / "v", 4, 4)
    with pytest.raises(OSError):
        read_y4_raw(tmp_path / "missing", 4, 4)


def test_rounding_half_up():
    assert to_bytes(np.array([0.0, 0.5, 1.0, -0.2, 1.3])).tolist() == [0, 128, 255, 0, 255]


@settings(max_examples=30, deadline=None)
@given(st.binary(min_size=2 * 6 * 5, max_size=2 * 6 * 5))
def test_raw_round_trip_byte_exact(tmp_path_factory, raw):
    d = tmp_path_factory.mktemp("rt")
    (d / "in.y").write_bytes(raw)
    write_y_raw(read_y4_raw(d / "in.y", 6, 5, y_only=True), d / "out.y")
    assert (d / "out.y").read_bytes() == raw


def test_pgm_round_trip(tmp_path, rng):
    img = to_bytes(rng.random((7, 9))) / 255.0
    write_pgm(img, tmp_path / "a.pgm")
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "b.pgm")


def test_clip_validation():
    with pytest.raises(ValueError):
        VideoClip(np.zeros((0, 4, 4)))
    with pytest.raises(ValueError):
        VideoClip(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        VideoClip(np.full((1, 2, 2), 1.5))


def test_atomic_write_leaves_nothing_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    with pytest.raises(RuntimeError):
        with atomic_write(target) as fh:
            fh.write(b"partial")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []


def test_atomic_write_keeps_old_file_on_failure(tmp_path):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")
    with pytest.raises(RuntimeError):
        with atomic_write(target) as fh:
            fh.write(b"new")
            raise RuntimeError
    assert target.read_bytes() == b"old" and len(list(tmp_path.iterdir())) == 1


# -- weights -----------------------------------------------------------------

@pytest.fixture
def weights(tmp_path, small_cfg):
    params = ModelParams.init(small_cfg, 3)
    path = tmp_path / "w.rfda"
    save_weights(params, path)
    return params, path


def test_weight_round_trip_bit_exact(weights, small_cfg):
    params, path = weights
    back = load_weights(path, small_cfg)
    a, b = params.named(), back.named()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k].data, b[k].data) and b[k].dtype == np.float32 for k in a)


def test_weight_header_layout(weights):
    params, path = weights
    raw = path.read_bytes()
    assert raw[:4] == b"RFDA"
    version, count = struct.unpack("<HI", raw[4:10])
    assert version == 1 and count == len(params.named())
    (name_len,) = struct.unpack("<H", raw[10:12])
    first = next(iter(params.named()))
    assert raw[12:12 + name_len].decode() == first


def test_payload_size_matches_dims(weights):
    params, path = weights
    header = 10 + sum(2 + len(n.encode()) + 1 + 4 * t.ndim for n, t in params.named().items())
    payload = sum(t.data.size * 4 for t in params.named().values())
    assert path.stat().st_size == header + payload


def test_truncations_give_structured_errors(weights):
    _, path = weights
    raw = path.read_bytes()
    cuts = np.random.default_rng(0).choice(len(raw), size=10, replace=False)
    for cut in cuts:
        path.write_bytes(raw[:cut])
        with pytest.raises(WeightFileError):
            load_weights(path)


def test_bad_magic_version_and_trailing_bytes(weights):
    _, path = weights
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(WeightFileError, match="magic"):
        read_weight_entries(path)
    path.write_bytes(raw[:4] + struct.pack("<H", 9) + raw[6:])
    with pytest.raises(WeightFileError, match="version"):
        read_weight_entries(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(WeightFileError, match="trailing"):
        read_weight_entries(path)


def test_shape_mismatch_names_tensor(weights):
    _, path = weights
    with pytest.raises(WeightFileError, match="stdf"):
        load_weights(path, ModelConfig(radius=1, features=32, blocks=1))


def test_infer_config(weights, small_cfg):
    _, path = weights
    cfg = infer_config(read_weight_entries(path))
    assert (cfg.radius, cfg.features, cfg.kernel, cfg.blocks) == (1, 16, 3, 1)
    cfg2 = infer_config({"stdf.fuse_weight": np.zeros((32, 7, 3, 3)),
                         "qe.blocks.0.x": np.zeros(1), "qe.blocks.1.x": np.zeros(1)})
    assert (cfg2.radius, cfg2.features, cfg2.blocks) == (3, 32, 2)
    with pytest.raises(WeightFileError):
        infer_config({})


def test_stage1_weights_into_stage2(tmp_path, small_cfg):
    stage1 = ModelParams.init(small_cfg, 5, with_rf=False)
    path = tmp_path / "s1.rfda"
    save_weights(stage1, path)
    assert not any(k.startswith("rf.") for k in read_weight_entries(path))
    with pytest.raises(WeightFileError, match="recursive"):
        load_weights(path, with_rf=True)
    p2 = load_weights(path, with_rf=True, init_missing_rf=True)
    names1, names2 = set(stage1.named()), set(p2.named())
    assert names1 < names2 and all(k.startswith("rf.") for k in names2 - names1)
    assert all(np.array_equal(stage1.named()[k].data, p2.named()[k].data) for k in names1)


def test_stage2_weights_loaded_without_rf(weights):
    params, path = weights
    p = load_weights(path, with_rf=False)
    assert p.rf is None and set(p.named()) == {k for k in params.named() if not k.startswith("rf.")}


# -- degrader ----------------------------------------------------------------

def test_dct_matches_scipy(rng):
    d = dct_matrix()
    assert np.allclose(d @ d.T, np.eye(8), atol=1e-12)
    block = rng.random((8, 8))
    assert np.allclose(d @ block @ d.T, dctn(block, type=2, norm="ortho"), atol=1e-12)


def test_constant_frame_survives():
    frame = np.full((16, 24), 0.4)
    assert np.allclose(degrade_frame(frame, 8), frame, atol=0.5 / 255)


def test_unit_table_is_near_lossless():
    clip = synthetic_clip(2, 32, 32, seed=1)
    out = degrade_clip(clip, 1, table=np.ones((8, 8)))
    assert psnr(out, clip) > 45


def test_quality_decreases_with_q():
    clip = synthetic_clip(3, 48, 48, seed=2)
    values = [psnr(degrade_clip(clip, q), clip) for q in (2, 8, 16, 32, 64)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_degrade_deterministic_and_bounded():
    clip = synthetic_clip(2, 20, 28, seed=3)  # not a multiple of 8
    a, b = degrade_clip(clip, 24), degrade_clip(clip, 24)
    assert np.array_equal(a, b) and a.shape == clip.shape and a.dtype == clip.dtype
    assert a.min() >= 0 and a.max() <= 1


def test_degrade_rejects_small_q():
    with pytest.raises(ValueError):
        degrade_frame(np.zeros((8, 8)), 0.5)


def test_table_is_standard():
    assert JPEG_LUMA[0, 0] == 16 and JPEG_LUMA[7, 7] == 99


# -- enhancement -------------------------------------------------------------

def _trained_like(cfg, seed):
    p = ModelParams.init(cfg, seed)
    r = np.random.default_rng(seed)
    for t in p.parameters():
        t.data += r.normal(0, 0.02, t.shape).astype(t.dtype)
    return p


@pytest.mark.parametrize("seed", range(20))
def test_streaming_equals_two_pass(seed, small_cfg):
    r = np.random.default_rng(seed)
    t = int(r.integers(1, 31))
    clip = r.random((t, 8, 12)).astype(np.float32)
    p = _trained_like(small_cfg, seed)
    assert np.array_equal(enhance_video(clip, p), enhance_two_pass(clip, p))


def test_zero_exit_returns_input(small_cfg, rng):
    p = ModelParams.init(small_cfg, 0)
    p.qe.exit.weight.data[:] = 0
    p.qe.exit.bias.data[:] = 0
    clip = rng.random((4, 8, 8)).astype(np.float32)
    assert np.array_equal(enhance_video(clip, p), clip)


def test_single_frame_and_odd_sizes(small_cfg, rng):
    p = _trained_like(small_cfg, 1)
    assert enhance_video(rng.random((1, 8, 8)), p).shape == (1, 8, 8)
    out = enhance_video(rng.random((3, 10, 13)), p)
    assert out.shape == (3, 10, 13) and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        enhance_video(rng.random((8, 8)), p)


def test_attention_sink_gets_cropped_masks(small_cfg, rng):
    p = _trained_like(small_cfg, 2)
    seen = []
    enhance_video(rng.random((3, 10, 14)), p, attention_sink=lambda t, m: seen.append((t, m)))
    assert [t for t, _ in seen] == [0, 1, 2]
    assert all(len(m) == 1 and m[0].shape == (1, 10, 14) for _, m in seen)


def test_no_rf_matches_stage1_model(small_cfg, rng):
    p = _trained_like(small_cfg, 3)
    clip = rng.random((4, 8, 8)).astype(np.float32)
    stage1 = ModelParams(stdf=p.stdf, rf=None, qe=p.qe)
    assert np.array_equal(enhance_video(clip, p, use_rf=False), enhance_video(clip, stage1))


# -- CLI ---------------------------------------------------------------------

@pytest.fixture
def dataset(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    args = ["--width", "32", "--height", "32"]
    assert cli_main(["synth", "--out", str(d / "gt.y"), "--frames", "6", "--width", "32", "--height", "32"]) == 0
    assert cli_main(["degrade", "--in", str(d / "gt.y"), "--out", str(d / "comp.y"), "--q", "24", *args]) == 0
    (d / "manifest.json").write_text(json.dumps(
        {"width": 32, "height": 32, "format": "y", "pairs": [{"gt": "gt.y", "compressed": "comp.y"}]}))
    return d


def test_cli_end_to_end(dataset, tmp_path, capsys):
    d = dataset
    dims = ["--width", "32", "--height", "32"]
    s1, s2 = tmp_path / "s1.rfda", tmp_path / "s2.rfda"
    train = ["--data-dir", str(d), "--config-preset", "tiny", "--seed", "0", "--crop", "32",
             "--batch-size", "1", "--clip-len", "4", "--log-every", "1"]
    assert cli_main(["train", "--stage", "1", "--iters", "3", "--out-weights", str(s1), *train]) == 0
    assert cli_main(["train", "--stage", "2", "--iters", "2", "--out-weights", str(s2),
                     "--in-weights", str(s1), *train]) == 0
    assert s2.with_name("s2.rfda.log.png").exists() and s1.with_name("s1.rfda.log.csv").exists()
    assert any(k.startswith("rf.") for k in read_weight_entries(s2))

    enh, attn = tmp_path / "enh.y", tmp_path / "attn"
    assert cli_main(["enhance", "--in", str(d / "comp.y"), "--weights", str(s2), "--out", str(enh),
                     "--dump-attention", str(attn), *dims]) == 0
    assert enh.stat().st_size == 6 * 32 * 32
    assert len(list(attn.glob("*.pgm"))) == 6

    report = tmp_path / "rep.json"
    assert cli_main(["evaluate", "--enhanced", str(enh), "--compressed", str(d / "comp.y"),
                     "--gt", str(d / "gt.y"), "--report", str(report), *dims]) == 0
    data = json.loads(report.read_text())
    assert len(data["per_frame_psnr"]) == 6
    assert report.with_suffix(".csv").exists() and (tmp_path / "rep_psnr.png").exists()
    assert "dPSNR" in capsys.readouterr().out


def test_cli_evaluate_same_input_zero_delta(dataset, tmp_path):
    d = dataset
    report = tmp_path / "r.json"
    assert cli_main(["evaluate", "--enhanced", str(d / "comp.y"), "--compressed", str(d / "comp.y"),
                     "--gt", str(d / "gt.y"), "--report", str(report), "--width", "32", "--height", "32"]) == 0
    assert json.loads(report.read_text())["delta_psnr"] == 0


def test_cli_usage_errors_exit_1(tmp_path, capsys):
    assert cli_main(["degrade", "--bogus"]) == 1
    assert cli_main(["frobnicate"]) == 1
    assert cli_main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_stage2_needs_in_weights(dataset, tmp_path):
    assert cli_main(["train", "--stage", "2", "--data-dir", str(dataset), "--iters", "1",
                     "--out-weights", str(tmp_path / "w")]) == 1
    assert not (tmp_path / "w").exists()


def test_cli_runtime_failures_exit_2(tmp_path, capsys):
    assert cli_main(["degrade", "--in", str(tmp_path / "missing.y"), "--out", str(tmp_path / "o.y"),
                     "--q", "8", "--width", "4", "--height", "4"]) == 2
    (tmp_path / "bad.rfda").write_bytes(b"RFDA\x01")
    (tmp_path / "in.y").write_bytes(bytes(16))
    assert cli_main(["enhance", "--in", str(tmp_path / "in.y"), "--weights", str(tmp_path / "bad.rfda"),
                     "--out", str(tmp_path / "o.y"), "--width", "4", "--height", "4"]) == 2
    assert not (tmp_path / "o.y").exists()
    assert "WeightFileError" in capsys.readouterr().err


def test_cli_help_exits_zero(capsys):
    assert cli_main(["--help"]) == 0

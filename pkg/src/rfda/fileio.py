"""Raw Y video, PGM and weight-file I/O. Every writer is atomic (temp file + rename)."""
from __future__ import annotations

import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .model import ModelParams
from .recursive import RfParams

MAGIC = b"RFDA"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    """Malformed, truncated or incompatible weight file."""


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W] in [0, 1]

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 3 or len(f) < 1:
            raise ValueError(f"a clip needs frames [T, H, W] with T >= 1, got {f.shape}")
        if f.size and (f.min() < 0 or f.max() > 1):
            raise ValueError("frame values must lie in [0, 1]")
        self.frames = f

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]


@contextmanager
def atomic_write(path, mode: str = "wb"):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- video -------------------------------------------------------------------

def read_y4_raw(path, width: int, height: int, y_only: bool = False) -> VideoClip:
    """Read the luma planes of planar 8-bit 4:2:0 video (or Y-only with ``y_only``)."""
    raw = Path(path).read_bytes()
    ysize = width * height
    frame_bytes = ysize if y_only else ysize + 2 * ((width + 1) // 2) * ((height + 1) // 2)
    if width < 1 or height < 1 or not raw or len(raw) % frame_bytes:
        kind = "Y-only" if y_only else "4:2:0"
        raise ValueError(f"{path}: {len(raw)} bytes is not a whole number of {width}x{height} {kind} frames")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, frame_bytes)[:, :ysize]
    return VideoClip((buf.reshape(-1, height, width) / 255.0).astype(np.float32))


def to_bytes(frames: np.ndarray) -> np.ndarray:
    """Round half up and clamp to 8 bits."""
    return np.clip(np.floor(np.asarray(frames, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_y_raw(clip, path) -> None:
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    with atomic_write(path) as fh:
        fh.write(to_bytes(frames).tobytes())


def write_pgm(image: np.ndarray, path) -> None:
    """8-bit binary PGM of a ``[H, W]`` (or ``[1, H, W]``) map in [0, 1]."""
    img = to_bytes(np.asarray(image).reshape(np.asarray(image).shape[-2:]))
    h, w = img.shape
    with atomic_write(path) as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pix = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return pix / float(maxval)


# -- weights -----------------------------------------------------------------

def save_weights(params: ModelParams, path) -> None:
    entries = params.named()
    with atomic_write(path) as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(entries)))
        for name, t in entries.items():
            key = name.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_weight_entries(path) -> dict[str, np.ndarray]:
    """Parse a weight file into ``{name: float32 array}``; raises WeightFileError."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"{path}: truncated while reading {what} at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightFileError(f"{path}: bad magic, not an RFDA weight file")
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        try:
            name = take(nlen, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise WeightFileError(f"{path}: entry {i} name is not UTF-8") from None
        if name in out:
            raise WeightFileError(f"{path}: duplicate entry {name!r}")
        (ndim,) = struct.unpack("<B", take(1, f"{name} rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * n, f"{name} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise WeightFileError(f"{path}: non-finite values in {name!r}")
        out[name] = arr
    if pos != len(data):
        raise WeightFileError(f"{path}: {len(data) - pos} trailing bytes after {count} entries")
    return out


def infer_config(entries: dict[str, np.ndarray], beta: float = 0.2) -> ModelConfig:
    try:
        f, n, k, _ = entries["stdf.fuse_weight"].shape
    except (KeyError, ValueError):
        raise WeightFileError("missing or malformed stdf.fuse_weight") from None
    blocks = {name.split(".")[2] for name in entries if name.startswith("qe.blocks.")}
    return ModelConfig(radius=(n - 1) // 2, features=f, kernel=k, blocks=max(len(blocks), 1),
                       beta=beta, preset="custom")


def load_weights(path, config: ModelConfig | None = None, with_rf: bool | None = None,
                 init_missing_rf: bool = False, seed: int = 0) -> ModelParams:
    """Load weights, validating every shape against ``config`` (inferred if omitted).

    ``with_rf=None`` follows the file. Asking for RF when the file has none is an
    error unless ``init_missing_rf`` is set, in which case RF starts fresh.
    """
    entries = read_weight_entries(path)
    cfg = config or infer_config(entries)
    has_rf = any(name.startswith("rf.") for name in entries)
    want_rf = has_rf if with_rf is None else with_rf
    params = ModelParams.init(cfg, seed, with_rf=want_rf)
    if want_rf and not has_rf:
        if not init_missing_rf:
            raise WeightFileError(f"{path}: no recursive-fusion tensors (load with init_missing_rf)")
        params.rf = RfParams.init(cfg, np.random.default_rng(seed + 1))
    expected = params.named()
    for name, t in expected.items():
        if name.startswith("rf.") and not has_rf:
            continue
        if name not in entries:
            raise WeightFileError(f"{path}: missing tensor {name!r}")
        if entries[name].shape != t.shape:
            raise WeightFileError(f"{path}: tensor {name!r} has shape {entries[name].shape}, expected {t.shape}")
        t.data = entries[name].copy()
    extra = set(entries) - set(expected)
    if extra and not (not want_rf and all(n.startswith("rf.") for n in extra)):
        raise WeightFileError(f"{path}: unexpected tensors {sorted(extra)[:5]}")
    return params

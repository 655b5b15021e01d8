"""File formats: raw MGBT tensors, MGBPCKPT checkpoints, 8-bit PNG frames.

MGBT layout (little-endian): ``b"MGBT"``, version u8, dtype u8 (0=f32,
1=f64), ndim u8, ndim x u32 shape, row-major payload.

MGBPCKPT layout: ``b"MGBPCKPT"``, 32-byte SHA-256 config digest, then
repeated (u32 tag length, UTF-8 tag, MGBT tensor) records until EOF.
"""
from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

MGBT_MAGIC = b"MGBT"
MGBT_VERSION = 1
CKPT_MAGIC = b"MGBPCKPT"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class FormatError(ValueError):
    pass


def encode_tensor(a) -> bytes:
    a = np.asarray(a)
    if a.dtype not in _CODES:
        a = a.astype(np.float64)
    code = _CODES[a.dtype]
    head = MGBT_MAGIC + struct.pack("<BBB", MGBT_VERSION, code, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf, offset=0):
    """Decode one MGBT tensor at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset:offset + 4] != MGBT_MAGIC:
        raise FormatError("bad MGBT magic")
    if len(buf) < offset + 7:
        raise FormatError("truncated MGBT header")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != MGBT_VERSION:
        raise FormatError(f"unsupported MGBT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown MGBT dtype code {code}")
    offset += 7
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dt = _DTYPES[code]
    n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < offset + n:
        raise FormatError("truncated MGBT payload")
    a = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=offset)
    return a.reshape(shape).astype(dt.newbyteorder("="), copy=True), offset + n


def save_tensor(path, a):
    Path(path).write_bytes(encode_tensor(a))


def load_tensor(path):
    buf = Path(path).read_bytes()
    a, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return a


def encode_checkpoint(params, digest) -> bytes:
    if len(digest) != 32:
        raise FormatError("config digest must be 32 bytes")
    out = [CKPT_MAGIC, bytes(digest)]
    for name, value in params.items():
        tag = name.encode("utf-8")
        out.append(struct.pack("<I", len(tag)) + tag)
        out.append(encode_tensor(value))
    return b"".join(out)


def decode_checkpoint(buf):
    """Returns ``(digest, params)``."""
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    digest = bytes(buf[8:40])
    if len(digest) != 32:
        raise FormatError("truncated checkpoint header")
    offset, params = 40, {}
    while offset < len(buf):
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = bytes(buf[offset:offset + n]).decode("utf-8")
        offset += n
        params[name], offset = decode_tensor(buf, offset)
    return digest, params


def save_checkpoint(path, params, config):
    Path(path).write_bytes(encode_checkpoint(params, config.digest()))


def load_checkpoint(path, config=None):
    """Load parameters; if ``config`` is given its digest must match."""
    digest, params = decode_checkpoint(Path(path).read_bytes())
    if config is not None and digest != config.digest():
        raise FormatError(f"{path}: checkpoint was written for a different config")
    return params


# -- images ---------------------------------------------------------------

def round_half_away(a):
    return np.sign(a) * np.floor(np.abs(a) + 0.5)


def to_uint8(img):
    """Real-valued [0,255] image -> uint8 (round half away from zero, clamp)."""
    return np.clip(round_half_away(img), 0, 255).astype(np.uint8)


def read_png(path):
    """8-bit PNG as a float64 (C, H, W) array in [0, 255]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            a = np.asarray(im, dtype=np.float64)
    except (OSError, SyntaxError) as e:
        raise FormatError(f"{path}: cannot decode PNG ({e})") from None
    return a.transpose(2, 0, 1).copy()


def write_png(path, img):
    """Write a (C, H, W) real image in [0, 255] as an 8-bit PNG."""
    from PIL import Image

    a = to_uint8(np.asarray(img))
    if a.shape[0] == 1:
        Image.fromarray(a[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(a.transpose(1, 2, 0))).save(path)


_FRAME_RE = re.compile(r"(\d+)")


def _frame_key(p):
    nums = _FRAME_RE.findall(p.stem)
    return (int(nums[-1]) if nums else -1, p.name)


def read_frames(directory):
    """Directory of numbered PNG frames -> (C, T, H, W) array."""
    paths = sorted(Path(directory).glob("*.png"), key=_frame_key)
    if not paths:
        raise FormatError(f"{directory}: no PNG frames")
    frames = [read_png(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"{directory}: frames have differing shapes {sorted(shapes)}")
    return np.stack(frames, axis=1)


def write_frames(directory, cube, prefix="frame"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t in range(cube.shape[1]):
        write_png(d / f"{prefix}_{t:05d}.png", cube[:, t])

"""Binary and raster formats: FMAP feature maps, DUWT checkpoints, PPM/PGM images.

All multi-byte fields are little-endian.  Writes go to a sibling temp file
that is renamed into place, so a reader never sees a half-written file.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<4sIIIIB")

CKPT_MAGIC = b"DUWT"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


class TruncatedFile(FormatError):
    pass


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write(path, text.encode("utf-8"))


# ---------------------------------------------------------------- FMAP

def fmap_bytes(F) -> bytes:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 2:
        F = F[..., None]
    if F.ndim != 3:
        raise FormatError(f"feature map must be (H, W, C), got shape {F.shape}")
    H, W, C = F.shape
    return _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, H, W, C, 0) + np.ascontiguousarray(F, dtype="<f8").tobytes()


def parse_fmap(buf: bytes) -> np.ndarray:
    if len(buf) < _FMAP_HEADER.size:
        raise TruncatedFile(f"header needs {_FMAP_HEADER.size} bytes, file has {len(buf)}")
    magic, version, H, W, C, dtype = _FMAP_HEADER.unpack_from(buf)
    if magic != FMAP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise FormatError(f"unsupported FMAP version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}")
    need = 8 * H * W * C
    payload = buf[_FMAP_HEADER.size:]
    if len(payload) < need:
        raise TruncatedFile(f"payload has {len(payload)} of {need} bytes")
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(H, W, C)


def write_fmap(path, F):
    atomic_write(path, fmap_bytes(F))


def read_fmap(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_fmap(fh.read())


# ---------------------------------------------------------------- DUWT checkpoints

def checkpoint_bytes(tensors, meta: dict | None = None) -> bytes:
    """Magic, version, a UTF-8 ``key=value`` metadata block, then each array as ndim, dims, float64 data."""
    text = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for a in tensors:
        a = np.asarray(a, dtype=np.float64)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(out)


def parse_checkpoint(buf: bytes):
    """Returns (arrays, meta)."""
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"checkpoint ends at byte {len(buf)}, needed {pos + n}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, mlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    meta = {}
    for line in take(mlen).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        arrays.append(np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint")
    return arrays, meta


def write_checkpoint(path, tensors, meta=None):
    atomic_write(path, checkpoint_bytes(tensors, meta))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# ---------------------------------------------------------------- PPM / PGM

def image_bytes(img) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        tag = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"P6"
    else:
        raise FormatError(f"cannot encode image of shape {img.shape}")
    H, W = img.shape[:2]
    return tag + f"\n{W} {H}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_image(path, img):
    """uint8 arrays are written as is; float arrays are taken to be in [0, 1]."""
    atomic_write(path, image_bytes(img))


def parse_image(buf: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile("incomplete image header")
        tokens.append(buf[start:pos])
    pos += 1
    tag, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tag not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"unsupported image header {tag!r} maxval {maxval}")
    ch = 3 if tag == b"P6" else 1
    need = H * W * ch
    data = buf[pos:pos + need]
    if len(data) < need:
        raise TruncatedFile(f"image payload has {len(data)} of {need} bytes")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(H, W, ch)
    return arr[..., 0].copy() if ch == 1 else arr.copy()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_image(fh.read())

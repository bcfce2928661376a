"""Binary PGM (P5) and PPM (P6) with maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(blob: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, pos, n = [], 0, len(blob)
    while len(out) < count:
        while pos < n and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < n and blob[pos:pos + 1] == b"#":
            while pos < n and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(blob[start:pos])
    # exactly one whitespace byte separates header and raster
    return out, pos + 1


def decode(blob: bytes) -> np.ndarray:
    """Decode to a ``(C, H, W)`` float array with values ``byte / 255``."""
    (magic, w, h, maxval), offset = _tokens(blob, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError("non-integer header field") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    if w < 1 or h < 1:
        raise ImageFormatError("empty image")
    c = 1 if magic == b"P5" else 3
    raster = blob[offset:offset + w * h * c]
    if len(raster) != w * h * c:
        raise ImageFormatError("truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode(img) -> bytes:
    """Encode ``(C, H, W)`` or ``(H, W)`` values in ``[0, 1]``; C must be 1 or 3."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[0] not in (1, 3):
        raise ImageFormatError(f"cannot encode array of shape {a.shape}")
    c, h, w = a.shape
    raster = np.round(255.0 * np.clip(a, 0.0, 1.0)).astype(np.uint8).transpose(1, 2, 0)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + raster.tobytes()


def load_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_image(path, img) -> None:
    Path(path).write_bytes(encode(img))


def tile(batch) -> np.ndarray:
    """Lay a ``(B, C, H, W)`` batch out left to right with a 1-pixel gap."""
    b = np.asarray(batch, dtype=np.float64)
    n, c, h, w = b.shape
    out = np.zeros((c, h, n * w + (n - 1)))
    for i in range(n):
        out[:, :, i * (w + 1):i * (w + 1) + w] = b[i]
    return out


def load_directory(path) -> np.ndarray:
    """All ``.pgm``/``.ppm`` files in ``path`` sorted by name, stacked to ``(N, C, H, W)``."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise ImageFormatError(f"no PGM/PPM images in {path}")
    imgs = [load_image(p) for p in files]
    if len({im.shape for im in imgs}) != 1:
        raise ImageFormatError("images in directory differ in shape")
    return np.stack(imgs)

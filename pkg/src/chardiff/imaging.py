"""Image helpers: binary PGM/PPM I/O, separable resizing, pixel scaling."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_pnm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write an 8-bit image as P5 (H, W) or P6 (H, W, 3)."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 3 and img.shape[2] == 1:
        img, magic = img[:, :, 0], b"P5"
    else:
        raise ImageFormatError(f"cannot store image of shape {img.shape} as PGM/PPM")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into a uint8 array."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(buf, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    if int(maxval) != 255:
        raise ImageFormatError(f"{path}: maxval {int(maxval)} is not 255")
    w, h = int(w), int(h)
    ch = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * ch, offset=offset)
    return data.reshape((h, w) if ch == 1 else (h, w, 3)).copy()


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def to_model(image: np.ndarray) -> np.ndarray:
    """[0, 255] pixels -> [-1, 1] model space."""
    return np.asarray(image, dtype=np.float64) / 127.5 - 1.0


def from_model(x: np.ndarray) -> np.ndarray:
    """[-1, 1] model space -> uint8 pixels."""
    return to_uint8((np.clip(x, -1.0, 1.0) + 1.0) * 127.5)


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _axis_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Resampling weights (n_out x n_in): area average when shrinking, linear otherwise."""
    if n_out == n_in:
        return np.eye(n_in)
    m = np.zeros((n_out, n_in))
    s = n_in / n_out
    if n_out < n_in:
        for i in range(n_out):
            lo, hi = i * s, (i + 1) * s
            for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
                m[i, j] = min(hi, j + 1) - max(lo, j)
        m /= s
    else:
        centers = (np.arange(n_out) + 0.5) * s - 0.5
        centers = np.clip(centers, 0, n_in - 1)
        left = np.floor(centers).astype(int)
        right = np.minimum(left + 1, n_in - 1)
        frac = centers - left
        m[np.arange(n_out), left] += 1.0 - frac
        m[np.arange(n_out), right] += frac
    return m


def resize(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Resize the first two axes to ``shape = (H, W)``.

    Each axis is resampled independently: area averaging when shrinking and
    linear interpolation when enlarging.  The map is linear in the pixel
    values, so affine intensity changes commute with it.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = shape
    if h < 1 or w < 1:
        raise ValueError(f"resize target must be positive, got {shape}")
    my = _axis_matrix(img.shape[0], h)
    mx = _axis_matrix(img.shape[1], w)
    out = np.tensordot(my, img, axes=(1, 0))
    out = np.tensordot(mx, out, axes=(1, 1))  # (w, h, ...)
    return np.swapaxes(out, 0, 1)

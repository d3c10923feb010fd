"""Image and mask values, masked composition, and Netpbm codecs.

Images are ``float64`` arrays of shape ``(H, W, C)`` (C = 3 or 1) with values
in [0, 1]. Masks are ``uint8`` arrays of shape ``(H, W)`` holding 0/1.
The autodiff side of the package is channel-first; :func:`to_chw` and
:func:`to_hwc` are the only layout adapters.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class CodecError(ValueError):
    """Raised for malformed or unsupported Netpbm files."""


def as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if m.dtype == bool:
        return m.astype(np.uint8)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask is not binary")
    return m.astype(np.uint8, copy=False)


def check_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWx3 or HxWx1, got shape {img.shape}")
    return img


def _same_hw(*arrays) -> None:
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")


def compose(a, b, m) -> np.ndarray:
    """Pixelwise select: ``a`` where ``m == 1``, ``b`` where ``m == 0``.

    ``a`` and ``b`` may be any ``(H, W, ...)`` arrays of equal shape; no
    arithmetic is done on either operand so selected values are copied
    bit-for-bit.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    m = as_mask(m)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    _same_hw(a, m)
    sel = m.astype(bool).reshape(m.shape + (1,) * (a.ndim - 2))
    return np.where(sel, a, b)


# ---------------------------------------------------------------- mask algebra

def union(m1, m2) -> np.ndarray:
    m1, m2 = as_mask(m1), as_mask(m2)
    _same_hw(m1, m2)
    return m1 | m2


def intersection(m1, m2) -> np.ndarray:
    m1, m2 = as_mask(m1), as_mask(m2)
    _same_hw(m1, m2)
    return m1 & m2


def complement(m) -> np.ndarray:
    return (1 - as_mask(m)).astype(np.uint8)


def difference(m1, m2) -> np.ndarray:
    """Pixels of ``m1`` not in ``m2``."""
    return intersection(m1, complement(m2))


def area(m) -> int:
    return int(as_mask(m).sum())


def is_disjoint(m1, m2) -> bool:
    return area(intersection(m1, m2)) == 0


def iou(m1, m2) -> float:
    inter = area(intersection(m1, m2))
    uni = area(union(m1, m2))
    return 1.0 if uni == 0 else inter / uni


def bbox(m) -> tuple[int, int, int, int] | None:
    """``(y0, x0, y1, x1)`` half-open bounding box, or None for an empty mask."""
    m = as_mask(m)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


# ---------------------------------------------------------------- layout

def to_chw(images) -> np.ndarray:
    """``(N, H, W, C)`` or ``(H, W, C)`` -> channel-first."""
    images = np.asarray(images)
    if images.ndim == 3:
        return images.transpose(2, 0, 1)
    return images.transpose(0, 3, 1, 2)


def to_hwc(images) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 3:
        return images.transpose(1, 2, 0)
    return images.transpose(0, 2, 3, 1)


# ---------------------------------------------------------------- codecs

def quantize(img) -> np.ndarray:
    """Float [0,1] -> uint8 via round(v * 255), half away from zero."""
    img = np.asarray(img, dtype=np.float64)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values outside [0, 1]")
    return np.floor(img * 255.0 + 0.5).astype(np.uint8)


def dequantize(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.float64) / 255.0


def encode_ppm(img) -> bytes:
    img = check_image(img)
    if img.shape[2] != 3:
        raise ValueError("PPM needs a 3-channel image")
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def encode_pgm(arr2d: np.ndarray) -> bytes:
    arr2d = np.asarray(arr2d, dtype=np.uint8)
    h, w = arr2d.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr2d.tobytes()


def encode_mask(m) -> bytes:
    return encode_pgm(as_mask(m) * np.uint8(255))


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if buf[:2] != magic:
        raise CodecError(f"expected {magic.decode()} header, got {buf[:2]!r}")
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise CodecError("malformed header: missing separator")
        tok_start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise CodecError("malformed header: expected a decimal number")
        fields.append(int(buf[tok_start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise CodecError("malformed header: missing separator before payload")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1 or width > 4096 or height > 4096:
        raise CodecError(f"unsupported dimensions {width}x{height}")
    if maxval != 255:
        raise CodecError(f"unsupported maxval {maxval}")
    return width, height, maxval, pos


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, _, pos = _parse_header(buf, b"P6")
    n = w * h * 3
    payload = buf[pos:pos + n]
    if len(payload) != n:
        raise CodecError(f"truncated payload: expected {n} bytes, got {len(payload)}")
    return dequantize(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3))


def decode_pgm(buf: bytes) -> np.ndarray:
    w, h, _, pos = _parse_header(buf, b"P5")
    n = w * h
    payload = buf[pos:pos + n]
    if len(payload) != n:
        raise CodecError(f"truncated payload: expected {n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def decode_mask(buf: bytes) -> np.ndarray:
    raw = decode_pgm(buf)
    bad = ~np.isin(raw, (0, 255))
    if bad.any():
        raise CodecError(f"mask file holds non-binary value {int(raw[bad][0])}")
    return (raw == 255).astype(np.uint8)


def _write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    tmp.replace(path)


def save_image(path, img) -> None:
    _write(path, encode_ppm(img))


def load_image(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_mask(path, m) -> None:
    _write(path, encode_mask(m))


def load_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())

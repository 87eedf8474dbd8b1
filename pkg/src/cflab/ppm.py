"""Binary PPM (P6) / PGM (P5) image files, 8-bit, written in a canonical form.

Images are exchanged as float64 arrays in [0, 1]: H x W x 3 for PPM,
H x W for PGM. Writing quantizes to 8 bits; reading maps back to [0, 1].
The exact header layout is fixed so identical arrays produce identical
bytes.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _quantize(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Write an H x W x 3 float image in [0, 1] as binary P6."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"PPM needs H x W x 3, got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(image).tobytes())


def write_pgm(path, gray) -> None:
    """Write an H x W float image in [0, 1] (or bool) as binary P5."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ShapeError(f"PGM needs H x W, got {gray.shape}")
    if gray.dtype == bool:
        gray = gray.astype(np.float64)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(gray).tobytes())


def _read_header(fh, magic):
    if fh.read(2) != magic:
        raise ShapeError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":  # comment line
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok:
            raise ShapeError("truncated netpbm header")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ShapeError(f"only 8-bit netpbm supported, maxval={maxval}")
    return w, h


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into an H x W x 3 float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P6")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ShapeError(f"truncated PPM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read binary P5 into an H x W float64 array in [0, 1]."""
    with open(path, "rb") as fh:
        w, h = _read_header(fh, b"P5")
        raw = fh.read(w * h)
    if len(raw) != w * h:
        raise ShapeError(f"truncated PGM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    """Read a P5 file as a binary mask (uint8 0/1, threshold at mid-gray)."""
    return (read_pgm(path) > 0.5).astype(np.uint8)

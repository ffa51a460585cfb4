"""Minimal PGM (P2/P5) reader and writer."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PgmError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise PgmError(f"{path}: not a P2/P5 PGM file")
    (w, h, maxval), pos = _tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PgmError(f"{path}: bad PGM dimensions")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
        img = raw.reshape(h, w).astype(np.float64)
    else:
        vals, _ = _tokens(data, w * h, pos)
        img = np.array([int(v) for v in vals], dtype=np.float64).reshape(h, w)
    if maxval != 255:
        img = img * (255.0 / maxval)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())

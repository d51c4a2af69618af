"""File formats: binary PGM images, the phantom manifest CSV, atomic writes."""
from __future__ import annotations

import csv
import io
import os
import tempfile

import numpy as np


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary sibling then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def to_uint8(img) -> np.ndarray:
    """[0,1] floats (any leading unit axes) -> HxW uint8, rounding half up."""
    a = np.asarray(img, dtype=np.float64)
    a = a.reshape(a.shape[-2:])
    return np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(img) -> bytes:
    a = to_uint8(img)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + a.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Binary 8-bit PGM -> HxW float32 in [0,1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise ValueError("truncated PGM payload")
    return (np.frombuffer(payload, dtype=np.uint8).reshape(h, w) / 255.0).astype(np.float32)


def write_pgm(path: str | os.PathLike, img) -> None:
    atomic_write_bytes(path, encode_pgm(img))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pgm(f.read())


MANIFEST_FIELDS = ("id", "age", "sex", "identity_seed")


def manifest_csv(specs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    for i, s in enumerate(specs):
        w.writerow([i, repr(float(s.condition.age)), s.condition.sex.name.lower(), s.identity_seed])
    return buf.getvalue()


def read_manifest(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))

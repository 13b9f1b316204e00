"""Binary netpbm readers and writers: P6 (PPM) for color, P5 (PGM) for masks.

Only maxval 255 is supported. Round trips are bit exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write a (3, H, W) uint8 array as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {img.shape}")
    h, w = img.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.transpose(1, 2, 0).astype(np.uint8).tobytes())


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W), got {img.shape}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.astype(np.uint8).tobytes())


def _parse_header(blob: bytes, magic: bytes):
    """Returns (width, height, payload offset); handles comments and whitespace."""
    if blob[:2] != magic:
        raise ParseError(f"expected magic {magic.decode()}, got {blob[:2]!r}", offset=0)
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        token = blob[start:pos]
        if not token or not token.isdigit():
            raise ParseError("malformed header field", offset=start)
        fields.append(int(token))
    if pos >= len(blob):
        raise ParseError("missing whitespace after header", offset=pos)
    pos += 1  # exactly one whitespace byte before the payload
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported max value {maxval}, only 255", offset=2)
    return width, height, pos


def read_ppm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, pos = _parse_header(blob, b"P6")
    need = w * h * 3
    if len(blob) - pos < need:
        raise ParseError(
            f"truncated pixel data: need {need} bytes, have {len(blob) - pos}",
            offset=len(blob),
        )
    flat = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return np.ascontiguousarray(flat.reshape(h, w, 3).transpose(2, 0, 1))


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    w, h, pos = _parse_header(blob, b"P5")
    need = w * h
    if len(blob) - pos < need:
        raise ParseError(
            f"truncated pixel data: need {need} bytes, have {len(blob) - pos}",
            offset=len(blob),
        )
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w).copy()

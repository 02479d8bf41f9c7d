"""Binary Netpbm I/O: P5 (8-bit gray) and P6 (8-bit RGB)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_WS = b" \t\n\r\v\f"


class NetpbmError(ValueError):
    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})")


def _token(buf: bytes, pos: int) -> tuple[bytes, int, int]:
    """Next header token after whitespace/comments: (token, start, end)."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos : pos + 1] not in _WS + b"#":
        pos += 1
    if start == pos:
        raise NetpbmError("truncated header", start)
    return buf[start:pos], start, pos


def _int_token(buf, pos, what):
    tok, start, end = _token(buf, pos)
    if not tok.isdigit():
        raise NetpbmError(f"bad {what} {tok!r}", start)
    value = int(tok)
    if value < 1:
        raise NetpbmError(f"{what} must be positive, got {value}", start)
    return value, start, end


def decode(buf: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into (H, W) or (H, W, 3) uint8."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}; expected P5 or P6", 0)
    width, _, pos = _int_token(buf, 2, "width")
    height, _, pos = _int_token(buf, pos, "height")
    maxval, start, pos = _int_token(buf, pos, "maxval")
    if maxval != 255:
        raise NetpbmError(f"maxval {maxval} unsupported; only 255 is accepted", start)
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise NetpbmError("missing whitespace before raster", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    if len(buf) - pos < need:
        raise NetpbmError(f"raster truncated: need {need} bytes, have {len(buf) - pos}", len(buf))
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape).copy()


def encode(image: np.ndarray) -> bytes:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape} as Netpbm")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes()


def load_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode(image))

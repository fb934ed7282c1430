"""Binary netpbm image I/O: 8-bit P5 (gray) and P6 (RGB), maxval 255."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


def write_image(img, path):
    """Write [0,1] values as 8-bit netpbm; rounding is half-up."""
    arr = img.data if isinstance(img, T.Tensor) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise DimensionError(f"write_image expects (H, W, 1|3), got {arr.shape}")
    h, w, c = arr.shape
    raw = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes(order="C"))


class _Scanner:
    def __init__(self, raw, path):
        self.raw = raw
        self.path = path
        self.pos = 0

    def fail(self, why):
        raise ConfigError(f"{self.path}: byte {self.pos}: {why}")

    def skip_space(self):
        # Whitespace, with '#' comments running to end of line.
        while self.pos < len(self.raw):
            b = self.raw[self.pos]
            if b in b" \t\r\n":
                self.pos += 1
            elif b == ord("#"):
                nl = self.raw.find(b"\n", self.pos)
                if nl < 0:
                    self.fail("unterminated comment")
                self.pos = nl + 1
            else:
                return

    def read_int(self):
        self.skip_space()
        start = self.pos
        while self.pos < len(self.raw) and chr(self.raw[self.pos]).isdigit():
            self.pos += 1
        if self.pos == start:
            self.fail("expected an integer")
        return int(self.raw[start:self.pos])


def read_image(path):
    """Read P5/P6 into a float32 (H, W, 1|3) tensor scaled by 1/255."""
    with open(path, "rb") as fh:
        raw = fh.read()
    sc = _Scanner(raw, path)
    if raw[:2] == b"P5":
        channels = 1
    elif raw[:2] == b"P6":
        channels = 3
    else:
        sc.fail(f"bad magic {raw[:2]!r}; expected P5 or P6")
    sc.pos = 2
    w = sc.read_int()
    h = sc.read_int()
    maxval = sc.read_int()
    if w < 1 or h < 1:
        sc.fail(f"bad extents {w}x{h}")
    if maxval != 255:
        sc.fail(f"unsupported maxval {maxval}; only 255")
    if sc.pos >= len(raw) or raw[sc.pos] not in b" \t\r\n":
        sc.fail("expected single whitespace before pixel data")
    sc.pos += 1
    need = w * h * channels
    if len(raw) - sc.pos < need:
        sc.fail(f"expected {need} pixel bytes, found {len(raw) - sc.pos}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=sc.pos)
    arr = (data.reshape(h, w, channels).astype(np.float32)) / np.float32(255.0)
    return T.Tensor(arr)

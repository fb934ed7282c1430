"""Bijective 2D-to-1D visiting orders and their locality diagnostics.

A ``ScanCurve`` records, for an H x W grid, the row-major cell index visited
at each step.  Seven trajectory families are provided (raster rows/columns,
anti-diagonals in three flavours, Morton z-order, Hilbert), each optionally
reversed.  ``apply_curve``/``invert_curve`` are differentiable gather/scatter
ops over the tensor core.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

KINDS = ("horizontal", "vertical", "diagonal", "flipped_diagonal",
         "zigzag", "zorder", "hilbert")


@dataclass(frozen=True)
class ScanCurve:
    kind: str
    reversed: bool
    height: int
    width: int
    order: np.ndarray    # order[t] = row-major cell index visited at step t
    inverse: np.ndarray  # inverse[order[t]] == t

    @property
    def length(self):
        return self.height * self.width

    @property
    def label(self):
        return self.kind + ("_rev" if self.reversed else "")


@dataclass(frozen=True)
class LocalityProfile:
    """Sequence-distance statistics over all 4-neighbor cell pairs."""
    mean_1d_distance: float
    max_1d_distance: int
    pairs: int


def _diagonal_order(h, w, mirror=False, zigzag=False):
    # Anti-diagonals d = r + c ascending.  Plain diagonal walks each with r
    # ascending; zigzag alternates (odd d ascending, even d descending,
    # matching the JPEG coefficient order).  mirror applies the same walk to
    # the horizontally flipped grid.
    out = np.empty(h * w, dtype=np.int64)
    at = 0
    for d in range(h + w - 1):
        r_lo = max(0, d - w + 1)
        r_hi = min(d, h - 1)
        rows = range(r_lo, r_hi + 1)
        if zigzag and d % 2 == 0:
            rows = range(r_hi, r_lo - 1, -1)
        for r in rows:
            c = d - r
            if mirror:
                c = w - 1 - c
            out[at] = r * w + c
            at += 1
    return out


def _spread_bits(v):
    # Insert a zero bit above every bit of v (16-bit inputs suffice here).
    v = v.astype(np.int64)
    v = (v | (v << 8)) & 0x00FF00FF
    v = (v | (v << 4)) & 0x0F0F0F0F
    v = (v | (v << 2)) & 0x33333333
    v = (v | (v << 1)) & 0x55555555
    return v


def _zorder_order(h, w):
    # Morton code with column bits in the even positions; visiting the grid
    # in ascending code order is identical to walking the enclosing
    # power-of-two curve and skipping out-of-grid cells.
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    codes = _spread_bits(cc) | (_spread_bits(rr) << 1)
    return np.argsort(codes.ravel(), kind="stable").astype(np.int64)


def _hilbert_d2xy(n, d):
    # Classic iterative conversion of curve position d to coordinates on an
    # n x n grid (n a power of two), with quadrant rotation.
    x = y = 0
    t = d
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        x += s * rx
        y += s * ry
        t //= 4
        s *= 2
    return x, y


def _hilbert_order(h, w):
    n = 1
    while n < max(h, w):
        n *= 2
    out = np.empty(h * w, dtype=np.int64)
    at = 0
    for d in range(n * n):
        r, c = _hilbert_d2xy(n, d)
        if r < h and c < w:
            out[at] = r * w + c
            at += 1
    return out


@lru_cache(maxsize=None)
def build_curve(kind, reversed, h, w):
    """Construct (and memoize) the visiting order for one trajectory."""
    if h < 1 or w < 1:
        raise ConfigError(f"curve extents must be positive, got {h}x{w}")
    if kind == "horizontal":
        order = np.arange(h * w, dtype=np.int64)
    elif kind == "vertical":
        order = np.arange(h * w, dtype=np.int64).reshape(h, w).T.ravel()
    elif kind == "diagonal":
        order = _diagonal_order(h, w)
    elif kind == "flipped_diagonal":
        order = _diagonal_order(h, w, mirror=True)
    elif kind == "zigzag":
        order = _diagonal_order(h, w, zigzag=True)
    elif kind == "zorder":
        order = _zorder_order(h, w)
    elif kind == "hilbert":
        order = _hilbert_order(h, w)
    else:
        raise ConfigError(f"unknown curve kind {kind!r}")
    if reversed:
        order = order[::-1].copy()
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size, dtype=np.int64)
    order.setflags(write=False)
    inverse.setflags(write=False)
    return ScanCurve(kind, bool(reversed), h, w, order, inverse)


def apply_curve(x, curve):
    """Flatten x (H, W, Cg) into visiting order -> (L, Cg).  Differentiable."""
    if x.ndim != 3 or x.shape[0] != curve.height or x.shape[1] != curve.width:
        raise DimensionError(
            f"apply_curve: tensor {x.shape} does not match curve "
            f"{curve.height}x{curve.width}")
    ll = curve.length
    cg = x.shape[2]
    out = T.Tensor(x.data.reshape(ll, cg)[curve.order])

    def bwd(g):
        gx = np.empty((ll, cg), dtype=g.dtype)
        gx[curve.order] = g
        return (gx.reshape(x.shape),)

    return T.record_node(out, (x,), bwd)


def invert_curve(seq, curve):
    """Scatter a sequence (L, Cg) back onto the grid; exact inverse of apply_curve."""
    if seq.ndim != 2 or seq.shape[0] != curve.length:
        raise DimensionError(
            f"invert_curve: sequence {seq.shape} does not match curve "
            f"length {curve.length}")
    cg = seq.shape[1]
    grid = np.empty((curve.length, cg), dtype=seq.dtype)
    grid[curve.order] = seq.data
    out = T.Tensor(grid.reshape(curve.height, curve.width, cg))

    def bwd(g):
        return (g.reshape(curve.length, cg)[curve.order],)

    return T.record_node(out, (seq,), bwd)


def locality_profile(curve):
    """|sequence-position difference| over all horizontally/vertically adjacent cells."""
    h, w = curve.height, curve.width
    pos = curve.inverse.reshape(h, w)
    dists = []
    if w > 1:
        dists.append(np.abs(pos[:, 1:] - pos[:, :-1]).ravel())
    if h > 1:
        dists.append(np.abs(pos[1:, :] - pos[:-1, :]).ravel())
    if not dists:
        return LocalityProfile(0.0, 0, 0)
    d = np.concatenate(dists)
    return LocalityProfile(float(d.mean()), int(d.max()), int(d.size))


# Named scan strategies.  "2d" is the raster 4-set; "all_around" adds both
# diagonal families and their reversals (8 sequences).  The single-kind names
# pair the trajectory with its reversal.
_SCAN_SETS = {
    "2d": [("horizontal", False), ("vertical", False),
           ("horizontal", True), ("vertical", True)],
    "diagonal": [("diagonal", False), ("flipped_diagonal", False),
                 ("diagonal", True), ("flipped_diagonal", True)],
    "zigzag": [("zigzag", False), ("zigzag", True)],
    "zorder": [("zorder", False), ("zorder", True)],
    "hilbert": [("hilbert", False), ("hilbert", True)],
}
_SCAN_SETS["all_around"] = _SCAN_SETS["2d"] + _SCAN_SETS["diagonal"]

SCAN_SET_NAMES = tuple(sorted(_SCAN_SETS))


def scan_set_kinds(name):
    """Resolve a named strategy to its ordered (kind, reversed) list."""
    if isinstance(name, (list, tuple)):
        return [(k, bool(r)) for k, r in name]
    try:
        return list(_SCAN_SETS[name])
    except KeyError:
        raise ConfigError(f"unknown scan set {name!r}; expected one of "
                          f"{', '.join(SCAN_SET_NAMES)}") from None


def build_scan_set(name, h, w):
    """Materialize a named strategy as curves for an H x W grid."""
    return [build_curve(kind, rev, h, w) for kind, rev in scan_set_kinds(name)]

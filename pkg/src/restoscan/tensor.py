"""Dense-tensor core with record-and-replay reverse-mode differentiation.

A ``Tensor`` wraps a numpy array (rank <= 4, float32 or float64) and an
optional gradient accumulator.  Operations are plain functions; while a
``record()`` context is active, every operation whose inputs are tracked
appends one node (inputs, output, backward rule) to the active ``Graph``.
``backward(graph, out)`` replays the graph in reverse and accumulates
gradients into the ``grad`` field of every requires-grad leaf.

The op set is deliberately fixed: exactly what the restoration network
needs.  There is no general broadcasting; each op documents the shapes it
accepts and raises ``DimensionError`` otherwise.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError, NumericError

_ALLOWED_DTYPES = (np.float32, np.float64)

# When True, every freshly created Tensor is checked for NaN/Inf.  Off by
# default because the check is a measurable cost in training loops; the
# test suites switch it on.
STRICT_FINITE = False


def set_strict_finite(flag):
    global STRICT_FINITE
    STRICT_FINITE = bool(flag)


class Tensor:
    """A dense array of real values with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked_by")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype.type not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds 4")
        if STRICT_FINITE and not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tracked_by = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NumericError("tensor holds non-finite values")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad=False):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Graph recording
# ---------------------------------------------------------------------------

class Node:
    """One recorded operation: inputs, the produced output, a backward rule.

    ``backward`` maps the adjoint of the output to a tuple of adjoints
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Ordered list of recorded operations, in execution (topological) order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_ACTIVE = []


@contextmanager
def record():
    """Activate a fresh Graph; ops executed inside are recorded onto it."""
    g = Graph()
    _ACTIVE.append(g)
    try:
        yield g
    finally:
        _ACTIVE.pop()


def active_graph():
    return _ACTIVE[-1] if _ACTIVE else None


def record_node(out, inputs, backward):
    """Append a node to the active graph if any input is tracked.

    This is the extension point used by other modules (scan curves, the
    selective-scan core) to register custom differentiable operations.
    """
    g = _ACTIVE[-1] if _ACTIVE else None
    if g is None:
        return out
    if any(t.requires_grad or t._tracked_by is g for t in inputs):
        g.nodes.append(Node(out, tuple(inputs), backward))
        out._tracked_by = g
    return out


def backward(graph, out, release=True):
    """Replay ``graph`` in reverse, accumulating d(out)/d(leaf) into leaf.grad.

    ``out`` must be a scalar produced inside ``graph``.  Unless ``release``
    is False the tape is consumed afterwards: nodes (and the intermediate
    arrays their closures hold alive) are dropped so memory returns to the
    allocator immediately.  A consumed graph cannot be replayed again.
    """
    if out.data.shape != ():
        raise DimensionError("backward requires a scalar output; reduce first")
    produced = set()
    for node in graph.nodes:
        produced.add(id(node.out))
    adjoint = {id(out): np.ones((), dtype=out.data.dtype)}
    leaves = {}
    for node in reversed(graph.nodes):
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if id(t) in produced:
                if id(t) in adjoint:
                    adjoint[id(t)] = adjoint[id(t)] + gi
                else:
                    adjoint[id(t)] = gi
            elif t.requires_grad:
                if id(t) in leaves:
                    leaves[id(t)][1] += gi
                else:
                    leaves[id(t)] = [t, gi.copy()]
    for t, g in leaves.values():
        t.grad = g if t.grad is None else t.grad + g
    if release:
        # Break the graph -> node -> tensor -> graph cycles so everything
        # frees by reference count instead of waiting on the gc.
        for node in graph.nodes:
            node.out._tracked_by = None
        graph.nodes.clear()


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    """y[..., j] = sum_i x[..., i] * w[i, j] (+ b[j]).

    ``x`` may carry any leading layout (sequence, grid, or a bare vector);
    only the trailing extent must match ``w``'s first extent.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: x{x.shape} incompatible with w{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias{b.shape} incompatible with w{w.shape}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gx = g @ w.data.T
        xf = x.data.reshape(-1, x.shape[-1])
        gf = g.reshape(-1, w.shape[1])
        gw = xf.T @ gf
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)

    ins = (x, w) if b is None else (x, w, b)
    return record_node(out, ins, bwd)


def grouped_linear(x, w, b=None):
    """Per-group linear map: x (L, n, g) x w (n, g, h) -> (L, n, h)."""
    if x.ndim != 3 or w.ndim != 3 or x.shape[1:] != w.shape[:2]:
        raise DimensionError(f"grouped_linear: x{x.shape} incompatible with w{w.shape}")
    y = np.einsum("lng,ngh->lnh", x.data, w.data)
    if b is not None:
        if b.shape != (w.shape[0], w.shape[2]):
            raise DimensionError(f"grouped_linear: bias{b.shape} incompatible with w{w.shape}")
        y = y + b.data[None, :, :]
    out = Tensor(y)

    def bwd(g):
        gx = np.einsum("lnh,ngh->lng", g, w.data)
        gw = np.einsum("lng,lnh->ngh", x.data, g)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    ins = (x, w) if b is None else (x, w, b)
    return record_node(out, ins, bwd)


def dwconv2d(x, k, b=None):
    """Depth-wise KxK convolution, stride 1, same-size zero padding.

    Channel c of the output sees only channel c of the input and kernel
    slice k[:, :, c]; K must be odd.
    """
    if x.ndim != 3 or k.ndim != 3:
        raise DimensionError("dwconv2d expects x (H, W, C) and k (K, K, C)")
    kk = k.shape[0]
    if kk % 2 == 0:
        raise ConfigError(f"dwconv2d kernel size {kk} must be odd")
    if k.shape[1] != kk or k.shape[2] != x.shape[2]:
        raise DimensionError(f"dwconv2d: k{k.shape} incompatible with x{x.shape}")
    if b is not None and b.shape != (x.shape[2],):
        raise DimensionError(f"dwconv2d: bias{b.shape} incompatible with x{x.shape}")
    p = kk // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (kk, kk), axis=(0, 1))
    y = np.einsum("hwcij,ijc->hwc", win, k.data)
    if b is not None:
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gk = np.einsum("hwcij,hwc->ijc", win, g)
        gp = np.pad(g, ((p, p), (p, p), (0, 0)))
        gwin = sliding_window_view(gp, (kk, kk), axis=(0, 1))
        gx = np.einsum("hwcij,ijc->hwc", gwin, k.data[::-1, ::-1, :])
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 1))

    ins = (x, k) if b is None else (x, k, b)
    return record_node(out, ins, bwd)


def unfold(x, k):
    """Gather each pixel's KxK zero-padded neighborhood into channels.

    (H, W, C) -> (H, W, K*K*C); combined with ``linear`` this realises a
    full (channel-mixing) convolution.
    """
    if x.ndim != 3:
        raise DimensionError("unfold expects (H, W, C)")
    if k % 2 == 0:
        raise ConfigError(f"unfold window {k} must be odd")
    hh, ww, cc = x.shape
    p = k // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(0, 1))  # (H, W, C, K, K)
    y = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(hh, ww, k * k * cc)
    out = Tensor(y)

    def bwd(g):
        gw = g.reshape(hh, ww, k, k, cc)
        gxp = np.zeros((hh + 2 * p, ww + 2 * p, cc), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[i:i + hh, j:j + ww] += gw[:, :, i, j, :]
        return (gxp[p:p + hh, p:p + ww],)

    return record_node(out, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize over the trailing (channel) axis, then apply gamma/beta."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: affine shapes must be ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record_node(out, (x, gamma, beta), bwd)


def silu(x):
    """y = x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)

    def bwd(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return record_node(out, (x,), bwd)


def sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return record_node(out, (x,), bwd)


def softplus(x):
    """y = log(1 + exp(x)), evaluated overflow-safely."""
    out = Tensor(np.logaddexp(np.asarray(0.0, dtype=x.dtype), x.data))

    def bwd(g):
        return (g / (1.0 + np.exp(-x.data)),)

    return record_node(out, (x,), bwd)


def exp(x):
    e = np.exp(x.data)
    out = Tensor(e)

    def bwd(g):
        return (g * e,)

    return record_node(out, (x,), bwd)


def neg(x):
    out = Tensor(-x.data)

    def bwd(g):
        return (-g,)

    return record_node(out, (x,), bwd)


def absval(x):
    out = Tensor(np.abs(x.data))

    def bwd(g):
        return (g * np.sign(x.data),)

    return record_node(out, (x,), bwd)


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, g

    return record_node(out, (a, b), bwd)


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, g * a.data

    return record_node(out, (a, b), bwd)


def ewise(a, b, kind):
    """Elementwise combination of same-shape tensors; kind in {add, mul}."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ConfigError(f"unknown ewise kind {kind!r}")


def scale_channels(x, s):
    """Multiply every spatial position of x (H, W, C) by the vector s (C,)."""
    if x.ndim != 3 or s.shape != (x.shape[-1],):
        raise DimensionError(f"scale_channels: x{x.shape} incompatible with s{s.shape}")
    out = Tensor(x.data * s.data)

    def bwd(g):
        return g * s.data, (g * x.data).sum(axis=(0, 1))

    return record_node(out, (x, s), bwd)


def spatial_mean(x):
    """Average x (H, W, C) over the spatial grid -> (C,)."""
    if x.ndim != 3:
        raise DimensionError("spatial_mean expects (H, W, C)")
    hh, ww, _ = x.shape
    out = Tensor(x.data.mean(axis=(0, 1)))

    def bwd(g):
        return (np.broadcast_to(g / (hh * ww), x.shape).astype(g.dtype, copy=False),)

    return record_node(out, (x,), bwd)


def sum_all(x):
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def bwd(g):
        return (np.full(x.shape, g, dtype=g.dtype),)

    return record_node(out, (x,), bwd)


def mean_all(x):
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def bwd(g):
        return (np.full(x.shape, g / n, dtype=g.dtype),)

    return record_node(out, (x,), bwd)


def concat_channels(parts):
    """Concatenate tensors with identical leading extents along the last axis."""
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise DimensionError("concat_channels: leading extents differ")
    widths = [p.shape[-1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))

    def bwd(g):
        grads = []
        at = 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[..., at:at + w]))
            at += w
        return tuple(grads)

    return record_node(out, tuple(parts), bwd)


def slice_channels(x, lo, hi):
    """Copy out channels [lo, hi) of the last axis."""
    if not (0 <= lo < hi <= x.shape[-1]):
        raise DimensionError(f"slice_channels: [{lo}, {hi}) outside {x.shape[-1]} channels")
    out = Tensor(np.ascontiguousarray(x.data[..., lo:hi]))

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., lo:hi] = g
        return (gx,)

    return record_node(out, (x,), bwd)


def stack(parts, axis):
    """Stack same-shape tensors along a new axis."""
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise DimensionError("stack: member shapes differ")
    out = Tensor(np.stack([p.data for p in parts], axis=axis))

    def bwd(g):
        return tuple(np.ascontiguousarray(a) for a in np.moveaxis(g, axis, 0))

    return record_node(out, tuple(parts), bwd)


def take(x, index, axis):
    """Select one slice along ``axis``, dropping that axis."""
    out = Tensor(np.ascontiguousarray(np.take(x.data, index, axis=axis)))

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return record_node(out, (x,), bwd)


def space_to_depth(x):
    """(H, W, C) -> (H/2, W/2, 4C); each 2x2 block becomes 4 channel planes."""
    hh, ww, cc = x.shape
    if hh % 2 or ww % 2:
        raise DimensionError(f"space_to_depth needs even extents, got {hh}x{ww}")
    y = x.data.reshape(hh // 2, 2, ww // 2, 2, cc).transpose(0, 2, 1, 3, 4)
    out = Tensor(np.ascontiguousarray(y).reshape(hh // 2, ww // 2, 4 * cc))

    def bwd(g):
        gr = g.reshape(hh // 2, ww // 2, 2, 2, cc).transpose(0, 2, 1, 3, 4)
        return (np.ascontiguousarray(gr).reshape(hh, ww, cc),)

    return record_node(out, (x,), bwd)


def depth_to_space(x):
    """(H, W, C) -> (2H, 2W, C/4); inverse rearrangement of space_to_depth."""
    hh, ww, cc = x.shape
    if cc % 4:
        raise DimensionError(f"depth_to_space needs channels divisible by 4, got {cc}")
    y = x.data.reshape(hh, ww, 2, 2, cc // 4).transpose(0, 2, 1, 3, 4)
    out = Tensor(np.ascontiguousarray(y).reshape(2 * hh, 2 * ww, cc // 4))

    def bwd(g):
        gr = g.reshape(hh, 2, ww, 2, cc // 4).transpose(0, 2, 1, 3, 4)
        return (np.ascontiguousarray(gr).reshape(hh, ww, cc),)

    return record_node(out, (x,), bwd)


def pad_reflect(x, pads):
    """Reflect-pad the spatial grid of x (H, W, C); pads = (top, bottom, left, right)."""
    pt, pb, pl, pr = pads
    hh, ww, _ = x.shape
    if max(pt, pb) >= hh or max(pl, pr) >= ww:
        raise DimensionError(f"pad_reflect: pads {pads} too large for {hh}x{ww}")
    rows = np.pad(np.arange(hh), (pt, pb), mode="reflect")
    cols = np.pad(np.arange(ww), (pl, pr), mode="reflect")
    out = Tensor(np.ascontiguousarray(x.data[rows[:, None], cols[None, :]]))

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (rows[:, None], cols[None, :]), g)
        return (gx,)

    return record_node(out, (x,), bwd)


def crop(x, r0, r1, c0, c1):
    """Copy out the spatial window [r0:r1, c0:c1] of x (H, W, C)."""
    hh, ww, _ = x.shape
    if not (0 <= r0 < r1 <= hh and 0 <= c0 < c1 <= ww):
        raise DimensionError(f"crop window ({r0}:{r1}, {c0}:{c1}) outside {hh}x{ww}")
    out = Tensor(np.ascontiguousarray(x.data[r0:r1, c0:c1]))

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[r0:r1, c0:c1] = g
        return (gx,)

    return record_node(out, (x,), bwd)


def pick_pixel(x, row, col):
    """Extract the channel vector at one spatial position -> (C,)."""
    hh, ww, _ = x.shape
    if not (0 <= row < hh and 0 <= col < ww):
        raise DimensionError(f"pixel ({row}, {col}) outside {hh}x{ww}")
    out = Tensor(np.ascontiguousarray(x.data[row, col]))

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[row, col] = g
        return (gx,)

    return record_node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x, step=1e-4):
    """Compare recorded gradients of scalar f(x) against central differences.

    Returns max over coordinates of |analytic - fd| / max(1, |fd|).  Run in
    64-bit: with float32 inputs the finite differences themselves drown in
    rounding error.
    """
    restore = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with record() as g:
        y = f(x)
        if y.data.shape != ():
            raise DimensionError("grad_check requires a scalar-valued function")
        backward(g, y)
    analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    analytic = analytic.reshape(-1).copy()
    x.grad = None
    x.requires_grad = restore

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        fp = float(f(x).data)
        flat[i] = keep - step
        fm = float(f(x).data)
        flat[i] = keep
        fd = (fp - fm) / (2.0 * step)
        err = abs(analytic[i] - fd) / max(1.0, abs(fd))
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# Binary dump format
# ---------------------------------------------------------------------------

_MAGIC = b"EAMT"


def dump(t, path):
    """Write a tensor as magic, u32-LE rank, u32-LE extents, f32-LE values."""
    arr = np.ascontiguousarray(t.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load(path):
    """Read a tensor dump; inverse of ``dump``, bit-exact for float32 data."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: bad magic {raw[:4]!r}")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank > 4:
        raise DimensionError(f"{path}: rank {rank} exceeds 4")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 4 * count
    if len(raw) != expected:
        raise ConfigError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return Tensor(data.reshape(shape).copy())

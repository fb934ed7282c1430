"""Token-mixing and channel-mixing building blocks.

``grouped_scan`` splits channels into n groups, flattens each group along
its bound trajectory (group i uses curve i mod k), runs all groups through
one fused selective scan, and scatters them back — cost independent of how
many trajectories are in play.  ``full_scan`` is the baseline where every
trajectory scans all channels with its own parameters (cost linear in k);
it exists for cost comparison and ablation, not the reference network.

``block_forward`` is the pre-norm residual pair: gated scan mixer, then one
of four channel MLPs (or none).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .curves import apply_curve, build_curve, invert_curve, scan_set_kinds
from .errors import ConfigError, DimensionError
from .sscan import SsmParams, init_ssm_params, scan_groups, trunc_normal

MLP_KINDS = ("none", "ffn", "gdfn", "simple_ffn", "channel_attention")


def _linear_init(rng, cin, cout, dtype):
    w = T.Tensor(trunc_normal(rng, (cin, cout)), requires_grad=True, dtype=dtype)
    b = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
    return w, b


def _norm_init(c, dtype):
    g = T.Tensor(np.ones(c), requires_grad=True, dtype=dtype)
    b = T.Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
    return g, b


# ---------------------------------------------------------------------------
# Grouped scan (channel-split multi-trajectory) and full-scan baseline
# ---------------------------------------------------------------------------

@dataclass
class GroupedScan:
    """n channel groups, each bound to trajectory (i mod k) of ``scan_kinds``."""

    channels: int
    num_groups: int
    scan_kinds: list            # [(kind, reversed)] resolved from a set name
    group_params: list          # n SsmParams, each d_inner = channels//num_groups

    def named_tensors(self, prefix=""):
        for i, p in enumerate(self.group_params):
            yield from p.named_tensors(f"{prefix}group{i}.")


def init_grouped_scan(channels, num_groups, scan_set, d_state, rng,
                      dtype=np.float32, simplified_b=False):
    if channels % num_groups:
        raise ConfigError(
            f"channels {channels} not divisible by num_groups {num_groups}")
    kinds = scan_set_kinds(scan_set)
    cg = channels // num_groups
    gps = [init_ssm_params(cg, d_state, rng, dtype, simplified_b)
           for _ in range(num_groups)]
    return GroupedScan(channels, num_groups, kinds, gps)


def _stacked(group_params):
    return (
        T.stack([p.log_neg_a for p in group_params], axis=0),
        T.stack([p.b_proj for p in group_params], axis=0),
        T.stack([p.c_proj for p in group_params], axis=0),
        T.stack([p.delta_w for p in group_params], axis=0),
        T.stack([p.delta_b for p in group_params], axis=0),
        T.stack([p.d_skip for p in group_params], axis=0),
    )


def grouped_scan(x, gs):
    """Split -> per-group flatten -> fused scan -> scatter -> concat."""
    hh, ww, c = x.shape
    if c != gs.channels:
        raise DimensionError(f"grouped_scan: {c} channels, config has {gs.channels}")
    n = gs.num_groups
    cg = c // n
    k = len(gs.scan_kinds)
    curves = [build_curve(kind, rev, hh, ww) for kind, rev in gs.scan_kinds]
    seqs = [apply_curve(T.slice_channels(x, i * cg, (i + 1) * cg), curves[i % k])
            for i in range(n)]
    u3 = T.stack(seqs, axis=1)                       # (L, n, Cg)
    la, bp, cp, dw, db, dk = _stacked(gs.group_params)
    y3 = scan_groups(u3, la, bp, cp, dw, db, dk,
                     simplified_b=gs.group_params[0].simplified_b)
    outs = [invert_curve(T.take(y3, i, axis=1), curves[i % k]) for i in range(n)]
    return T.concat_channels(outs)


@dataclass
class FullScan:
    """Baseline: every trajectory scans all channels with its own parameters."""

    channels: int
    scan_kinds: list
    params: list                # k SsmParams, each d_inner = channels

    def named_tensors(self, prefix=""):
        for i, p in enumerate(self.params):
            yield from p.named_tensors(f"{prefix}dir{i}.")


def init_full_scan(channels, scan_set, d_state, rng, dtype=np.float32,
                   simplified_b=False):
    kinds = scan_set_kinds(scan_set)
    ps = [init_ssm_params(channels, d_state, rng, dtype, simplified_b)
          for _ in range(len(kinds))]
    return FullScan(channels, kinds, ps)


def full_scan(x, fs):
    """Run each trajectory over the full channel width; sum the outputs."""
    hh, ww, c = x.shape
    if c != fs.channels:
        raise DimensionError(f"full_scan: {c} channels, config has {fs.channels}")
    curves = [build_curve(kind, rev, hh, ww) for kind, rev in fs.scan_kinds]
    # The k directions are independent, so they batch as k "groups" of full width.
    u3 = T.stack([apply_curve(x, cv) for cv in curves], axis=1)
    la, bp, cp, dw, db, dk = _stacked(fs.params)
    y3 = scan_groups(u3, la, bp, cp, dw, db, dk,
                     simplified_b=fs.params[0].simplified_b)
    out = None
    for i, cv in enumerate(curves):
        back = invert_curve(T.take(y3, i, axis=1), cv)
        out = back if out is None else T.add(out, back)
    return out


# ---------------------------------------------------------------------------
# Gated scan mixer
# ---------------------------------------------------------------------------

@dataclass
class ScanMixerParams:
    """Gated mixer: out = Linear( LN(scan(SiLU(DWConv(Linear(x))))) * SiLU(Linear(x)) )."""

    channels: int
    expanded: int               # lambda * C
    in_left_w: T.Tensor
    in_left_b: T.Tensor
    in_right_w: T.Tensor
    in_right_b: T.Tensor
    dw_kernel: T.Tensor         # (3, 3, expanded)
    dw_bias: T.Tensor
    scan: object                # GroupedScan or FullScan over ``expanded`` channels
    norm_gamma: T.Tensor
    norm_beta: T.Tensor
    out_w: T.Tensor
    out_b: T.Tensor

    def named_tensors(self, prefix=""):
        yield prefix + "in_left_w", self.in_left_w
        yield prefix + "in_left_b", self.in_left_b
        yield prefix + "in_right_w", self.in_right_w
        yield prefix + "in_right_b", self.in_right_b
        yield prefix + "dw_kernel", self.dw_kernel
        yield prefix + "dw_bias", self.dw_bias
        yield from self.scan.named_tensors(prefix + "scan.")
        yield prefix + "norm_gamma", self.norm_gamma
        yield prefix + "norm_beta", self.norm_beta
        yield prefix + "out_w", self.out_w
        yield prefix + "out_b", self.out_b


def init_scan_mixer(channels, expansion, num_groups, scan_set, d_state, rng,
                    dtype=np.float32, full=False, simplified_b=False):
    ec = int(round(channels * expansion))
    lw, lb = _linear_init(rng, channels, ec, dtype)
    rw, rb = _linear_init(rng, channels, ec, dtype)
    dwk = T.Tensor(trunc_normal(rng, (3, 3, ec)), requires_grad=True, dtype=dtype)
    dwb = T.Tensor(np.zeros(ec), requires_grad=True, dtype=dtype)
    if full:
        scan = init_full_scan(ec, scan_set, d_state, rng, dtype, simplified_b)
    else:
        scan = init_grouped_scan(ec, num_groups, scan_set, d_state, rng,
                                 dtype, simplified_b)
    ng, nb = _norm_init(ec, dtype)
    ow, ob = _linear_init(rng, ec, channels, dtype)
    return ScanMixerParams(channels, ec, lw, lb, rw, rb, dwk, dwb, scan,
                           ng, nb, ow, ob)


def scan_mixer(x, p):
    if x.shape[-1] != p.channels:
        raise DimensionError(f"scan_mixer: {x.shape[-1]} channels, params have {p.channels}")
    left = T.linear(x, p.in_left_w, p.in_left_b)
    left = T.dwconv2d(left, p.dw_kernel, p.dw_bias)
    left = T.silu(left)
    if isinstance(p.scan, FullScan):
        mixed = full_scan(left, p.scan)
    else:
        mixed = grouped_scan(left, p.scan)
    y = T.layer_norm(mixed, p.norm_gamma, p.norm_beta)
    z = T.silu(T.linear(x, p.in_right_w, p.in_right_b))
    return T.linear(T.mul(y, z), p.out_w, p.out_b)


# ---------------------------------------------------------------------------
# Channel MLPs
# ---------------------------------------------------------------------------

@dataclass
class ChannelMlpParams:
    kind: str
    tensors: dict = field(default_factory=dict)

    def named_tensors(self, prefix=""):
        for name, t in self.tensors.items():
            yield prefix + name, t


def init_channel_mlp(kind, channels, expansion, rng, dtype=np.float32):
    if kind not in MLP_KINDS:
        raise ConfigError(f"unknown channel MLP kind {kind!r}")
    p = ChannelMlpParams(kind)
    if kind == "none":
        return p
    hidden = int(round(channels * expansion))
    t = p.tensors
    if kind == "ffn":
        t["w1"], t["b1"] = _linear_init(rng, channels, hidden, dtype)
        t["w2"], t["b2"] = _linear_init(rng, hidden, channels, dtype)
    elif kind == "gdfn":
        t["w1"], t["b1"] = _linear_init(rng, channels, 2 * hidden, dtype)
        t["dw_kernel"] = T.Tensor(trunc_normal(rng, (3, 3, 2 * hidden)),
                                  requires_grad=True, dtype=dtype)
        t["dw_bias"] = T.Tensor(np.zeros(2 * hidden), requires_grad=True, dtype=dtype)
        t["w2"], t["b2"] = _linear_init(rng, hidden, channels, dtype)
    elif kind == "simple_ffn":
        if hidden % 2:
            raise ConfigError("simple_ffn needs an even expanded width to split")
        t["w1"], t["b1"] = _linear_init(rng, channels, hidden, dtype)
        t["w2"], t["b2"] = _linear_init(rng, hidden // 2, channels, dtype)
    else:  # channel_attention
        # Width chosen so the parameter count matches ffn at equal expansion;
        # the spatial pool makes its per-pixel cost negligible regardless.
        t["w1"], t["b1"] = _linear_init(rng, channels, hidden, dtype)
        t["w2"], t["b2"] = _linear_init(rng, hidden, channels, dtype)
    return p


def channel_mlp(x, p):
    t = p.tensors
    if p.kind == "none":
        return x
    if p.kind == "ffn":
        return T.linear(T.silu(T.linear(x, t["w1"], t["b1"])), t["w2"], t["b2"])
    if p.kind == "gdfn":
        e = T.dwconv2d(T.linear(x, t["w1"], t["b1"]), t["dw_kernel"], t["dw_bias"])
        half = e.shape[-1] // 2
        gate = T.silu(T.slice_channels(e, 0, half))
        val = T.slice_channels(e, half, e.shape[-1])
        return T.linear(T.mul(gate, val), t["w2"], t["b2"])
    if p.kind == "simple_ffn":
        e = T.linear(x, t["w1"], t["b1"])
        half = e.shape[-1] // 2
        g = T.mul(T.slice_channels(e, 0, half), T.slice_channels(e, half, e.shape[-1]))
        return T.linear(g, t["w2"], t["b2"])
    if p.kind == "channel_attention":
        v = T.spatial_mean(x)
        s = T.sigmoid(T.linear(T.silu(T.linear(v, t["w1"], t["b1"])), t["w2"], t["b2"]))
        return T.scale_channels(x, s)
    raise ConfigError(f"unknown channel MLP kind {p.kind!r}")


# ---------------------------------------------------------------------------
# The residual block
# ---------------------------------------------------------------------------

@dataclass
class BlockParams:
    channels: int
    norm1_gamma: T.Tensor
    norm1_beta: T.Tensor
    mixer: ScanMixerParams
    norm2_gamma: T.Tensor
    norm2_beta: T.Tensor
    mlp: ChannelMlpParams

    def named_tensors(self, prefix=""):
        yield prefix + "norm1_gamma", self.norm1_gamma
        yield prefix + "norm1_beta", self.norm1_beta
        yield from self.mixer.named_tensors(prefix + "mixer.")
        if self.mlp.kind != "none":
            yield prefix + "norm2_gamma", self.norm2_gamma
            yield prefix + "norm2_beta", self.norm2_beta
            yield from self.mlp.named_tensors(prefix + "mlp.")


def init_block(channels, expansion, num_groups, scan_set, d_state, mlp_kind,
               mlp_expansion, rng, dtype=np.float32, full=False,
               simplified_b=False):
    n1g, n1b = _norm_init(channels, dtype)
    mixer = init_scan_mixer(channels, expansion, num_groups, scan_set, d_state,
                            rng, dtype, full, simplified_b)
    n2g, n2b = _norm_init(channels, dtype)
    mlp = init_channel_mlp(mlp_kind, channels, mlp_expansion, rng, dtype)
    return BlockParams(channels, n1g, n1b, mixer, n2g, n2b, mlp)


def block_forward(x, bp):
    """Pre-norm residual pair: x + mixer(LN(x)), then + channel_mlp(LN(.))."""
    h = T.add(x, scan_mixer(T.layer_norm(x, bp.norm1_gamma, bp.norm1_beta), bp.mixer))
    if bp.mlp.kind == "none":
        return h
    return T.add(h, channel_mlp(T.layer_norm(h, bp.norm2_gamma, bp.norm2_beta), bp.mlp))

"""Four-level encoder/decoder restoration network with a global residual.

Widths double per level (C, 2C, 4C, 8C); downsampling is space-to-depth
followed by a channel-halving linear, upsampling its exact mirror; skips
merge by concatenation plus linear reduction.  The network predicts a
residual that is added to the (reflect-padded) input, and the output is
cropped back to the original extent.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import block_forward, init_block
from .curves import SCAN_SET_NAMES, KINDS
from .errors import ConfigError, DimensionError
from .sscan import trunc_normal

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 64
    level_blocks: tuple = (4, 6, 6, 7)
    refinement_blocks: int = 2
    expansion: float = 2.0
    groups: int = 8
    scan_set: object = "all_around"   # set name, or explicit [(kind, reversed)]
    mlp_kind: str = "simple_ffn"
    mlp_expansion: float = 2.0
    d_state: int = 16
    in_channels: int = 3
    dtype: str = "f32"
    full_scan_baseline: bool = False
    simplified_b: bool = False

    @property
    def levels(self):
        return len(self.level_blocks)

    @property
    def divisor(self):
        return 2 ** (self.levels - 1)

    def np_dtype(self):
        try:
            return _DTYPES[self.dtype]
        except KeyError:
            raise ConfigError(f"unknown dtype {self.dtype!r}; use f32 or f64") from None


def scan_set_label(scan_set):
    if isinstance(scan_set, str):
        return scan_set
    return ",".join(k + ("_rev" if r else "") for k, r in scan_set)


def parse_scan_set(text):
    """Set name, or comma-joined curve labels like 'horizontal,vertical_rev'."""
    if text in SCAN_SET_NAMES:
        return text
    out = []
    for label in text.split(","):
        label = label.strip()
        rev = label.endswith("_rev")
        kind = label[:-4] if rev else label
        if kind not in KINDS:
            raise ConfigError(f"unknown curve label {label!r}")
        out.append((kind, rev))
    return out


@dataclass
class RestorationNet:
    cfg: NetConfig
    pe_w: T.Tensor
    pe_b: T.Tensor
    enc_levels: list = field(default_factory=list)   # per level: list of BlockParams
    down_w: list = field(default_factory=list)
    down_b: list = field(default_factory=list)
    latent: list = field(default_factory=list)
    up_w: list = field(default_factory=list)         # deepest first
    up_b: list = field(default_factory=list)
    merge_w: list = field(default_factory=list)
    merge_b: list = field(default_factory=list)
    dec_levels: list = field(default_factory=list)   # deepest first
    refine: list = field(default_factory=list)
    out_w: T.Tensor = None
    out_b: T.Tensor = None

    def named_tensors(self):
        yield "patch_embed.w", self.pe_w
        yield "patch_embed.b", self.pe_b
        for i, blocks in enumerate(self.enc_levels):
            for j, bp in enumerate(blocks):
                yield from bp.named_tensors(f"enc{i}.block{j}.")
            yield f"down{i}.w", self.down_w[i]
            yield f"down{i}.b", self.down_b[i]
        for j, bp in enumerate(self.latent):
            yield from bp.named_tensors(f"latent.block{j}.")
        for j, blocks in enumerate(self.dec_levels):
            lvl = len(self.enc_levels) - 1 - j
            yield f"up{lvl}.w", self.up_w[j]
            yield f"up{lvl}.b", self.up_b[j]
            yield f"merge{lvl}.w", self.merge_w[j]
            yield f"merge{lvl}.b", self.merge_b[j]
            for i, bp in enumerate(blocks):
                yield from bp.named_tensors(f"dec{lvl}.block{i}.")
        for j, bp in enumerate(self.refine):
            yield from bp.named_tensors(f"refine.block{j}.")
        yield "out.w", self.out_w
        yield "out.b", self.out_b

    def parameters(self):
        return [t for _, t in self.named_tensors()]

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.cfg.in_channels:
            raise DimensionError(
                f"forward expects (H, W, {self.cfg.in_channels}), got {x.shape}")
        hh, ww, _ = x.shape
        div = self.cfg.divisor
        if hh < div or ww < div:
            raise DimensionError(f"input {hh}x{ww} smaller than the level divisor {div}")
        pb = (-hh) % div
        pr = (-ww) % div
        padded = T.pad_reflect(x, (0, pb, 0, pr)) if (pb or pr) else x

        f = T.linear(T.unfold(padded, 3), self.pe_w, self.pe_b)
        skips = []
        for i, blocks in enumerate(self.enc_levels):
            for bp in blocks:
                f = block_forward(f, bp)
            skips.append(f)
            f = T.linear(T.space_to_depth(f), self.down_w[i], self.down_b[i])
        for bp in self.latent:
            f = block_forward(f, bp)
        for j, blocks in enumerate(self.dec_levels):
            lvl = len(self.enc_levels) - 1 - j
            f = T.depth_to_space(T.linear(f, self.up_w[j], self.up_b[j]))
            f = T.linear(T.concat_channels([f, skips[lvl]]),
                         self.merge_w[j], self.merge_b[j])
            for bp in blocks:
                f = block_forward(f, bp)
        for bp in self.refine:
            f = block_forward(f, bp)
        r = T.linear(T.unfold(f, 3), self.out_w, self.out_b)
        out = T.add(padded, r)
        if pb or pr:
            out = T.crop(out, 0, hh, 0, ww)
        return out

    __call__ = forward


def build_network(cfg, seed=0):
    """Deterministically initialize a network from ``cfg`` and ``seed``."""
    if cfg.levels < 2:
        raise ConfigError("need at least two levels")
    dtype = cfg.np_dtype()
    rng = np.random.Generator(np.random.PCG64(seed))
    widths = [cfg.base_channels * (2 ** i) for i in range(cfg.levels)]

    def lin(cin, cout):
        w = T.Tensor(trunc_normal(rng, (cin, cout)), requires_grad=True, dtype=dtype)
        b = T.Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
        return w, b

    def blocks(width, count):
        return [init_block(width, cfg.expansion, cfg.groups, cfg.scan_set,
                           cfg.d_state, cfg.mlp_kind, cfg.mlp_expansion, rng,
                           dtype, full=cfg.full_scan_baseline,
                           simplified_b=cfg.simplified_b)
                for _ in range(count)]

    pe_w, pe_b = lin(9 * cfg.in_channels, widths[0])
    net = RestorationNet(cfg, pe_w, pe_b)
    for i in range(cfg.levels - 1):
        net.enc_levels.append(blocks(widths[i], cfg.level_blocks[i]))
        dw, db = lin(4 * widths[i], widths[i + 1])
        net.down_w.append(dw)
        net.down_b.append(db)
    net.latent = blocks(widths[-1], cfg.level_blocks[-1])
    for i in range(cfg.levels - 2, -1, -1):
        uw, ub = lin(widths[i + 1], 2 * widths[i + 1])
        net.up_w.append(uw)
        net.up_b.append(ub)
        mw, mb = lin(2 * widths[i], widths[i])
        net.merge_w.append(mw)
        net.merge_b.append(mb)
        net.dec_levels.append(blocks(widths[i], cfg.level_blocks[i]))
    net.refine = blocks(widths[0], cfg.refinement_blocks)
    net.out_w, net.out_b = lin(9 * widths[0], cfg.in_channels)
    return net


def zero_residual_path(net):
    """Zero the output projection so the forward pass is exactly the identity."""
    net.out_w.data[...] = 0.0
    net.out_b.data[...] = 0.0
    return net


# ---------------------------------------------------------------------------
# Checkpoints: a directory of tensor dumps plus a manifest
# ---------------------------------------------------------------------------

_MANIFEST = "manifest.txt"


def _cfg_lines(cfg):
    yield f"base_channels = {cfg.base_channels}"
    yield f"level_blocks = {','.join(str(b) for b in cfg.level_blocks)}"
    yield f"refinement_blocks = {cfg.refinement_blocks}"
    yield f"expansion = {cfg.expansion!r}"
    yield f"groups = {cfg.groups}"
    yield f"scan_set = {scan_set_label(cfg.scan_set)}"
    yield f"mlp_kind = {cfg.mlp_kind}"
    yield f"mlp_expansion = {cfg.mlp_expansion!r}"
    yield f"d_state = {cfg.d_state}"
    yield f"in_channels = {cfg.in_channels}"
    yield f"dtype = {cfg.dtype}"
    yield f"full_scan_baseline = {str(cfg.full_scan_baseline).lower()}"
    yield f"simplified_b = {str(cfg.simplified_b).lower()}"


def net_config_from_dict(d):
    """Build a NetConfig from string-valued settings (manifest or config file)."""
    cfg = NetConfig()
    conv = {
        "base_channels": int, "refinement_blocks": int, "groups": int,
        "d_state": int, "in_channels": int,
        "expansion": float, "mlp_expansion": float,
        "mlp_kind": str, "dtype": str,
        "level_blocks": lambda s: tuple(int(v) for v in s.split(",")),
        "scan_set": parse_scan_set,
        "full_scan_baseline": _parse_bool, "simplified_b": _parse_bool,
    }
    updates = {}
    for key, raw in d.items():
        if key not in conv:
            raise ConfigError(f"unknown network setting {key!r}")
        try:
            updates[key] = conv[key](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    return replace(cfg, **updates)


def _parse_bool(s):
    s = s.strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValueError(s)


def save_checkpoint(net, dirpath):
    os.makedirs(dirpath, exist_ok=True)
    names = []
    for name, t in net.named_tensors():
        T.dump(t, os.path.join(dirpath, name))
        names.append(name)
    with open(os.path.join(dirpath, _MANIFEST), "w", newline="\n") as fh:
        for line in _cfg_lines(net.cfg):
            fh.write(line + "\n")
        fh.write("[params]\n")
        for name in names:
            fh.write(name + "\n")


def load_checkpoint(dirpath):
    from .config import parse_kv_text
    path = os.path.join(dirpath, _MANIFEST)
    if not os.path.exists(path):
        raise ConfigError(f"no manifest at {path}")
    with open(path) as fh:
        text = fh.read()
    head, sep, tail = text.partition("[params]\n")
    if not sep:
        raise ConfigError(f"{path}: missing [params] section")
    cfg = net_config_from_dict(parse_kv_text(head))
    listed = [ln for ln in tail.splitlines() if ln.strip()]
    net = build_network(cfg, seed=0)
    expect = [name for name, _ in net.named_tensors()]
    if listed != expect:
        raise ConfigError(f"{path}: parameter list does not match the config")
    for name, t in net.named_tensors():
        loaded = T.load(os.path.join(dirpath, name))
        if loaded.shape != t.shape:
            raise DimensionError(f"checkpoint tensor {name}: shape {loaded.shape} "
                                 f"does not match {t.shape}")
        t.data = loaded.data.astype(t.dtype, copy=False)
    return net

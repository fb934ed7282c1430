"""Cost accounting, effective-receptive-field maps, and scan-locality tables.

FLOP convention (documented once, used everywhere): counts are multiply-
accumulates (1 MAC = 1 FLOP).  Channel-mixing matmuls and convolutions are
counted by their defining products; elementwise arithmetic, activations,
normalization, and pooling are excluded.  The scan recurrence costs
``SCAN_STEP_MACS`` per (timestep, channel, state) on top of its per-timestep
projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import FullScan, GroupedScan
from .curves import build_scan_set, locality_profile
from .errors import ConfigError
from .netpbm import write_image

# Per (t, channel, state) the recurrence performs:
#   1 MAC for z = delta*A, 2 for Bbar = delta*phi(z)*B, 2 for
#   h = Abar*h + Bbar*u, 1 for y += C*h.  exp/phi evaluations are
# transcendental, not MACs, and are excluded like other activations.
SCAN_STEP_MACS = 6


def iter_named(obj, prefix=""):
    if hasattr(obj, "named_tensors"):
        yield from obj.named_tensors()
    elif isinstance(obj, T.Tensor):
        yield prefix or "tensor", obj
    else:
        for i, item in enumerate(obj):
            if isinstance(item, tuple):
                yield item
            else:
                yield from iter_named(item, f"{prefix}{i}.")


def count_params(obj):
    """Exact count of trainable scalars in anything exposing named_tensors."""
    return sum(t.data.size for _, t in iter_named(obj) if t.requires_grad)


# ---------------------------------------------------------------------------
# Analytic FLOPs
# ---------------------------------------------------------------------------

def scan_head_flops(ll, cg, ns):
    # delta projection, B/C projections, recurrence, skip gain.
    return ll * cg * cg + 2 * ll * cg * ns + ll * cg * ns * SCAN_STEP_MACS + ll * cg


def scan_path_cost(scan, h, w):
    """(params, flops) of a GroupedScan or FullScan at one extent."""
    ll = h * w
    if isinstance(scan, GroupedScan):
        cg = scan.channels // scan.num_groups
        ns = scan.group_params[0].d_state
        flops = scan.num_groups * scan_head_flops(ll, cg, ns)
    elif isinstance(scan, FullScan):
        ns = scan.params[0].d_state
        flops = len(scan.params) * scan_head_flops(ll, scan.channels, ns)
    else:
        raise ConfigError(f"not a scan module: {type(scan).__name__}")
    return count_params(scan), flops


def _mixer_flops(p, h, w):
    hw = h * w
    c, ec = p.channels, p.expanded
    f = 2 * hw * c * ec          # both input projections
    f += hw * ec * 9             # depthwise 3x3
    f += scan_path_cost(p.scan, h, w)[1]
    f += hw * ec * c             # output projection
    return f


def _mlp_flops(p, channels, h, w):
    hw = h * w
    t = p.tensors
    if p.kind == "none":
        return 0
    if p.kind == "ffn":
        hid = t["w1"].shape[1]
        return hw * (channels * hid + hid * channels)
    if p.kind == "gdfn":
        two_hid = t["w1"].shape[1]
        hid = two_hid // 2
        return hw * (channels * two_hid + two_hid * 9 + hid * channels)
    if p.kind == "simple_ffn":
        hid = t["w1"].shape[1]
        return hw * (channels * hid + (hid // 2) * channels)
    if p.kind == "channel_attention":
        hid = t["w1"].shape[1]
        # One bottleneck evaluation per image, not per pixel.
        return channels * hid + hid * channels
    raise ConfigError(f"unknown channel MLP kind {p.kind!r}")


def block_flops(bp, h, w):
    return _mixer_flops(bp.mixer, h, w) + _mlp_flops(bp.mlp, bp.channels, h, w)


@dataclass
class CostReport:
    h: int
    w: int
    params: int
    flops: int
    breakdown: dict   # module -> (params, flops)

    def to_csv(self):
        lines = ["module,params,flops"]
        for name, (p, f) in self.breakdown.items():
            lines.append(f"{name},{p},{f}")
        lines.append(f"total,{self.params},{self.flops}")
        return "\n".join(lines) + "\n"


def count_flops(net, h, w):
    """Analytic MAC count of one forward pass at extent h x w."""
    return cost_report(net, h, w).flops


def cost_report(net, h, w):
    cfg = net.cfg
    if h % cfg.divisor or w % cfg.divisor:
        raise ConfigError(
            f"measure at extents divisible by {cfg.divisor}, got {h}x{w}")
    widths = [cfg.base_channels * (2 ** i) for i in range(cfg.levels)]

    params_by_module = {}
    for name, t in net.named_tensors():
        key = name.split(".", 1)[0]
        params_by_module[key] = params_by_module.get(key, 0) + t.data.size

    flops = {}
    flops["patch_embed"] = h * w * (9 * cfg.in_channels) * widths[0]
    for i, blocks in enumerate(net.enc_levels):
        hh, ww = h >> i, w >> i
        flops[f"enc{i}"] = sum(block_flops(bp, hh, ww) for bp in blocks)
        flops[f"down{i}"] = (hh // 2) * (ww // 2) * (4 * widths[i]) * widths[i + 1]
    hh, ww = h >> (cfg.levels - 1), w >> (cfg.levels - 1)
    flops["latent"] = sum(block_flops(bp, hh, ww) for bp in net.latent)
    for j, blocks in enumerate(net.dec_levels):
        lvl = len(net.enc_levels) - 1 - j
        hh, ww = h >> (lvl + 1), w >> (lvl + 1)
        flops[f"up{lvl}"] = hh * ww * widths[lvl + 1] * 2 * widths[lvl + 1]
        hh, ww = h >> lvl, w >> lvl
        flops[f"merge{lvl}"] = hh * ww * (2 * widths[lvl]) * widths[lvl]
        flops[f"dec{lvl}"] = sum(block_flops(bp, hh, ww) for bp in blocks)
    flops["refine"] = sum(block_flops(bp, h, w) for bp in net.refine)
    flops["out"] = h * w * (9 * widths[0]) * cfg.in_channels

    breakdown = {}
    for key in flops:
        breakdown[key] = (params_by_module.get(key, 0), int(flops[key]))
    total_p = sum(p for p, _ in breakdown.values())
    total_f = sum(f for _, f in breakdown.values())
    return CostReport(h, w, total_p, total_f, breakdown)


# ---------------------------------------------------------------------------
# Effective receptive field
# ---------------------------------------------------------------------------

@dataclass
class ErfMap:
    values: np.ndarray    # (H, W), nonnegative, sums to 1
    target: tuple

    def to_csv(self):
        lines = [",".join(f"{v:.8e}" for v in row) for row in self.values]
        return "\n".join(lines) + "\n"

    def to_pgm(self, path):
        peak = float(self.values.max())
        scaled = self.values / peak if peak > 0 else self.values
        write_image(scaled[..., None], path)


def erf_map(net, images, target):
    """Average |d(sum of output channels at target)/d(input)| over images.

    ``net`` may be a RestorationNet or any callable mapping an (H, W, C)
    tensor to one of the same leading extents.  The result is normalized to
    unit mass.
    """
    if not images:
        raise ConfigError("erf_map needs at least one image")
    fwd = net.forward if hasattr(net, "forward") else net
    row, col = target
    acc = None
    for img in images:
        x = T.Tensor(np.array(img.data if isinstance(img, T.Tensor) else img))
        x.requires_grad = True
        with T.record() as g:
            y = fwd(x)
            s = T.sum_all(T.pick_pixel(y, row, col))
            T.backward(g, s)
        contrib = np.abs(x.grad).sum(axis=-1).astype(np.float64)
        acc = contrib if acc is None else acc + contrib
    acc /= len(images)
    total = acc.sum()
    if not np.isfinite(total) or total <= 0:
        raise ConfigError("receptive field is empty or non-finite; "
                          "cannot normalize")
    return ErfMap(acc / total, (row, col))


def cone_mass(erf, half_width_deg=10.0):
    """Fraction of ERF mass within +-``half_width_deg`` of the two diagonals.

    Pixel angles are measured from the target; the target pixel itself is
    excluded (its direction is undefined).
    """
    hh, ww = erf.values.shape
    row, col = erf.target
    dr = np.abs(np.arange(hh) - row)[:, None]
    dc = np.abs(np.arange(ww) - col)[None, :]
    theta = np.degrees(np.arctan2(dr, dc))      # [0, 90]
    sel = np.abs(theta - 45.0) <= half_width_deg
    sel[row, col] = False
    return float(erf.values[sel].sum())


# ---------------------------------------------------------------------------
# Scan locality
# ---------------------------------------------------------------------------

def locality_report(scan_set, h, w):
    """Per-curve LocalityProfile rows for a named strategy at one extent."""
    return [(c.label, locality_profile(c)) for c in build_scan_set(scan_set, h, w)]


def locality_csv(rows):
    lines = ["curve,mean_1d_distance,max_1d_distance,pairs"]
    for label, p in rows:
        lines.append(f"{label},{p.mean_1d_distance:.6f},{p.max_1d_distance},{p.pairs}")
    return "\n".join(lines) + "\n"

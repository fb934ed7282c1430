"""Why grouping matters: scan cost versus the number of directions.

The grouped path assigns each of n channel groups to one of k directions, so
adding directions re-partitions work instead of adding it.  The baseline runs
every direction over the full width and pays k times the k=1 cost.
"""

import numpy as np

from restoscan.analysis import cost_report, scan_path_cost
from restoscan.blocks import init_full_scan, init_grouped_scan
from restoscan.network import NetConfig, build_network

CH, GROUPS, NS, SIDE = 64, 8, 16, 64

sets = {1: [("horizontal", False)],
        2: [("horizontal", False), ("horizontal", True)],
        4: "2d",
        8: "all_around"}

print(f"scan path over {CH} channels, {GROUPS} groups, {SIDE}x{SIDE} input")
print(f"{'k':>2} {'grouped params':>14} {'grouped MACs':>13} "
      f"{'full params':>12} {'full MACs':>12}")
for k, ss in sets.items():
    rng = np.random.default_rng(0)
    gp, gf = scan_path_cost(init_grouped_scan(CH, GROUPS, ss, NS, rng), SIDE, SIDE)
    fp, ff = scan_path_cost(init_full_scan(CH, ss, NS, rng), SIDE, SIDE)
    print(f"{k:>2} {gp:>14} {gf:>13} {fp:>12} {ff:>12}")

print()
print("whole-network breakdown for a small config at 64x64:")
cfg = NetConfig(base_channels=16, level_blocks=(1, 1, 1, 1),
                refinement_blocks=1, groups=8, d_state=16)
rep = cost_report(build_network(cfg, seed=0), 64, 64)
print(rep.to_csv())

# The headline numbers for the default (full-size) config; building it takes
# a moment since the parameters are actually materialized.
net = build_network(NetConfig(), seed=0)
rep = cost_report(net, 256, 256)
print(f"default config: {rep.params / 1e6:.2f} M params, "
      f"{rep.flops / 1e9:.1f} GMACs at 256x256")

"""Receptive-field maps for three very different "networks".

1. the identity (residual path zeroed): the map is a delta at the target;
2. a single 3x3 depthwise convolution: a 3x3 patch of mass;
3. an untrained scan network: mass spreads along the scan directions far
   beyond anything a convolution of that depth could reach.

Writes each map as a PGM (white = most influence on the target pixel).
"""

import os
import sys

import numpy as np

from restoscan import tensor as T
from restoscan.analysis import cone_mass, erf_map
from restoscan.network import NetConfig, build_network, zero_residual_path

outdir = sys.argv[1] if len(sys.argv) > 1 else "erf_probe"
os.makedirs(outdir, exist_ok=True)

rng = np.random.default_rng(0)
images = [rng.random((48, 48, 3)).astype(np.float32) for _ in range(4)]
target = (24, 24)

cfg = NetConfig(base_channels=16, level_blocks=(1, 1, 1, 1),
                refinement_blocks=1, groups=8, scan_set="all_around",
                d_state=16)

probes = {
    "identity": zero_residual_path(build_network(cfg, seed=0)),
    "conv3x3": lambda x: T.dwconv2d(
        x, T.Tensor(np.ones((3, 3, 3), dtype=np.float32))),
    "scan_net": build_network(cfg, seed=0),
}

for name, net in probes.items():
    m = erf_map(net, images, target)
    path = os.path.join(outdir, f"erf_{name}.pgm")
    m.to_pgm(path)
    support = int((m.values > 0).sum())
    print(f"{name:9s} support {support:4d} px, "
          f"diagonal cone mass {cone_mass(m):.4f}  -> {path}")

print("\ntrain the same config (see demos/denoise_micro.py) and re-run the")
print("probe on the checkpoint to watch the map adapt to the data.")

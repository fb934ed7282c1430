"""Command-line front end.

Exit codes: 0 success, 1 usage, 2 configuration problem, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import tensor as T
from .analysis import cost_report, erf_map, locality_csv, locality_report, scan_path_cost
from .blocks import init_full_scan, init_grouped_scan
from .config import read_kv_file, split_settings
from .curves import KINDS, build_curve
from .data import DATA_KEYS, synth_dataset, synth_specs_from_dict
from .errors import ConfigError, DimensionError, NumericError
from .netpbm import read_image, write_image
from .network import (build_network, load_checkpoint, net_config_from_dict,
                      save_checkpoint)
from .train import evaluate_psnr, train, train_config_from_dict

NET_KEYS = ("base_channels", "level_blocks", "refinement_blocks", "expansion",
            "groups", "scan_set", "mlp_kind", "mlp_expansion", "d_state",
            "in_channels", "dtype", "full_scan_baseline", "simplified_b")
TRAIN_KEYS = ("iterations", "lr_init", "lr_final", "beta1", "beta2",
              "weight_decay", "eps", "stages", "augment", "seed")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_all(path):
    net_d, train_d, data_d = split_settings(
        read_kv_file(path), ("net", NET_KEYS), ("train", TRAIN_KEYS),
        ("data", DATA_KEYS))
    return (net_config_from_dict(net_d), train_config_from_dict(train_d),
            synth_specs_from_dict(data_d))


def _write_text(path, text):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="\n") as fh:
            fh.write(text)


def _cmd_train(args):
    net_cfg, train_cfg, (train_spec, val_spec) = _load_all(args.config)
    net = build_network(net_cfg, seed=train_cfg.seed)
    data = synth_dataset(train_spec)
    log = train(net, data, train_cfg, diagnostics_dir=args.out)
    save_checkpoint(net, args.out)
    from .train import write_loss_log
    import os
    write_loss_log(log, os.path.join(args.out, "loss_log.csv"))
    val = synth_dataset(val_spec)
    noisy_db = float(np.mean([  # baseline: the degraded input itself
        _psnr_pair(noisy, clean) for clean, noisy in val]))
    trained_db = evaluate_psnr(net, val)
    print(f"final loss {log[-1][2]:.6f}")
    print(f"val psnr noisy {noisy_db:.2f} dB -> restored {trained_db:.2f} dB")
    return 0


def _psnr_pair(a, b):
    from .metrics import psnr
    return psnr(a, b)


def _cmd_infer(args):
    net = load_checkpoint(args.checkpoint)
    img = read_image(args.input)
    if img.shape[2] != net.cfg.in_channels:
        raise ConfigError(
            f"image has {img.shape[2]} channels, network expects {net.cfg.in_channels}")
    out = net.forward(img)
    write_image(np.clip(out.data, 0.0, 1.0), args.output)
    return 0


def _cmd_erf(args):
    net = load_checkpoint(args.checkpoint)
    _, _, (_, val_spec) = _load_all(args.config)
    pairs = synth_dataset(val_spec)
    images = [noisy for _, noisy in pairs]
    m = erf_map(net, images, (args.row, args.col))
    m.to_pgm(args.out_prefix + ".pgm")
    _write_text(args.out_prefix + ".csv", m.to_csv())
    from .analysis import cone_mass
    print(f"diagonal cone mass {cone_mass(m):.4f}")
    return 0


def _cmd_cost(args):
    net_cfg, _, _ = _load_all(args.config)
    net = build_network(net_cfg, seed=0)
    report = cost_report(net, args.height, args.width)
    _write_text(args.out, report.to_csv())
    return 0


def _cmd_curves(args):
    rev = args.kind.endswith("_rev")
    kind = args.kind[:-4] if rev else args.kind
    if kind not in KINDS:
        raise ConfigError(f"unknown curve kind {args.kind!r}")
    c = build_curve(kind, rev or args.reversed, args.height, args.width)
    lines = []
    for t, cell in enumerate(c.order):
        lines.append(f"{t},{cell // c.width},{cell % c.width}")
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def _cmd_gradcheck(args):
    net_cfg, _, _ = _load_all(args.config)
    net = build_network(replace(net_cfg, dtype="f64"), seed=args.seed)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    side = net.cfg.divisor
    x = T.Tensor(rng.random((side, side, net.cfg.in_channels)), dtype=np.float64)
    err = T.grad_check(lambda v: T.mean_all(net.forward(v)), x)
    print(f"max gradient error {err:.3e}")
    if err >= 1e-4:
        raise NumericError(f"gradient check failed: {err:.3e} >= 1e-4")
    return 0


def _cmd_scan_bench(args):
    sets = {1: [("horizontal", False)],
            2: [("horizontal", False), ("horizontal", True)],
            4: "2d",
            8: "all_around"}
    rng = np.random.Generator(np.random.PCG64(0))
    lines = ["k,grouped_params,grouped_flops,full_params,full_flops"]
    for k, scan_set in sets.items():
        gs = init_grouped_scan(args.channels, args.groups, scan_set,
                               args.d_state, rng)
        fs = init_full_scan(args.channels, scan_set, args.d_state, rng)
        gp, gf = scan_path_cost(gs, args.height, args.width)
        fp, ff = scan_path_cost(fs, args.height, args.width)
        lines.append(f"{k},{gp},{gf},{fp},{ff}")
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


def _cmd_locality(args):
    rows = locality_report(args.scan_set, args.height, args.width)
    _write_text(args.out, locality_csv(rows))
    return 0


def _build_parser():
    p = _Parser(prog="restoscan",
                description="Image restoration with channel-grouped "
                            "multi-directional selective scans.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train on synthetic data; write a checkpoint")
    sp.add_argument("config")
    sp.add_argument("out", help="checkpoint directory")
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("infer", help="restore one PGM/PPM image")
    sp.add_argument("checkpoint")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(fn=_cmd_infer)

    sp = sub.add_parser("erf", help="effective-receptive-field map at a target pixel")
    sp.add_argument("checkpoint")
    sp.add_argument("config", help="config providing the synthetic image spec")
    sp.add_argument("row", type=int)
    sp.add_argument("col", type=int)
    sp.add_argument("out_prefix", help="writes <prefix>.pgm and <prefix>.csv")
    sp.set_defaults(fn=_cmd_erf)

    sp = sub.add_parser("cost", help="parameter/FLOP report for a config")
    sp.add_argument("config")
    sp.add_argument("height", type=int)
    sp.add_argument("width", type=int)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_cost)

    sp = sub.add_parser("curves", help="dump a scan trajectory as step,row,col")
    sp.add_argument("kind", help="curve kind, optionally with _rev suffix")
    sp.add_argument("height", type=int)
    sp.add_argument("width", type=int)
    sp.add_argument("--reversed", action="store_true")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_curves)

    sp = sub.add_parser("gradcheck", help="finite-difference check of a config")
    sp.add_argument("config")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=_cmd_gradcheck)

    sp = sub.add_parser("scan-bench",
                        help="grouped vs per-direction scan cost over k directions")
    sp.add_argument("--channels", type=int, default=64)
    sp.add_argument("--groups", type=int, default=8)
    sp.add_argument("--d-state", type=int, default=16)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--width", type=int, default=64)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_scan_bench)

    sp = sub.add_parser("locality", help="per-curve neighbor-distance table")
    sp.add_argument("scan_set")
    sp.add_argument("height", type=int)
    sp.add_argument("width", type=int)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_locality)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ConfigError, DimensionError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()

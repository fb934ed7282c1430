"""Training harness end to end: config files, synthetic data, metrics,
image IO, the optimizer loop, and the command-line front end."""

import math
import os

import numpy as np
import pytest

from restoscan import tensor as T
from restoscan.cli import main
from restoscan.config import parse_kv_text, read_kv_file, split_settings
from restoscan.data import (SynthSpec, augment_pair, gaussian_noise,
                            synth_dataset, synth_specs_from_dict)
from restoscan.errors import ConfigError, DimensionError, NumericError
from restoscan.metrics import PSNR_CAP, psnr, ssim
from restoscan.netpbm import read_image, write_image
from restoscan.network import NetConfig, build_network
from restoscan.train import (TrainConfig, cosine_lr, train,
                             train_config_from_dict, write_loss_log)

rng = np.random.default_rng(31337)

TINY = NetConfig(base_channels=8, level_blocks=(1, 1), refinement_blocks=0,
                 groups=4, scan_set="2d", d_state=2)


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def test_parse_kv_basics():
    d = parse_kv_text("a = 1\n# comment\n\nb=two words  \n")
    assert d == {"a": "1", "b": "two words"}


def test_parse_kv_line_numbers_in_errors():
    with pytest.raises(ConfigError, match=":3:"):
        parse_kv_text("a = 1\n\nnot a setting\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError, match=":1:"):
        parse_kv_text(" = 3\n")      # empty key


def test_split_settings_families():
    d = {"alpha": "1", "beta": "2"}
    fam_a, fam_b = split_settings(d, ("first", ("alpha",)), ("second", ("beta",)))
    assert fam_a == {"alpha": "1"} and fam_b == {"beta": "2"}
    with pytest.raises(ConfigError, match="gamma"):
        split_settings({"gamma": "3"}, ("first", ("alpha",)))


def test_read_kv_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("x = 7\n")
    assert read_kv_file(str(p)) == {"x": "7"}
    with pytest.raises(ConfigError, match="cannot read"):
        read_kv_file(str(tmp_path / "missing.cfg"))


def test_train_config_parsing():
    cfg = train_config_from_dict({
        "iterations": "100", "stages": "8x2@0, 16x1@50",
        "augment": "hflip,rot90", "lr_init": "1e-3"})
    assert cfg.iterations == 100
    assert cfg.stages == ((8, 2, 0), (16, 1, 50))
    assert cfg.augment == ("hflip", "rot90")
    assert train_config_from_dict({"augment": "none"}).augment == ()
    with pytest.raises(ConfigError):
        train_config_from_dict({"stages": "8y2@0"})
    with pytest.raises(ConfigError):
        train_config_from_dict({"momentum": "0.9"})


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def test_dataset_deterministic_and_seed_sensitive():
    a = synth_dataset(SynthSpec(count=2, height=32, width=32, seed=3))
    b = synth_dataset(SynthSpec(count=2, height=32, width=32, seed=3))
    c = synth_dataset(SynthSpec(count=2, height=32, width=32, seed=4))
    for (ca, na), (cb, nb) in zip(a, b):
        assert np.array_equal(ca.data, cb.data)
        assert np.array_equal(na.data, nb.data)
    assert not np.array_equal(a[0][0].data, c[0][0].data)


def test_dataset_values_and_dtype():
    pairs = synth_dataset(SynthSpec(count=1, height=48, width=40, seed=9))
    clean, noisy = pairs[0]
    assert clean.data.dtype == np.float32 and noisy.data.dtype == np.float32
    assert clean.shape == (48, 40, 3)
    for t in (clean, noisy):
        assert t.data.min() >= 0.0 and t.data.max() <= 1.0


def test_sigma_zero_noiseless():
    clean, noisy = synth_dataset(SynthSpec(sigma=0.0, count=1, seed=1))[0]
    assert np.array_equal(clean.data, noisy.data)


def test_noise_scale_matches_sigma():
    g = np.random.Generator(np.random.PCG64(0))
    n = gaussian_noise(g, (200, 200, 3), 25.0)
    assert abs(n.std() - 25.0 / 255.0) / (25.0 / 255.0) < 0.02
    assert abs(n.mean()) < 1e-3


def test_val_spec_never_shares_seed():
    train_spec, val_spec = synth_specs_from_dict({"data_seed": "7"})
    assert train_spec.seed == 7 and val_spec.seed == 8
    with pytest.raises(ConfigError):
        synth_specs_from_dict({"noise": "25"})
    with pytest.raises(ConfigError):
        synth_dataset(SynthSpec(count=0))
    with pytest.raises(ConfigError):
        synth_dataset(SynthSpec(kind="salt_pepper"))


def test_augment_preserves_pair_alignment():
    clean = rng.random((16, 16, 3))
    noisy = np.clip(clean + gaussian_noise(rng, clean.shape, 25.0), 0, 1)
    base = psnr(clean, noisy)
    g = np.random.Generator(np.random.PCG64(11))
    seen_change = False
    for _ in range(8):
        ac, an = augment_pair(clean, noisy, g, ("hflip", "vflip", "rot90"))
        assert abs(psnr(ac, an) - base) < 1e-10   # same pixel multiset
        seen_change |= ac.shape != clean.shape or not np.array_equal(ac, clean)
    assert seen_change
    with pytest.raises(ConfigError):
        augment_pair(clean, noisy, g, ("shear",))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_psnr_values():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, np.ones_like(a)) == 0.0
    b = a + 0.1                      # mse 0.01 -> 20 dB
    assert abs(psnr(a, b) - 20.0) < 1e-9
    assert psnr(a, b) == psnr(b, a)
    assert psnr(T.Tensor(a.astype(np.float32)), T.Tensor(b.astype(np.float32))) == pytest.approx(20.0, abs=1e-4)


def test_ssim_values():
    a = rng.random((16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    noisy = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    s = ssim(a, noisy)
    assert 0.0 < s < 0.95
    worse = np.clip(a + rng.normal(0, 0.4, a.shape), 0, 1)
    assert ssim(a, worse) < s
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8, 1)), np.zeros((8, 8, 1)))   # below window size


# ---------------------------------------------------------------------------
# PGM/PPM round trip
# ---------------------------------------------------------------------------

def test_netpbm_round_trip(tmp_path):
    img = (np.arange(24).reshape(2, 4, 3) / 23.0).astype(np.float32)
    p = str(tmp_path / "c.ppm")
    write_image(img, p)
    back = read_image(p).data
    assert back.shape == (2, 4, 3)
    assert np.abs(back * 255 - np.floor(img * 255 + 0.5)).max() < 1e-5


def test_netpbm_half_rounds_up(tmp_path):
    p = str(tmp_path / "h.pgm")
    write_image(np.full((1, 1, 1), 0.5, dtype=np.float32), p)
    raw = open(p, "rb").read()
    assert raw.startswith(b"P5\n1 1\n255\n")
    assert raw[-1] == 128


def test_netpbm_gray_vs_color(tmp_path):
    g = str(tmp_path / "g.pgm")
    write_image(np.zeros((3, 2, 1), dtype=np.float32), g)
    assert open(g, "rb").read(2) == b"P5"
    c = str(tmp_path / "c.ppm")
    write_image(np.zeros((3, 2, 3), dtype=np.float32), c)
    assert open(c, "rb").read(2) == b"P6"
    with pytest.raises(DimensionError):
        write_image(np.zeros((3, 2, 2), dtype=np.float32), g)


def test_netpbm_header_comments(tmp_path):
    p = str(tmp_path / "c.pgm")
    with open(p, "wb") as fh:
        fh.write(b"P5 # magic\n# size next\n2 1\n255\n\x00\xff")
    img = read_image(p).data
    assert img.shape == (1, 2, 1)
    assert img[0, 1, 0] == 1.0


def test_netpbm_malformed_errors_cite_offset(tmp_path):
    cases = [b"P7\n1 1\n255\n\x00",          # wrong magic
             b"P5\n1 1\n999\n\x00",          # unsupported maxval
             b"P5\n2 2\n255\n\x00\x00"]      # truncated raster
    for i, raw in enumerate(cases):
        p = str(tmp_path / f"bad{i}.pgm")
        with open(p, "wb") as fh:
            fh.write(raw)
        with pytest.raises(ConfigError, match="byte"):
            read_image(p)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def micro_data(n=2, size=16, seed=3):
    return synth_dataset(SynthSpec(count=n, height=size, width=size, seed=seed))


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 3e-4, 1e-6) == 3e-4
    assert cosine_lr(100, 100, 3e-4, 1e-6) == 1e-6
    mid = cosine_lr(50, 100, 3e-4, 1e-6)
    assert abs(mid - (3e-4 + 1e-6) / 2) < 1e-19
    # monotone decreasing
    vals = [cosine_lr(t, 100, 3e-4, 1e-6) for t in range(101)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_zero_lr_changes_nothing():
    net = build_network(TINY, seed=1)
    before = [t.data.copy() for t in net.parameters()]
    cfg = TrainConfig(iterations=1, lr_init=0.0, lr_final=0.0,
                      stages=((8, 1, 0),), augment=(), seed=0)
    train(net, micro_data(), cfg)
    for t, b in zip(net.parameters(), before):
        assert np.array_equal(t.data, b)


def test_training_reduces_loss_and_logs_stages():
    net = build_network(TINY, seed=2)
    cfg = TrainConfig(iterations=6, lr_init=1e-3, lr_final=1e-4,
                      stages=((8, 2, 0), (16, 1, 4)), augment=(), seed=0)
    log = train(net, micro_data(), cfg)
    assert len(log) == 6
    assert [(r[3], r[4]) for r in log[:4]] == [(8, 2)] * 4
    assert [(r[3], r[4]) for r in log[4:]] == [(16, 1)] * 2
    assert [r[0] for r in log] == list(range(6))
    assert log[0][1] == 1e-3                       # cosine starts at lr_init


def test_training_is_reproducible():
    def run():
        net = build_network(TINY, seed=4)
        cfg = TrainConfig(iterations=5, stages=((8, 2, 0),), seed=9)
        log = train(net, micro_data(), cfg)
        return log, [t.data.copy() for t in net.parameters()]

    log_a, params_a = run()
    log_b, params_b = run()
    assert log_a == log_b                          # bit-identical floats
    for a, b in zip(params_a, params_b):
        assert np.array_equal(a, b)


def test_stage_validation():
    net = build_network(TINY, seed=0)
    data = micro_data()
    bad = [((7, 1, 0),),                # patch not divisible by 2
           ((8, 0, 0),),                # batch < 1
           ((8, 1, 2),),                # first stage must start at 0
           ((8, 1, 0), (8, 1, 0)),      # starts must increase
           ((8, 1, 0), (8, 1, 99)),     # start beyond iterations
           ((32, 1, 0),)]               # patch larger than the images
    for stages in bad:
        cfg = TrainConfig(iterations=4, stages=stages)
        with pytest.raises(ConfigError):
            train(net, data, cfg)


def test_nonfinite_loss_aborts_and_dumps(tmp_path):
    net = build_network(TINY, seed=5)
    data = micro_data()
    for clean, _ in data:
        clean.data[0, 0, 0] = np.inf   # poison the reference images
    cfg = TrainConfig(iterations=2, stages=((16, 1, 0),), augment=(), seed=0)
    with pytest.raises(NumericError, match="iteration 0"):
        train(net, data, cfg, diagnostics_dir=str(tmp_path))
    dumped = os.listdir(tmp_path / "bad_batch")
    assert any(f.startswith("iter0_clean") for f in dumped)
    assert any(f.startswith("iter0_noisy") for f in dumped)


def test_loss_log_format(tmp_path):
    p = str(tmp_path / "log.csv")
    write_loss_log([(0, 3e-4, 0.5, 8, 2), (1, 2e-4, 0.25, 8, 2)], p)
    lines = open(p, "rb").read().decode().split("\n")
    assert lines[0] == "iteration,lr,loss,patch,batch"
    assert lines[1] == "0,3.000000000000e-04,5.000000000000e-01,8,2"
    assert lines[-1] == ""                         # trailing LF, LF endings


# ---------------------------------------------------------------------------
# Command-line interface
# ---------------------------------------------------------------------------

CONFIG = """\
# micro end-to-end configuration
base_channels = 8
level_blocks = 1,1
refinement_blocks = 0
groups = 4
scan_set = 2d
d_state = 2

iterations = 3
stages = 8x1@0
lr_init = 1e-3
lr_final = 1e-4
seed = 0

sigma = 25
train_images = 2
val_images = 1
image_size = 16
data_seed = 5
"""


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "micro.cfg"
    cfg.write_text(CONFIG)
    ckpt = root / "ckpt"
    rc = main(["train", str(cfg), str(ckpt)])
    return rc, root, cfg, ckpt


def test_cli_train(cli_run, capsys):
    rc, _, _, ckpt = cli_run
    assert rc == 0
    assert (ckpt / "manifest.txt").exists()
    log_lines = (ckpt / "loss_log.csv").read_text().strip().split("\n")
    assert log_lines[0] == "iteration,lr,loss,patch,batch"
    assert len(log_lines) == 4


def test_cli_infer(cli_run, tmp_path):
    rc, root, _, ckpt = cli_run
    pairs = synth_dataset(SynthSpec(count=1, height=16, width=16, seed=6))
    src = str(tmp_path / "noisy.ppm")
    write_image(pairs[0][1].data, src)
    dst = str(tmp_path / "restored.ppm")
    assert main(["infer", str(ckpt), src, dst]) == 0
    out = read_image(dst)
    assert out.shape == (16, 16, 3)


def test_cli_erf(cli_run, tmp_path, capsys):
    rc, root, cfg, ckpt = cli_run
    prefix = str(tmp_path / "erf")
    assert main(["erf", str(ckpt), str(cfg), "8", "8", prefix]) == 0
    assert os.path.exists(prefix + ".pgm")
    assert os.path.exists(prefix + ".csv")
    assert "cone mass" in capsys.readouterr().out


def test_cli_cost(cli_run, tmp_path):
    _, _, cfg, _ = cli_run
    out = str(tmp_path / "cost.csv")
    assert main(["cost", str(cfg), "16", "16", "--out", out]) == 0
    lines = open(out).read().strip().split("\n")
    assert lines[0] == "module,params,flops"
    assert lines[-1].startswith("total,")


def test_cli_gradcheck(cli_run, capsys):
    _, _, cfg, _ = cli_run
    assert main(["gradcheck", str(cfg)]) == 0
    assert "max gradient error" in capsys.readouterr().out


def test_cli_curves_frozen_rows(tmp_path):
    out = str(tmp_path / "c.csv")
    assert main(["curves", "horizontal", "2", "3", "--out", out]) == 0
    assert open(out).read() == "0,0,0\n1,0,1\n2,0,2\n3,1,0\n4,1,1\n5,1,2\n"
    assert main(["curves", "horizontal_rev", "1", "3", "--out", out]) == 0
    assert open(out).read() == "0,0,2\n1,0,1\n2,0,0\n"


def test_cli_scan_bench(tmp_path):
    out = str(tmp_path / "bench.csv")
    assert main(["scan-bench", "--channels", "8", "--groups", "2",
                 "--d-state", "2", "--height", "4", "--width", "4",
                 "--out", out]) == 0
    lines = open(out).read().strip().split("\n")
    assert lines[0] == "k,grouped_params,grouped_flops,full_params,full_flops"
    rows = [ln.split(",") for ln in lines[1:]]
    assert [r[0] for r in rows] == ["1", "2", "4", "8"]
    grouped = {(r[1], r[2]) for r in rows}
    assert len(grouped) == 1                       # k-independent
    base_p, base_f = int(rows[0][3]), int(rows[0][4])
    for r in rows:
        k = int(r[0])
        assert int(r[3]) == k * base_p and int(r[4]) == k * base_f


def test_cli_locality(tmp_path):
    out = str(tmp_path / "loc.csv")
    assert main(["locality", "hilbert", "8", "8", "--out", out]) == 0
    lines = open(out).read().strip().split("\n")
    assert lines[1].startswith("hilbert,5.071429")


def test_cli_exit_codes(tmp_path, capsys):
    assert main([]) == 1                            # usage
    assert main(["curves", "spiral", "2", "2"]) == 2
    assert main(["cost", str(tmp_path / "none.cfg"), "16", "16"]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("unknown_setting = 1\n")
    assert main(["cost", str(bad), "16", "16"]) == 2
    capsys.readouterr()

"""Training loop: decoupled-weight-decay Adam, cosine annealing, progressive
patch schedule, L1 loss, deterministic from one seed."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import augment_pair
from .errors import ConfigError, NumericError
from .metrics import psnr


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr_init: float = 3e-4
    lr_final: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    # (patch, batch, start_iteration); later stages take over at their start.
    stages: tuple = ((32, 2, 0),)
    augment: tuple = ("hflip", "vflip", "rot90")
    seed: int = 0


def cosine_lr(t, total, lr_init, lr_final):
    """lr(t) = lr_final + (lr_init - lr_final) * (1 + cos(pi t/total)) / 2."""
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay; state arrays match parameter dtype."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


def _validate_stages(stages, divisor, iterations):
    if not stages:
        raise ConfigError("need at least one progressive stage")
    prev = None
    for patch, batch, start in stages:
        if patch % divisor:
            raise ConfigError(f"stage patch {patch} not divisible by {divisor}")
        if batch < 1:
            raise ConfigError("stage batch must be >= 1")
        if prev is None:
            if start != 0:
                raise ConfigError("first stage must start at iteration 0")
        elif start <= prev:
            raise ConfigError("stage start iterations must strictly increase")
        if start >= iterations:
            raise ConfigError(f"stage start {start} beyond total iterations")
        prev = start


def _stage_at(stages, it):
    cur = stages[0]
    for st in stages:
        if st[2] <= it:
            cur = st
        else:
            break
    return cur


def train(net, data, cfg, log_path=None, diagnostics_dir="."):
    """Optimize ``net`` on (clean, degraded) pairs; returns the loss log.

    The log holds one (iteration, lr, loss, patch, batch) record per step.
    A non-finite loss aborts after dumping the offending batch next to
    ``diagnostics_dir``.
    """
    div = net.cfg.divisor
    _validate_stages(cfg.stages, div, cfg.iterations)
    for clean, _ in data:
        hh, ww, _ = clean.shape
        for patch, _, _ in cfg.stages:
            if patch > hh or patch > ww:
                raise ConfigError(f"stage patch {patch} exceeds image extent {hh}x{ww}")

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = AdamW(net.parameters(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    log = []
    for it in range(cfg.iterations):
        patch, batch, _ = _stage_at(cfg.stages, it)
        lr = cosine_lr(it, cfg.iterations, cfg.lr_init, cfg.lr_final)
        opt.zero_grad()
        total = 0.0
        samples = []
        for _ in range(batch):
            idx = int(rng.integers(len(data)))
            clean_t, noisy_t = data[idx]
            hh, ww, _ = clean_t.shape
            r0 = int(rng.integers(hh - patch + 1))
            c0 = int(rng.integers(ww - patch + 1))
            clean = clean_t.data[r0:r0 + patch, c0:c0 + patch]
            noisy = noisy_t.data[r0:r0 + patch, c0:c0 + patch]
            clean, noisy = augment_pair(clean, noisy, rng, cfg.augment)
            samples.append((clean, noisy))
            x = T.Tensor(noisy)
            ref = T.Tensor(clean)
            with T.record() as g:
                y = net.forward(x)
                loss = T.mean_all(T.absval(T.add(y, T.neg(ref))))
                T.backward(g, loss)
            total += loss.item()
        loss_val = total / batch
        if not math.isfinite(loss_val):
            _dump_bad_batch(samples, it, diagnostics_dir)
            raise NumericError(
                f"non-finite loss at iteration {it}; batch dumped under "
                f"{os.path.join(diagnostics_dir, 'bad_batch')}")
        if batch > 1:
            for p in opt.params:
                if p.grad is not None:
                    p.grad /= batch
        opt.step(lr)
        log.append((it, lr, loss_val, patch, batch))
    if log_path is not None:
        write_loss_log(log, log_path)
    return log


def _dump_bad_batch(samples, it, diagnostics_dir):
    d = os.path.join(diagnostics_dir, "bad_batch")
    os.makedirs(d, exist_ok=True)
    for i, (clean, noisy) in enumerate(samples):
        T.dump(T.Tensor(clean), os.path.join(d, f"iter{it}_clean{i}.eamt"))
        T.dump(T.Tensor(noisy), os.path.join(d, f"iter{it}_noisy{i}.eamt"))


def write_loss_log(log, path):
    with open(path, "w", newline="\n") as fh:
        fh.write("iteration,lr,loss,patch,batch\n")
        for it, lr, loss, patch, batch in log:
            fh.write(f"{it},{lr:.12e},{loss:.12e},{patch},{batch}\n")


def evaluate_psnr(net, pairs):
    """Mean PSNR of net(degraded) against clean over a pair list."""
    vals = []
    for clean, noisy in pairs:
        out = net.forward(noisy)
        vals.append(psnr(np.clip(out.data, 0.0, 1.0), clean.data))
    return float(np.mean(vals))


def train_config_from_dict(d):
    """Build a TrainConfig from string-valued settings."""
    def stages(s):
        out = []
        for part in s.split(","):
            size, _, rest = part.strip().partition("x")
            batch, _, start = rest.partition("@")
            out.append((int(size), int(batch), int(start)))
        return tuple(out)

    def augment(s):
        s = s.strip()
        if s in ("", "none"):
            return ()
        return tuple(p.strip() for p in s.split(","))

    conv = {
        "iterations": int, "seed": int,
        "lr_init": float, "lr_final": float, "beta1": float, "beta2": float,
        "weight_decay": float, "eps": float,
        "stages": stages, "augment": augment,
    }
    updates = {}
    for key, raw in d.items():
        if key not in conv:
            raise ConfigError(f"unknown training setting {key!r}")
        try:
            updates[key] = conv[key](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    from dataclasses import replace
    return replace(TrainConfig(), **updates)

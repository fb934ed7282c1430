"""Synthetic restoration data: band-limited color fields with geometric
shapes, degraded by additive Gaussian noise in 8-bit units."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "gaussian_noise"
    sigma: float = 25.0        # noise std on the 0..255 scale
    count: int = 8
    height: int = 64
    width: int = 64
    seed: int = 0


def _base_image(rng, h, w):
    # Low-pass filtered noise gives a smooth colored field; a few random
    # rectangles and discs add edges so denoising has structure to preserve.
    noise = rng.standard_normal((h, w, 3))
    fr = np.fft.rfft2(noise, axes=(0, 1))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    mask = ((fy ** 2 + fx ** 2) <= (1.0 / 8.0) ** 2).astype(np.float64)
    field = np.fft.irfft2(fr * mask[..., None], s=(h, w), axes=(0, 1))
    lo = field.min(axis=(0, 1), keepdims=True)
    hi = field.max(axis=(0, 1), keepdims=True)
    img = 0.15 + 0.7 * (field - lo) / np.maximum(hi - lo, 1e-9)

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.05, 0.95, size=3)
        if rng.random() < 0.5:
            r0 = int(rng.integers(0, h))
            c0 = int(rng.integers(0, w))
            rh = int(rng.integers(h // 8, max(h // 3, h // 8 + 1)))
            cw = int(rng.integers(w // 8, max(w // 3, w // 8 + 1)))
            img[r0:r0 + rh, c0:c0 + cw] = color
        else:
            cy = rng.uniform(0, h)
            cx = rng.uniform(0, w)
            rad = rng.uniform(min(h, w) / 12, min(h, w) / 5)
            disc = (rows - cy) ** 2 + (cols - cx) ** 2 <= rad ** 2
            img[disc] = color
    return np.clip(img, 0.0, 1.0)


def gaussian_noise(rng, shape, sigma):
    """Additive noise with std sigma/255 (sigma quoted on the 8-bit scale)."""
    return rng.normal(0.0, sigma / 255.0, size=shape)


def synth_dataset(spec):
    """Deterministic (clean, degraded) float32 pairs from ``spec``."""
    if spec.kind != "gaussian_noise":
        raise ConfigError(f"unknown synthetic data kind {spec.kind!r}")
    if spec.count < 1 or spec.height < 1 or spec.width < 1:
        raise ConfigError("synthetic dataset needs positive count and extents")
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    pairs = []
    for _ in range(spec.count):
        clean = _base_image(rng, spec.height, spec.width)
        noisy = np.clip(clean + gaussian_noise(rng, clean.shape, spec.sigma), 0.0, 1.0)
        pairs.append((T.Tensor(clean, dtype=np.float32),
                      T.Tensor(noisy, dtype=np.float32)))
    return pairs


def synth_specs_from_dict(d):
    """(train_spec, val_spec) from string-valued data settings.

    The validation set uses data_seed + 1 so it never overlaps training.
    """
    conv = {"sigma": float, "train_images": int, "val_images": int,
            "image_size": int, "data_seed": int}
    vals = {"sigma": 25.0, "train_images": 8, "val_images": 4,
            "image_size": 64, "data_seed": 100}
    for key, raw in d.items():
        if key not in conv:
            raise ConfigError(f"unknown data setting {key!r}")
        try:
            vals[key] = conv[key](raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from e
    size = vals["image_size"]
    train = SynthSpec(sigma=vals["sigma"], count=vals["train_images"],
                      height=size, width=size, seed=vals["data_seed"])
    val = SynthSpec(sigma=vals["sigma"], count=vals["val_images"],
                    height=size, width=size, seed=vals["data_seed"] + 1)
    return train, val


DATA_KEYS = ("sigma", "train_images", "val_images", "image_size", "data_seed")

AUGMENT_NAMES = ("hflip", "vflip", "rot90")


def augment_pair(clean, noisy, rng, augment):
    """Random flips/rotation applied identically to both pair members."""
    for name in augment:
        if name not in AUGMENT_NAMES:
            raise ConfigError(f"unknown augmentation {name!r}")
    if "hflip" in augment and rng.random() < 0.5:
        clean = clean[:, ::-1]
        noisy = noisy[:, ::-1]
    if "vflip" in augment and rng.random() < 0.5:
        clean = clean[::-1, :]
        noisy = noisy[::-1, :]
    if "rot90" in augment and rng.random() < 0.5:
        clean = np.rot90(clean, axes=(0, 1))
        noisy = np.rot90(noisy, axes=(0, 1))
    return np.ascontiguousarray(clean), np.ascontiguousarray(noisy)

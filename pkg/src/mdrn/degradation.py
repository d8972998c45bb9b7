"""AWGN synthesis, patch sampling with dihedral augmentation, bicubic resampling."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np
import torch

from .data import CorpusManifest
from .metrics import psnr

@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def std(self) -> float:
        """Noise std in the normalized [0, 1] domain."""
        return self.sigma / 255.0


def add_awgn(x: torch.Tensor, spec: NoiseSpec, rng: np.random.Generator | None = None) -> torch.Tensor:
    """x + N(0, (sigma/255)^2), i.i.d. per element, unclipped.

    Without an explicit generator the draw is seeded from spec.seed.
    """
    if spec.sigma == 0:
        return x.clone()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    g = rng.standard_normal(tuple(x.shape)) * spec.std
    return x + torch.from_numpy(g).to(dtype=x.dtype, device=x.device)


# Dihedral group of the square: k = 0..3 rotates by k*90 degrees, k = 4..7
# flips the width axis first.
DIHEDRAL = tuple(range(8))


def dihedral(x, k: int):
    if k >= 4:
        x = torch.flip(x, [-1])
    return torch.rot90(x, k % 4, dims=(-2, -1))


def dihedral_inverse(x, k: int):
    x = torch.rot90(x, -(k % 4), dims=(-2, -1))
    if k >= 4:
        x = torch.flip(x, [-1])
    return x


@dataclass
class PatchBatch:
    clean: torch.Tensor
    noisy: torch.Tensor
    spec: NoiseSpec

    @property
    def noise(self) -> torch.Tensor:
        return self.noisy - self.clean


def sample_patches(
    manifest: CorpusManifest,
    batch: int,
    patch_size: int,
    spec: NoiseSpec,
    augment: bool = True,
    rng: np.random.Generator | None = None,
) -> PatchBatch:
    """Uniform random crops with optional dihedral augmentation and fresh noise per patch."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    pool = manifest.images_at_least(patch_size)
    crops = []
    for _ in range(batch):
        img = pool[rng.integers(len(pool))]
        h, w = img.shape[-2:]
        top = rng.integers(h - patch_size + 1)
        left = rng.integers(w - patch_size + 1)
        crop = torch.from_numpy(img[:, top:top + patch_size, left:left + patch_size])
        if augment:
            crop = dihedral(crop, int(rng.integers(8)))
        crops.append(crop)
    clean = torch.stack(crops).contiguous()
    return PatchBatch(clean, add_awgn(clean, spec, rng), spec)


class PatchSampler:
    """Batch source over a manifest: sampler(epoch, step, rng) -> PatchBatch."""

    def __init__(self, manifest, batch=16, patch_size=64, sigma=25.0, augment=True):
        self.manifest = manifest
        self.batch = batch
        self.patch_size = patch_size
        self.spec = NoiseSpec(sigma)
        self.augment = augment

    def __call__(self, epoch: int, step: int, rng: np.random.Generator) -> PatchBatch:
        return sample_patches(self.manifest, self.batch, self.patch_size, self.spec, self.augment, rng)


class FixedBatches:
    """Batch source that cycles through pre-built PatchBatches (overfit runs)."""

    def __init__(self, batches):
        self.batches = list(batches)

    def __call__(self, epoch, step, rng):
        return self.batches[step % len(self.batches)]


def cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax**2, ax**3
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, scale: float) -> np.ndarray:
    """(n_out, n_in) bicubic interpolation matrix, edge-replicated, rows summing to 1.

    When shrinking, the kernel is stretched by 1/scale (antialiasing).
    """
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    taps = np.arange(-math.ceil(support), math.ceil(support) + 1)
    idx = np.floor(centers)[:, None].astype(int) + taps[None, :]
    wts = cubic((centers[:, None] - idx) * stretch) * stretch
    wts /= wts.sum(axis=1, keepdims=True)
    out = np.zeros((n_out, n_in))
    np.add.at(out, (np.repeat(np.arange(n_out), len(taps)), np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return out


def _as_fraction(scale) -> Fraction:
    try:
        s = Fraction(scale).limit_denominator(1000) if isinstance(scale, float) else Fraction(scale)
    except (TypeError, ValueError, ZeroDivisionError) as e:
        raise ValueError(f"bad scale {scale!r}") from e
    if s <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return s


def bicubic_resize(x: torch.Tensor, scale, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Resize the last two axes by a rational scale (a = -0.5 bicubic).

    The output size defaults to round(dim * scale); pass `size` to force it
    (the kernel is still derived from `scale`).
    """
    s = _as_fraction(scale)
    h, w = x.shape[-2:]
    if size is None:
        size = (int(math.floor(h * s + Fraction(1, 2))), int(math.floor(w * s + Fraction(1, 2))))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resizing {h}x{w} by {s} gives {oh}x{ow}")
    if s == 1 and (oh, ow) == (h, w):
        return x.clone()
    rh = torch.from_numpy(resize_weights(h, oh, float(s)))
    rw = torch.from_numpy(resize_weights(w, ow, float(s)))
    y = rh @ x.to(torch.float64) @ rw.T
    return y.to(x.dtype)


class RoundtripRow(NamedTuple):
    scale: int
    psnr_noisy: float
    psnr_roundtrip: float


def bicubic_roundtrip(x: torch.Tensor, scale: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    small = bicubic_resize(x, Fraction(1, scale))
    return bicubic_resize(small, scale, size=(h, w))


def degradation_roundtrip_report(clean: torch.Tensor, spec: NoiseSpec, scales=(2, 3, 4), rng=None) -> list[RoundtripRow]:
    """PSNR against clean of the noisy image and of its bicubic down/up roundtrip per scale."""
    for s in scales:
        if s not in (2, 3, 4):
            raise ValueError(f"analysis scales must be among 2, 3, 4; got {s}")
    noisy = add_awgn(clean, spec, rng)
    base = psnr(noisy, clean)
    return [RoundtripRow(s, base, psnr(bicubic_roundtrip(noisy, s), clean)) for s in scales]

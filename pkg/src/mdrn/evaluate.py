"""Whole-image inference, self-ensemble and dataset-level PSNR/SSIM reports."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.nn import functional as F

from .data import CorpusManifest, write_image
from .degradation import DIHEDRAL, NoiseSpec, add_awgn, dihedral, dihedral_inverse
from .errors import ConfigError, DataError
from .metrics import psnr, ssim
from .model import MDRN

log = logging.getLogger(__name__)


def _pad_mode(pad_h: int, pad_w: int, h: int, w: int) -> str:
    # reflect padding needs pad < size
    return "reflect" if pad_h < h and pad_w < w else "replicate"


@torch.no_grad()
def denoise_image(noisy: torch.Tensor, model: MDRN) -> torch.Tensor:
    """Pad to a multiple of 2**levels, run the network, crop back and clip to [0, 1].

    Accepts (C, H, W) or (B, C, H, W); returns the same rank.
    """
    squeeze = noisy.dim() == 3
    x = noisy[None] if squeeze else noisy
    if x.shape[1] != model.config.image_channels:
        raise ConfigError(
            f"model expects {model.config.image_channels} channels, image has {x.shape[1]}"
        )
    h, w = x.shape[-2:]
    if min(h, w) < 8:
        raise ValueError(f"image must be at least 8x8, got {h}x{w}")
    m = 2 ** model.config.levels
    pad_h, pad_w = -h % m, -w % m
    model.eval()
    x = x.to(next(model.parameters()).dtype)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=_pad_mode(pad_h, pad_w, h, w))
        out = model(x)[..., :h, :w]
    else:
        out = model(x)
    out = out.clamp(0.0, 1.0)
    return out[0] if squeeze else out


def self_ensemble(x: torch.Tensor, fn: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Mean over the 8 dihedral transforms of fn applied in the transformed frame."""
    outs = [dihedral_inverse(fn(dihedral(x, k)), k) for k in DIHEDRAL]
    return torch.stack(outs).mean(0)


def self_ensemble_denoise(noisy: torch.Tensor, model: MDRN) -> torch.Tensor:
    return self_ensemble(noisy, lambda t: denoise_image(t, model))


def image_seed(seed: int, image_id: str, sigma: float) -> list[int]:
    digest = hashlib.sha256(image_id.encode()).digest()
    return [seed, int.from_bytes(digest[:8], "little"), int(round(sigma * 1000))]


def _num(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


@dataclass
class MetricRow:
    id: str
    sigma: float
    psnr: float
    ssim: float
    noisy_psnr: float


@dataclass
class MetricReport:
    sigma: float
    rows: list[MetricRow]
    provenance: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def _mean(self, attr) -> float:
        if not self.rows:
            return math.nan
        return math.fsum(getattr(r, attr) for r in self.rows) / len(self.rows)

    @property
    def mean_psnr(self) -> float:
        return self._mean("psnr")

    @property
    def mean_ssim(self) -> float:
        return self._mean("ssim")

    @property
    def mean_noisy_psnr(self) -> float:
        return self._mean("noisy_psnr")

    def to_jsonl(self) -> str:
        lines = []
        for r in self.rows:
            lines.append({"type": "image", "id": r.id, "sigma": r.sigma, "psnr": _num(r.psnr),
                          "ssim": r.ssim, "noisy_psnr": _num(r.noisy_psnr)})
        for f in self.failures:
            lines.append({"type": "failure", "sigma": self.sigma, **f})
        lines.append({"type": "aggregate", "sigma": self.sigma, "n": len(self.rows),
                      "psnr": _num(self.mean_psnr), "ssim": self.mean_ssim,
                      "noisy_psnr": _num(self.mean_noisy_psnr), "provenance": self.provenance})
        return "".join(json.dumps(d, sort_keys=True) + "\n" for d in lines)

    def format_table(self) -> str:
        width = max([len("image")] + [len(r.id) for r in self.rows])
        out = [f"sigma={self.sigma:g}", f"{'image':<{width}}  {'noisy':>7}  {'PSNR':>7}  {'SSIM':>6}"]
        for r in self.rows:
            out.append(f"{r.id:<{width}}  {r.noisy_psnr:7.2f}  {r.psnr:7.2f}  {r.ssim:6.4f}")
        out.append(f"{'mean':<{width}}  {self.mean_noisy_psnr:7.2f}  {self.mean_psnr:7.2f}  {self.mean_ssim:6.4f}")
        for f in self.failures:
            out.append(f"{f['id']}: FAILED ({f['error']})")
        return "\n".join(out)


def format_sigma_table(reports: list[MetricReport], name: str = "model", dataset: str = "") -> str:
    """One row, one PSNR/SSIM column per noise level."""
    cols = [f"sigma={r.sigma:g}" for r in reports]
    head = f"{'Method':<16}| " + " | ".join(f"{c:^14}" for c in cols)
    row = f"{name:<16}| " + " | ".join(f"{r.mean_psnr:6.2f}/{r.mean_ssim:.4f}" for r in reports)
    lines = [dataset, head, "-" * len(head), row] if dataset else [head, "-" * len(head), row]
    return "\n".join(lines)


def evaluate_dataset(
    manifest: CorpusManifest,
    sigma: float,
    model: MDRN,
    ensemble: bool = False,
    seed: int = 0,
    out_dir=None,
    provenance: dict | None = None,
) -> MetricReport:
    """Corrupt every image with seeded AWGN, denoise and score it against the clean image."""
    if manifest.channels != model.config.image_channels:
        raise ConfigError(
            f"model expects {model.config.image_channels} channels, corpus is {manifest.color}"
        )
    prov = {"msab_per_msag": model.config.msab_per_msag, "channels": model.config.channels,
            "ensemble": ensemble, "seed": seed}
    prov.update(provenance or {})
    rows, failures = [], []
    for image_id in manifest.ids:
        try:
            clean = torch.from_numpy(manifest.read(image_id))
        except DataError as e:
            log.warning("%s", e)
            failures.append({"id": image_id, "error": str(e)})
            continue
        spec = NoiseSpec(sigma)
        noisy = add_awgn(clean, spec, np.random.default_rng(image_seed(seed, image_id, sigma)))
        out = self_ensemble_denoise(noisy, model) if ensemble else denoise_image(noisy, model)
        rows.append(MetricRow(image_id, float(sigma), psnr(out, clean), ssim(out, clean),
                              psnr(noisy.clamp(0, 1), clean)))
        if out_dir is not None:
            write_image(Path(out_dir) / f"sigma{sigma:g}" / (Path(image_id).stem + ".png"), out.numpy())
    return MetricReport(float(sigma), rows, prov, failures)

"""Training loop for plain and distilled MDRN, with checkpoints and exact resumption."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .degradation import PatchBatch, PatchSampler
from .errors import ConfigError, DataError, NonFiniteLossError
from .losses import DistillConfig, make_distill_inputs, total_loss
from .metrics import psnr
from .model import MDRN, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mdrn-checkpoint"
CHECKPOINT_VERSION = 1

BatchSource = Callable[[int, int, np.random.Generator], PatchBatch]


@dataclass
class TrainConfig:
    epochs: int = 500
    steps_per_epoch: int = 1000
    batch: int = 16
    patch_size: int = 64
    lr0: float = 1e-4
    halving_period: int = 100
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    sigma: float = 25.0
    augment: bool = True
    log_every: int = 50
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if isinstance(self.distill, dict):
            self.distill = DistillConfig(**self.distill)
        self.betas = tuple(float(b) for b in self.betas)
        self.distill.student_sigma = self.sigma
        for name in ("epochs", "steps_per_epoch", "batch", "patch_size", "halving_period", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["distill"] = self.distill.to_dict()
        return d


def lr_at(epoch: int, config: TrainConfig) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * 2.0 ** -(epoch // config.halving_period)


def weights_digest(state_dict) -> str:
    """sha256 over names, dtypes, shapes and raw bytes of every tensor, in key order."""
    h = hashlib.sha256()
    for name, t in state_dict.items():
        t = t.detach().cpu().contiguous()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def serialize_weights(state_dict) -> bytes:
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    return buf.getvalue()


@dataclass
class CheckpointRecord:
    model_state: dict
    model_config: ModelConfig
    optimizer_state: dict | None = None
    epoch: int = 0  # completed epochs
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    train_config: dict | None = None
    format_version: int = CHECKPOINT_VERSION

    @property
    def digest(self) -> str:
        return weights_digest(self.model_state)

    def build_model(self) -> MDRN:
        model = MDRN(self.model_config, init=False)
        model.load_state_dict(self.model_state)
        return model

    def save(self, path):
        """Atomic write: temp file in the target directory, then rename."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": self.format_version,
            "model_config": self.model_config.to_dict(),
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "history": self.history,
            "train_config": self.train_config,
        }
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                torch.save(payload, f)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "CheckpointRecord":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"checkpoint not found: {path}")
        try:
            d = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            raise DataError(f"cannot read checkpoint {path}: {e}") from e
        if not isinstance(d, dict) or d.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path} is not an MDRN checkpoint")
        if d["version"] > CHECKPOINT_VERSION:
            raise DataError(f"{path}: checkpoint version {d['version']} is newer than supported")
        return cls(
            model_state=d["model_state"],
            model_config=ModelConfig.from_dict(d["model_config"]),
            optimizer_state=d.get("optimizer_state"),
            epoch=d.get("epoch", 0),
            rng_state=d.get("rng_state", {}),
            history=d.get("history", []),
            train_config=d.get("train_config"),
            format_version=d["version"],
        )


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # worker w of a parallel loader would use [seed, epoch, w]
    return np.random.default_rng([seed, epoch])


class Trainer:
    """One optimizer loop over a batch source.

    `source(epoch, step, rng)` returns a PatchBatch; the generator for epoch
    e is derived from (seed, e), so resuming at an epoch boundary replays the
    exact data stream of an uninterrupted run.
    """

    def __init__(
        self,
        model: MDRN,
        config: TrainConfig,
        source: BatchSource,
        teacher: MDRN | None = None,
        run_dir=None,
        val_batches: list[PatchBatch] | None = None,
    ):
        self.model = model
        self.config = config
        self.source = source
        self.distill = config.distill
        if self.distill.active:
            if teacher is None:
                raise ConfigError(f"mode {self.distill.mode.value} needs a teacher model")
            self.distill.validate(model.config, teacher.config)
            teacher = freeze(teacher)
        self.teacher = teacher
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.val_batches = val_batches or []
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=config.lr0, betas=config.betas, eps=config.eps
        )
        self.epoch = 0
        self.history: list[dict] = []
        self.losses: list[tuple[float, float]] = []  # (l_rl, l_kdl) per step
        self.best_psnr = -math.inf

    def step(self, batch: PatchBatch, rng: np.random.Generator) -> dict:
        if self.distill.active:
            student_in, teacher_in = make_distill_inputs(batch.clean, self.distill, rng)
        else:
            student_in, teacher_in = batch.noisy, None
        self.model.train()
        trace = self.model.trace(student_in)
        teacher_taps = None
        if self.teacher is not None:
            with torch.no_grad():
                teacher_taps = self.teacher.trace(teacher_in).taps
        loss, parts = total_loss(trace.output, batch.clean, trace.taps, teacher_taps, self.distill)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at epoch {self.epoch} step {len(self.losses)}: "
                f"L_RL={parts['l_rl'].item()} L_KDL={parts['l_kdl'].item()}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        return {k: v.item() for k, v in parts.items()}

    def run_epoch(self) -> dict:
        cfg = self.config
        epoch = self.epoch
        lr = lr_at(epoch, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        rng = epoch_rng(cfg.seed, epoch)
        t0 = time.time()
        sums = [0.0, 0.0]
        for step in range(cfg.steps_per_epoch):
            parts = self.step(self.source(epoch, step, rng), rng)
            self.losses.append((parts["l_rl"], parts["l_kdl"]))
            sums[0] += parts["l_rl"]
            sums[1] += parts["l_kdl"]
            if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.steps_per_epoch:
                self._log({"epoch": epoch, "step": step, "l_rl": parts["l_rl"], "l_kdl": parts["l_kdl"],
                           "lr": lr, "wall_time": round(time.time() - t0, 3)})
        summary = {"epoch": epoch, "l_rl": sums[0] / cfg.steps_per_epoch,
                   "l_kdl": sums[1] / cfg.steps_per_epoch, "lr": lr}
        if self.val_batches:
            summary["val_psnr"] = self.validate()
        self.history.append(summary)
        self.epoch += 1
        return summary

    @torch.no_grad()
    def validate(self) -> float:
        self.model.eval()
        vals = [psnr(self.model(b.noisy).clamp(0, 1), b.clean) for b in self.val_batches]
        return float(np.mean(vals))

    def _log(self, record: dict):
        log.debug("%s", record)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            with open(self.run_dir / "train_log.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")

    def checkpoint(self) -> CheckpointRecord:
        return CheckpointRecord(
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            model_config=self.model.config,
            optimizer_state=self.optimizer.state_dict(),
            epoch=self.epoch,
            rng_state={"seed": self.config.seed, "next_epoch": self.epoch, "torch": torch.get_rng_state()},
            history=list(self.history),
            train_config=self.config.to_dict(),
        )

    def load_checkpoint(self, record: CheckpointRecord):
        self.model.load_state_dict(record.model_state)
        if record.optimizer_state is not None:
            self.optimizer.load_state_dict(record.optimizer_state)
        self.epoch = record.epoch
        self.history = list(record.history)
        vals = [h["val_psnr"] for h in self.history if "val_psnr" in h]
        self.best_psnr = max(vals) if vals else -math.inf

    def fit(self, epochs: int | None = None) -> Iterator[CheckpointRecord]:
        """Run until `epochs` (default config.epochs) are complete, yielding a record per epoch."""
        end = self.config.epochs if epochs is None else min(epochs, self.config.epochs)
        while self.epoch < end:
            summary = self.run_epoch()
            record = self.checkpoint()
            if self.run_dir is not None:
                record.save(self.run_dir / "last.pt")
                if summary.get("val_psnr", -math.inf) > self.best_psnr:
                    self.best_psnr = summary["val_psnr"]
                    record.save(self.run_dir / "best.pt")
            self._log({"epoch_summary": summary})
            yield record


def build_model(model_config: ModelConfig, seed: int) -> MDRN:
    return MDRN(model_config, seed=seed)


def load_teacher(distill: DistillConfig) -> MDRN:
    if not distill.teacher_checkpoint:
        raise ConfigError(f"mode {distill.mode.value} needs distill.teacher_checkpoint")
    return freeze(CheckpointRecord.load(distill.teacher_checkpoint).build_model())


def train(
    config: TrainConfig,
    manifest=None,
    model_config: ModelConfig | None = None,
    *,
    source: BatchSource | None = None,
    model: MDRN | None = None,
    teacher: MDRN | None = None,
    run_dir=None,
    resume: CheckpointRecord | None = None,
    val_batches=None,
) -> Iterator[CheckpointRecord]:
    """Yield one CheckpointRecord per completed epoch.

    Either a manifest (sampled with PatchSampler) or an explicit batch source
    must be given. With distillation enabled and no teacher passed, the
    teacher is loaded from config.distill.teacher_checkpoint.
    """
    if source is None:
        if manifest is None:
            raise ConfigError("train needs a manifest or a batch source")
        source = PatchSampler(manifest, config.batch, config.patch_size, config.sigma, config.augment)
    if model is None:
        if resume is not None:
            model = MDRN(resume.model_config, init=False)
        else:
            model = build_model(model_config or ModelConfig(), config.seed)
    if config.distill.active and teacher is None:
        teacher = load_teacher(config.distill)
    trainer = Trainer(model, config, source, teacher=teacher, run_dir=run_dir, val_batches=val_batches)
    if resume is not None:
        trainer.load_checkpoint(resume)
    yield from trainer.fit()


def distill_train(config: TrainConfig, manifest=None, model_config=None, **kwargs) -> Iterator[CheckpointRecord]:
    if not config.distill.active:
        raise ConfigError("distill_train needs distill.mode hads or hmds")
    yield from train(config, manifest, model_config, **kwargs)

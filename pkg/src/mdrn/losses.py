"""Reconstruction loss, feature-matching distillation loss and teacher/student pairing."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
import torch

from .degradation import NoiseSpec, add_awgn
from .errors import ConfigError
from .model import ModelConfig


class DistillMode(str, Enum):
    NONE = "none"
    HADS = "hads"  # larger teacher, same noise level
    HMDS = "hmds"  # same architecture, teacher trained on lighter noise


@dataclass
class DistillConfig:
    mode: DistillMode = DistillMode.NONE
    teacher_checkpoint: str | None = None
    student_sigma: float = 25.0
    teacher_sigma: float | None = None
    tap_indices: list[int] | None = field(default=None)
    kd_weight: float = 1.0

    def __post_init__(self):
        if not isinstance(self.mode, DistillMode):
            try:
                self.mode = DistillMode(str(self.mode).lower())
            except ValueError:
                raise ConfigError(f"unknown distillation mode {self.mode!r}") from None
        if self.kd_weight < 0:
            raise ConfigError(f"kd_weight must be >= 0, got {self.kd_weight}")

    @property
    def teacher_level(self) -> float:
        """Teacher noise level; unset means the student's."""
        return self.student_sigma if self.teacher_sigma is None else self.teacher_sigma

    @property
    def active(self) -> bool:
        return self.mode is not DistillMode.NONE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    def validate(self, student: ModelConfig | None = None, teacher: ModelConfig | None = None):
        """Check the HADS/HMDS pairing rules; raises ConfigError."""
        if not self.active:
            return
        t_sigma = self.teacher_level
        if self.mode is DistillMode.HADS and t_sigma != self.student_sigma:
            raise ConfigError(
                f"HADS needs equal noise levels, got teacher {t_sigma} vs student {self.student_sigma}"
            )
        if self.mode is DistillMode.HMDS and not t_sigma < self.student_sigma:
            raise ConfigError(
                f"HMDS needs teacher_sigma < student_sigma, got {t_sigma} >= {self.student_sigma}"
            )
        if student is None or teacher is None:
            return
        if self.mode is DistillMode.HADS:
            s, t = student.to_dict(), teacher.to_dict()
            s.pop("msab_per_msag"), t.pop("msab_per_msag")
            if s != t:
                raise ConfigError(f"HADS teacher and student must share the backbone: {t} vs {s}")
            if teacher.msab_per_msag <= student.msab_per_msag:
                raise ConfigError(
                    f"HADS teacher needs more MSABs per group than the student "
                    f"({teacher.msab_per_msag} <= {student.msab_per_msag})"
                )
        elif student.to_dict() != teacher.to_dict():
            raise ConfigError("HMDS teacher and student must have identical architectures")
        taps = self.tap_indices
        if taps is not None and list(taps) != list(student.tap_indices):
            raise ConfigError(f"distill tap_indices {taps} differ from the model's {student.tap_indices}")


def reconstruction_loss(output: torch.Tensor, clean: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    if output.shape != clean.shape:
        raise ValueError(f"shape mismatch: {tuple(output.shape)} vs {tuple(clean.shape)}")
    return (output - clean).abs().mean()


def kd_loss(student_taps, teacher_taps) -> torch.Tensor:
    """Sum over taps of the per-tap mean absolute difference; teacher side detached."""
    if len(student_taps) != len(teacher_taps):
        raise ValueError(f"{len(student_taps)} student taps vs {len(teacher_taps)} teacher taps")
    if not student_taps:
        raise ValueError("no taps to match")
    total = 0
    for s, t in zip(student_taps, teacher_taps):
        if s.shape != t.shape:
            raise ValueError(f"tap shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
        total = total + (s - t.detach()).abs().mean()
    return total


def total_loss(output, clean, student_taps=None, teacher_taps=None, config: DistillConfig | None = None):
    """L_RL + kd_weight * L_KDL. Returns (total, {"l_rl": ..., "l_kdl": ...})."""
    config = config or DistillConfig()
    l_rl = reconstruction_loss(output, clean)
    if not config.active:
        return l_rl, {"l_rl": l_rl.detach(), "l_kdl": torch.zeros((), dtype=l_rl.dtype)}
    if teacher_taps is None or student_taps is None:
        raise ConfigError(f"mode {config.mode.value} needs both student and teacher taps")
    l_kdl = kd_loss(student_taps, teacher_taps)
    return l_rl + config.kd_weight * l_kdl, {"l_rl": l_rl.detach(), "l_kdl": l_kdl.detach()}


def make_distill_inputs(clean: torch.Tensor, config: DistillConfig, rng: np.random.Generator):
    """(student_input, teacher_input) for one clean batch.

    HADS shares a single noise draw; HMDS corrupts the batch twice with
    independent draws at the two noise levels.
    """
    if not config.active:
        raise ConfigError("make_distill_inputs needs mode HADS or HMDS")
    config.validate()
    student = add_awgn(clean, NoiseSpec(config.student_sigma), rng)
    if config.mode is DistillMode.HADS:
        return student, student
    return student, add_awgn(clean, NoiseSpec(config.teacher_level), rng)

from pathlib import Path

import pytest
import torch

from mdrn.model import MDRN, ModelConfig

DATA = Path(__file__).parent / "data"

torch.set_num_threads(1)


@pytest.fixture
def data_dir():
    return DATA


def micro_config(**kw):
    base = dict(channels=8, msab_per_msag=1, levels=2)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def micro_model():
    return MDRN(micro_config(), seed=0)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def randomize_(module, seed=0, scale=0.1):
    """Jitter every parameter, biases included, so no ReLU sits exactly at its kink."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def gradcheck_problem(mode="none", size=16):
    """float64 micro student plus a loss closure over total_loss.

    The clean target and the teacher taps are pushed away from the student's
    values so central differences never straddle an L1 kink.
    """
    from mdrn.losses import DistillConfig, total_loss

    student = randomize_(MDRN(micro_config(), seed=0).double(), seed=1)
    g = torch.Generator().manual_seed(0)
    y = torch.rand(1, 1, size, size, generator=g, dtype=torch.float64)
    cfg = DistillConfig(mode=mode)
    t_taps = None
    with torch.no_grad():
        clean = student(y) + 1.0
        if cfg.active:
            teacher = randomize_(MDRN(micro_config(msab_per_msag=2), seed=2).double(), seed=3)
            for i in teacher.config.tap_indices:
                teacher.node(0, i).blocks[-1].fuse.bias.add_(3.0)
            t_taps = teacher.trace(y).taps

    def loss_fn():
        tr = student.trace(y)
        return total_loss(tr.output, clean, tr.taps, t_taps, cfg)[0]

    return student, loss_fn


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """record(number, title, ok, detail): log one acceptance verdict and assert it."""
    rows = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number, title, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        rows.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE, [])
    if rows:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(rows, key=lambda r: r[0]):
            terminalreporter.write_line(line)

import pytest
import torch

from stagedistill import cascade as C
from stagedistill import data as D
from stagedistill import models as M
from stagedistill.losses import LossWeights
from stagedistill.training import TrainingSchedule

TINY_TEACHER = M.NetworkSpec(family="residual_cnn", depth=8, width_multiplier=0.5)
TINY_STUDENT = M.NetworkSpec(family="plain_cnn", depth=8, width_multiplier=0.25)


@pytest.fixture(scope="session")
def tiny_data():
    return D.make_synthetic(96, 48, seed=3)


@pytest.fixture(scope="session")
def tiny_teacher():
    return M.build(TINY_TEACHER, 11)


def tiny_config(**kw):
    base = dict(
        weights=LossWeights(k_channels=4, alpha=2.0, beta=3.0),
        schedule=TrainingSchedule(epochs=1, batch_size=32, decay_epochs=()),
        n_cascade=0,
    )
    base.update(kw)
    return C.DistillConfig(**base)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str):
    prev = ACCEPTANCE.get(criterion)
    if prev is not None:
        ok = ok and prev[0]
        detail = f"{prev[1]}; {detail}"
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest

from neurocaps.data.splits import split_stratified_by_patient
from neurocaps.data.synthetic import gen_synthetic
from neurocaps.ir import zoo
from neurocaps.ir.train import LRSchedule, TrainConfig, train


@pytest.fixture(scope="session")
def small_split():
    """16x16 synthetic images; big enough to train on, small enough to be quick."""
    ds = gen_synthetic(480, patients=48, seed=21, size=16)
    return split_stratified_by_patient(ds, 0.3, seed=21)


@pytest.fixture(scope="session")
def small_cnn(small_split):
    train_set, _ = small_split
    model = zoo.toy_cnn((1, 16, 16), 3, seed=0, filters=(4, 8), hidden=16)
    cfg = TrainConfig(epochs=6, batch_size=16, schedule=LRSchedule.exponential(3e-3, 0.9), seed=0)
    trained, _ = train(model, train_set, cfg)
    return trained


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line, then asserts it."""

    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

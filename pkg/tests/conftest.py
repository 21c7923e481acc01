import numpy as np
import pytest
import torch

from steerdistill.backbone import Backbone, BackboneConfig
from steerdistill.synthtask import Task, TaskConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def task():
    return Task(TaskConfig(distill_size=32, pool_size=48, val_size=8, test_size=16, seed=7))


@pytest.fixture(scope="session")
def splits(task):
    return task.make_splits()


@pytest.fixture(scope="session")
def tiny_backbone(task):
    cfg = BackboneConfig(len(task.vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32, max_context=512, seed=3)
    return Backbone(cfg, dtype="float64").freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

import numpy as np
import pytest

from jointtask.dataset import SyntheticSpec, gen_synthetic
from jointtask.metrics import evaluate
from jointtask.trainer import TrainConfig, apply_update, backprop_batch, build_model, joint_cost

OVERFIT_CONFIG = dict(eps1=1e-3, eps2=1e-4, momentum=0.9, init_std="he", dtype="float64",
                      batch_size=1, seed=0)


def overfit_single(sample, max_steps=5000, check_every=50):
    """Train both nets on one sample until loc_term < 1e-3 and Jaccard >= 0.9."""
    cfg = TrainConfig(**OVERFIT_CONFIG)
    model = build_model(cfg)
    velocity, adj = {}, np.zeros((1, 4))
    steps = 0
    while steps < max_steps:
        backprop_batch([sample], adj, model)
        apply_update(model, cfg, velocity)
        steps += 1
        if steps % check_every == 0:
            cost = joint_cost([sample], adj, model)
            if cost.loc_term < 1e-3 and evaluate([sample], model).jaccard >= 0.9:
                break
    return model, steps


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion (printed at the end)."""
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        return passed
    return record


@pytest.fixture(scope="session")
def disk_sample():
    return gen_synthetic(1, 7, spec=SyntheticSpec(shapes=("disk",)))[0]


@pytest.fixture(scope="session")
def overfit(disk_sample):
    model, steps = overfit_single(disk_sample)
    return disk_sample, model, steps


@pytest.fixture(scope="session")
def tiny_samples():
    return gen_synthetic(6, 123)

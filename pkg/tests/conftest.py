"""Shared datasets, cached training runs and the acceptance summary."""

import numpy as np
import pytest

from e2a.gnn import ModelConfig, TrainConfig, init_model, train_erm
from e2a.pipeline import E2AConfig, run_e2a
from e2a.syngraph import make_motif_dataset

SEEDS = (0, 1, 2)

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    _ACCEPTANCE[criterion] = (bool(passed), detail)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def size_ds():
    return make_motif_dataset(shift="size", seed=7)


@pytest.fixture(scope="session")
def basis_ds():
    return make_motif_dataset(shift="basis", seed=7)


class _Runs:
    """Lazily computed training runs keyed by their arguments."""

    def __init__(self, fn):
        self.fn = fn
        self.cache = {}

    def __call__(self, *key):
        if key not in self.cache:
            self.cache[key] = self.fn(*key)
        return self.cache[key]


@pytest.fixture(scope="session")
def erm_run(size_ds, basis_ds):
    """``erm_run(shift, seed)``: 100-epoch ERM with every epoch's checkpoint kept."""

    def run(shift, seed):
        ds = size_ds if shift == "size" else basis_ds
        theta, phi = init_model(ds.d_in, ds.n_classes, ModelConfig(), seed)
        return train_erm(theta, phi, ds, TrainConfig(seed=seed), ModelConfig(), keep_checkpoints=None)

    return _Runs(run)


@pytest.fixture(scope="session")
def e2a_run(size_ds):
    """``e2a_run(variant, seed)`` on the size-shift dataset with default settings."""
    return _Runs(lambda variant, seed: run_e2a(E2AConfig(variant=variant, seed=seed), size_ds, keep_checkpoints=[100]))


def final_acc(trace, split):
    return trace[-1][f"{split}_acc"]


def mean_over_seeds(values):
    return float(np.mean(list(values)))

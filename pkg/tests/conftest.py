import json

import numpy as np
import pytest

from eimlab.denoisers import gaussian_factor_model
from eimlab.diffusion import build_schedule
from eimlab.text import SemanticVocabulary


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def vocab():
    return SemanticVocabulary()


@pytest.fixture(scope="session")
def disentangled(vocab, sched):
    return gaussian_factor_model(vocab, sched, "disentangled")


@pytest.fixture(scope="session")
def entangled(vocab, sched):
    return gaussian_factor_model(vocab, sched, "entangled")


@pytest.fixture(scope="session")
def trained_toys(tmp_path_factory, vocab, sched):
    """Joint and cross toy denoisers trained once per session on the same data."""
    import time

    from eimlab.experiments import train_toy

    start = time.perf_counter()
    cfg = {"dataset_size": 600, "epochs": 150, "batch_size": 32, "lr": 0.05, "momentum": 0.9,
           "prompt_dropout": 0.1, "layers": 4, "heads": 2}
    out = {}
    for mode in ("joint", "cross"):
        den, losses, _, _ = train_toy(cfg, mode, seed=0)
        out[mode] = (den, losses)
    out["seconds"] = time.perf_counter() - start
    return out


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains toy models or runs long Monte-Carlo")


def dump(path, doc):
    path.write_text(json.dumps(doc))
    return path


def rng(seed=0):
    return np.random.default_rng(seed)

import warnings

import pytest
import torch

from drgan.config import smoke_config
from drgan.data import generate_corpus
from helpers import ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")


@pytest.fixture
def f64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Two samples per grade at R=64."""
    return generate_corpus(5, [2] * 5, 64)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(6, [8] * 5, 64)


@pytest.fixture
def tiny_config():
    """Smallest trainable configuration: single-epoch stages, batch 2."""
    return smoke_config(
        seed=0,
        **{
            "generator.base_channels": 4,
            "generator.n_residual_blocks": 1,
            "generator.style_dim": 16,
            "generator.mapping_hidden": 16,
            "disc.base_channels": 4,
            "batch_gan": 2,
            "epochs_stage1": 1,
            "epochs_stage2": 1,
            "epochs_pretrain": 1,
            "batch_pretrain": 8,
            "grader_base_channels": 4,
        },
    )


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield

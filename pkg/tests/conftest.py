import numpy as np
import pytest
import torch

from ivt.dataset import generate_corpus
from ivt.encoder import EncoderConfig, IVTEncoder

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(n_identities=12, images_per_id=3, captions_per_image=2, seed=3)


@pytest.fixture
def tiny_config():
    return EncoderConfig(depth=1, width=16, heads=2, patch_size=8, image_height=16, image_width=16, vocab_size=20, max_text_len=8)


@pytest.fixture
def tiny_model(tiny_config):
    return IVTEncoder(tiny_config, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np
import pytest
import torch

from fgmae.datamodel import make_config


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_cfg():
    return make_config("toy")


@pytest.fixture
def tiny_cfg():
    """N=16, d=16, L=2 configuration used for gradient checks."""
    return make_config("toy", image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2,
                       decoder_embed_dim=8, decoder_num_heads=2, head_channels=4, num_joints=3,
                       cube_side_mm=800.0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

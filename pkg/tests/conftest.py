import warnings
from pathlib import Path

import numpy as np
import pytest

from epo.corpus import TINY_GRAMMAR, TOY_GRAMMAR
from epo.model import ToyTransformer, ToyTransformerSpec

DATA = Path(__file__).resolve().parents[1] / "src" / "epo" / "data"
FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def toy_vocab():
    return TOY_GRAMMAR.vocabulary()


@pytest.fixture(scope="session")
def tiny_vocab():
    return TINY_GRAMMAR.vocabulary()


@pytest.fixture(scope="session")
def small_model(toy_vocab):
    """Untrained 2-layer model over the 64-token vocabulary; cheap enough for per-test use."""
    return ToyTransformer(ToyTransformerSpec(64, d=16, h=32, layers=2, heads=2, n_max=12, seed=11), toy_vocab)


@pytest.fixture(scope="session")
def tiny_random_model(tiny_vocab):
    return ToyTransformer(ToyTransformerSpec(12, d=16, h=32, layers=2, heads=2, n_max=8, seed=0), tiny_vocab)


@pytest.fixture(scope="session")
def toy64():
    return ToyTransformer.load(DATA / "toy64.epow")


@pytest.fixture(scope="session")
def tiny12():
    return ToyTransformer.load(DATA / "tiny12.epow")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_clamp_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="k=.* exceeds")
        yield


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

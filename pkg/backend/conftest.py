import pytest

from backend.data import gen_markov
from backend.testing import TINY, make_checkpoint


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_ckpt():
    return make_checkpoint(TINY, seed=1, name="tiny")


@pytest.fixture
def corpus():
    return gen_markov(seed=3, n_docs=24, doc_len=40)

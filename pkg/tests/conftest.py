import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from patchrepair.deeppoly import BoxRegion
from patchrepair.examples import toy_network
from patchrepair.netcore import Dnn

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_net(rng: np.random.Generator, n_in: int, hidden, n_out: int, scale: float = 1.0) -> Dnn:
    sizes = [n_in, *hidden, n_out]
    Ws = [rng.normal(0, scale / np.sqrt(a), (b, a)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(0, 0.3, b) for b in sizes[1:]]
    return Dnn.from_arrays(Ws, bs)


def random_box(rng: np.random.Generator, dim: int, max_radius: float = 1.0) -> BoxRegion:
    c = rng.uniform(-1, 1, dim)
    r = rng.uniform(0.05, max_radius, dim)
    return BoxRegion(c - r, c + r)


@st.composite
def nets_and_boxes(draw, max_in=5, max_hidden_layers=3, max_width=32, max_out=4):
    seed = draw(st.integers(0, 2**32 - 1))
    n_in = draw(st.integers(2, max_in))
    hidden = draw(st.lists(st.integers(1, max_width), min_size=0, max_size=max_hidden_layers))
    n_out = draw(st.integers(2, max_out))
    rng = np.random.default_rng(seed)
    return random_net(rng, n_in, hidden, n_out), random_box(rng, n_in)


@pytest.fixture
def toy():
    return toy_network()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

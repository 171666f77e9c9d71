import numpy as np
import pytest
from hypothesis import settings

from umcf.evaluation import PhantomSpec, generate_phantom
from umcf.tokens import build_semantic_tokens

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom():
    return generate_phantom(PhantomSpec())


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(dims=(12, 12, 12), wt_axes=(5.0, 5.0, 4.0), tc_axes=(3.5, 3.5, 3.0),
                       et_axes=(2.0, 2.0, 2.0), feature_dim=8, blur=0.8)
    return generate_phantom(spec)


@pytest.fixture(scope="session")
def small_semantic(small_phantom):
    return build_semantic_tokens(small_phantom.phrases)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

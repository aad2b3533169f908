import numpy as np
import pytest
from hypothesis import settings

# fixed example database-free runs so the suite is reproducible
settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)

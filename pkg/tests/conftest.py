import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cmseg import tensor as T
from cmseg.phantom import PhantomSpec, generate_dataset

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("fast", max_examples=5, deadline=None)
settings.load_profile("default")


@pytest.fixture
def f64():
    with T.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_COUNTS = {"train": (3, 2), "val": (1, 1), "test": (1, 1)}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16^3 phantoms, 3 A + 2 B train, one of each for val/test."""
    out = tmp_path_factory.mktemp("tiny_ds")
    return generate_dataset(out, 3, PhantomSpec(dims=(16, 16, 16)), TINY_COUNTS)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)

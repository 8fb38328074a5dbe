import pytest
from threadpoolctl import threadpool_limits


@pytest.fixture(scope="session", autouse=True)
def single_thread_blas():
    """The suite runs many tiny matmuls; BLAS-internal threads only add overhead."""
    with threadpool_limits(limits=1):
        yield

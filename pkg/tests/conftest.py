import pytest

from onestream import tensor as T


@pytest.fixture(autouse=True)
def f64_mode():
    """Tests run in 64-bit unless they opt into run mode themselves."""
    T.set_default_dtype("f64")
    yield
    T.set_default_dtype("f64")

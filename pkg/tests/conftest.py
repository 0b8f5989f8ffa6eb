import numpy as np
import pytest

from calibseg import _fallback

try:
    from calibseg import _kernels
except ImportError:  # extension not built
    _kernels = None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["python", "cython"])
def kernels(request):
    if request.param == "cython":
        if _kernels is None:
            pytest.skip("compiled kernels not built")
        return _kernels
    return _fallback

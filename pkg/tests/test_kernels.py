import numpy as np
import pytest

from chebspectral import kernels
from chebspectral.graph import CsrMatrix, spmm_serial


def random_csr(n, density, seed):
    rng = np.random.default_rng(seed)
    d = rng.random((n, n))
    d[d > density] = 0.0
    return CsrMatrix.from_dense(d), d


@pytest.mark.parametrize("backend", sorted(kernels.available_backends()))
def test_matches_dense_oracle(backend):
    a, d = random_csr(40, 0.3, seed=1)
    rng = np.random.default_rng(2)
    v = rng.standard_normal((40, 5))
    got = spmm_serial(a, v, backend=backend)
    ref = d @ v
    assert np.linalg.norm(got - ref) <= 1e-13 * np.linalg.norm(ref)


def test_backends_bitwise_identical():
    if "compiled" not in kernels.available_backends():
        pytest.skip("extension not built")
    a, _ = random_csr(60, 0.2, seed=3)
    rng = np.random.default_rng(4)
    v = rng.standard_normal((60, 7))
    assert np.array_equal(spmm_serial(a, v, backend="python"),
                          spmm_serial(a, v, backend="compiled"))


@pytest.mark.parametrize("backend", sorted(kernels.available_backends()))
def test_empty_rows_and_empty_matrix(backend):
    # row 1 empty, last row empty
    a = CsrMatrix.from_coo(4, [0, 2], [3, 1], [2.0, -1.0])
    v = np.arange(8.0).reshape(4, 2)
    got = spmm_serial(a, v, backend=backend)
    assert np.array_equal(got, a.to_dense() @ v)

    empty = CsrMatrix.from_coo(3, [], [], [])
    assert np.array_equal(spmm_serial(empty, np.ones((3, 2)), backend=backend),
                          np.zeros((3, 2)))

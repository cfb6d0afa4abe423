import numpy as np
import pytest

from vmrec import kernels
from vmrec.numerics import RngStream


def test_active_backend_is_known():
    assert kernels.BACKEND in kernels.backends()


def test_compiled_backend_is_built():
    # the package is expected to be installed with its extension; see README
    assert "cython" in kernels.backends()


def test_sq_dist_matches_definition(kernel_impl):
    r = RngStream(1)
    A, B = r.normal((7, 5)), r.normal((4, 5))
    want = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    assert np.allclose(kernels.sq_dist(A, B, impl=kernel_impl), want, rtol=0, atol=1e-12)
    assert np.all(np.diag(kernels.sq_dist(A, A, impl=kernel_impl)) == 0.0)


def test_hinge_all_pairs_matches_loop(kernel_impl):
    D = RngStream(2).uniform((6, 6)) * 2
    loss, G = kernels.hinge_all_pairs(D, 0.4, impl=kernel_impl)
    terms = [max(D[i, i] - D[i, j] + 0.4, 0.0) for i in range(6) for j in range(6) if j != i]
    assert abs(loss - np.mean(terms)) < 1e-14
    want = np.zeros_like(D)
    for i in range(6):
        for j in range(6):
            if j != i and D[i, i] - D[i, j] + 0.4 > 0:
                want[i, i] += 1 / 30
                want[i, j] -= 1 / 30
    assert np.allclose(G, want, atol=1e-15)


def test_hinge_triples_empty(kernel_impl):
    E = np.ones((3, 2))
    loss, dE = kernels.hinge_triples(E, [], [], [], 0.5, impl=kernel_impl)
    assert loss == 0.0 and not dE.any()


def test_gt_ranks_ties_go_to_lower_index(kernel_impl):
    S = np.array([[1.0, 1.0, 0.5], [2.0, 2.0, 2.0]])
    asc = kernels.gt_ranks(S, [1, 0], False, impl=kernel_impl)
    assert list(asc) == [3, 1]
    desc = kernels.gt_ranks(S, [1, 2], True, impl=kernel_impl)
    assert list(desc) == [2, 3]


@pytest.mark.parametrize("seed", range(5))
def test_backends_agree(seed):
    impls = kernels.backends()
    if len(impls) < 2:
        pytest.skip("compiled backend not built")
    r = RngStream(seed)
    A, B = r.normal((40, 6)), r.normal((30, 6))
    a, p, n = (r.integers(0, 40, size=25) for _ in range(3))
    D = kernels.sq_dist(A, A, impl=impls["python"])
    out = {}
    for name, impl in impls.items():
        out[name] = (
            kernels.sq_dist(A, B, impl=impl),
            *kernels.hinge_all_pairs(D, 0.5, impl=impl),
            *kernels.hinge_triples(A, a, p, n, 0.5, impl=impl),
            kernels.gt_ranks(D, np.arange(40), False, impl=impl),
            kernels.gt_ranks(D, np.arange(40)[::-1], True, impl=impl),
        )
    for x, y in zip(out["python"], out["cython"]):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)

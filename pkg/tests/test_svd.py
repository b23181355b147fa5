import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mvdssm.movielens import InteractionLog
from mvdssm.svd import build_view2, implicit_matrix, truncated_svd, user_vectors


def random_sparse(rows, cols, density, seed):
    return sp.random(rows, cols, density=density, random_state=seed, format="csr", data_rvs=np.ones)


def test_top_singular_values_match_dense_eigen_oracle():
    m = random_sparse(50, 40, 0.15, 1)
    _, s, _ = truncated_svd(m, k=5, seed=0)
    dense = m.toarray()
    eig = np.linalg.eigvalsh(dense.T @ dense)[::-1][:5]
    np.testing.assert_allclose(s, np.sqrt(eig), atol=1e-6)


def test_rank_one_and_identity():
    u = np.arange(1, 7, dtype=float)
    v = np.linspace(-1, 1, 5)
    m = sp.csr_matrix(np.outer(u, v))
    uk, s, vk = truncated_svd(m, k=1)
    np.testing.assert_allclose(uk * s @ vk.T, np.outer(u, v), atol=1e-8)
    _, s, _ = truncated_svd(sp.identity(5, format="csr"), k=5)
    np.testing.assert_allclose(s, np.ones(5), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(10, 40), st.integers(10, 40), st.integers(1, 8), st.integers(0, 1000))
def test_orthonormal_ordered_and_near_optimal(rows, cols, k, seed):
    m = random_sparse(rows, cols, 0.2, seed)
    k = min(k, rows, cols)
    u, s, v = truncated_svd(m, k=k, seed=seed)
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-6)
    assert (np.diff(s) <= 1e-12).all() and (s >= 0).all()
    dense = m.toarray()
    best = np.linalg.svd(dense, compute_uv=False)
    best_err = np.sqrt((best[k:] ** 2).sum())
    err = np.linalg.norm(dense - (u * s) @ v.T)
    assert err <= best_err * 1.05 + 1e-9


def test_rank_deficient_pads_with_zero_singular_values():
    m = sp.csr_matrix(np.outer(np.ones(6), np.ones(4)))
    u, s, _ = truncated_svd(m, k=3)
    assert s[0] == pytest.approx(np.sqrt(24))
    np.testing.assert_allclose(s[1:], 0.0, atol=1e-10)
    np.testing.assert_allclose(u.T @ u, np.eye(3), atol=1e-6)
    vec = user_vectors(u, s)
    np.testing.assert_allclose(vec[:, 1:], 0.0, atol=1e-5)


def test_errors_and_determinism():
    m = random_sparse(8, 6, 0.5, 2)
    with pytest.raises(ValueError):
        truncated_svd(m, k=7)
    with pytest.raises(ValueError):
        truncated_svd(m, k=2, iters=1)
    a = truncated_svd(m, k=3, seed=4)
    b = truncated_svd(m, k=3, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_row_norm_grows_with_interaction_count():
    # one block of items; user r has interacted with the first r+1 items
    rows = np.concatenate([np.full(r + 1, r) for r in range(8)])
    cols = np.concatenate([np.arange(r + 1) for r in range(8)])
    m = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(8, 8))
    u, s, _ = truncated_svd(m, k=1)
    norms = np.linalg.norm(user_vectors(u, s), axis=1)
    assert (np.diff(norms) >= -1e-12).all()


def test_view2_from_training_only():
    log = InteractionLog(
        np.array([1, 1, 2, 2, 2, 2]), np.array([1, 1, 2, 3, 1, 4]), np.ones(6, int), np.arange(6)
    )
    m = implicit_matrix(log, 3, 5)
    assert m.nnz == 5 and set(m.data) == {1.0}
    view = build_view2(log, 3, 5, k=2)
    assert view.dim == 2 and view.features.shape == (3, 2)
    assert not view.features[2].any()  # user 3 has no interactions
    assert np.isfinite(view.features).all()


def test_canonical_view2_dimension(ml100k):
    from mvdssm.movielens import load_raw

    log, users, items = load_raw(ml100k)
    view = build_view2(log, len(users.ids), len(items.ids))
    assert view.features.shape == (943, 30)

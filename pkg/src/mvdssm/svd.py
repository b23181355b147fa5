"""Truncated SVD of the binary user-item matrix for the second user view."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .movielens import InteractionLog, ViewDataset

EMBED_DIM = 30


def implicit_matrix(log: InteractionLog, n_users: int, n_items: int) -> sp.csr_matrix:
    """Binary matrix with a 1 for every distinct (user, item) pair in ``log``."""
    m = sp.csr_matrix(
        (np.ones(len(log)), (log.users - 1, log.items - 1)), shape=(n_users, n_items)
    )
    m.sum_duplicates()
    m.data[:] = 1.0
    return m


def truncated_svd(
    m,
    k: int = EMBED_DIM,
    iters: int = 15,
    oversample: int = 10,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Randomized subspace iteration. Returns ``U (r,k)``, ``s (k,)``, ``V (c,k)``.

    When ``k`` exceeds the numerical rank the trailing singular values are zero
    and the matching columns of ``U``/``V`` are still orthonormal.
    """
    rows, cols = m.shape
    if k > min(rows, cols):
        raise ValueError(f"k={k} exceeds min{m.shape}")
    if iters < 2:
        raise ValueError("need at least 2 subspace iterations")
    rng = np.random.default_rng(seed)
    width = min(k + oversample, min(rows, cols))

    q, _ = np.linalg.qr(m @ rng.standard_normal((cols, width)))
    for _ in range(iters):
        z, _ = np.linalg.qr(m.T @ q)
        q, _ = np.linalg.qr(m @ z)
    b = np.asarray((m.T @ q).T)  # (width, cols)
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub[:, :k]
    s = s[:k]
    v = vt[:k].T
    # deterministic sign: largest-magnitude entry of each column positive
    flip = np.sign(u[np.abs(u).argmax(axis=0), np.arange(k)])
    flip[flip == 0] = 1.0
    return u * flip, s, v * flip


def user_vectors(u: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Symmetric factor split: rows of ``U sqrt(S)``."""
    return u * np.sqrt(np.clip(s, 0.0, None))


def build_view2(train: InteractionLog, n_users: int, n_items: int, k: int = EMBED_DIM, seed: int = 0) -> ViewDataset:
    """View-2 features from training interactions only.

    Users absent from ``train`` have all-zero rows in the matrix and therefore
    get the zero embedding.
    """
    m = implicit_matrix(train, n_users, n_items)
    u, s, _ = truncated_svd(m, k=k, seed=seed)
    emb = user_vectors(u, s)
    emb[np.asarray(m.getnnz(axis=1)) == 0] = 0.0
    return ViewDataset(2, emb, k)

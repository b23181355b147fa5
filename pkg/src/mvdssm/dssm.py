"""Two-tower relevance: cosine score, temperature softmax, sampled-softmax loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .nn import Gradients, ShapeError, Tower, backward, forward


class ZeroNormError(ValueError):
    """A semantic vector collapsed to zero, so cosine relevance is undefined."""


@dataclass
class TrainingBatch:
    """Positive pairs with their sampled negatives.

    ``items`` stacks ``1 + n_neg`` item rows per positive: row ``b*(1+n_neg)``
    is the clicked item for positive ``b``, the next ``n_neg`` rows its negatives.
    """

    user_features: np.ndarray  # (B, d_user)
    items: sp.csr_matrix | np.ndarray  # (B*(1+n_neg), d_item)
    n_neg: int
    view: int = 0

    def __post_init__(self) -> None:
        b = self.user_features.shape[0]
        if self.items.shape[0] != b * (1 + self.n_neg):
            raise ShapeError(
                f"{self.items.shape[0]} item rows for {b} positives with {self.n_neg} negatives each"
            )

    @property
    def size(self) -> int:
        return self.user_features.shape[0]


def cosine(yq: np.ndarray, yd: np.ndarray) -> float:
    yq = np.asarray(yq, dtype=np.float64)
    yd = np.asarray(yd, dtype=np.float64)
    if yq.shape != yd.shape:
        raise ShapeError(f"cosine of vectors with shapes {yq.shape} and {yd.shape}")
    nq, nd = np.linalg.norm(yq), np.linalg.norm(yd)
    if nq == 0.0 or nd == 0.0:
        raise ZeroNormError("cosine undefined for a zero vector")
    return float(yq @ yd / (nq * nd))


def posterior(scores, gamma: float = 1.0) -> np.ndarray:
    """Softmax of ``gamma * scores`` along the last axis."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[-1] < 1:
        raise ValueError("posterior over an empty candidate set")
    if gamma <= 0:
        raise ValueError("temperature gamma must be positive")
    z = gamma * s
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _norms(y: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(y, axis=-1)
    if np.any(n == 0.0):
        raise ZeroNormError("semantic vector with zero norm in batch")
    return n


def batch_loss_and_grads(
    user_tower: Tower,
    item_tower: Tower,
    batch: TrainingBatch,
    gamma: float = 1.0,
) -> tuple[float, Gradients, Gradients]:
    """Summed negative log-likelihood of the clicked items, and mean-per-pair gradients.

    The returned loss is ``-sum_b log P(D+_b | Q_b)``; both gradient sets are of
    that sum divided by the batch size.
    """
    if user_tower.out_dim != item_tower.out_dim:
        raise ShapeError("user and item towers emit different semantic dimensions")
    n_cand = 1 + batch.n_neg
    bsz = batch.size

    yq, ucache = forward(user_tower, batch.user_features)  # (B, k)
    yd_flat, icache = forward(item_tower, batch.items)  # (B*C, k)
    yd = yd_flat.reshape(bsz, n_cand, -1)

    nq = _norms(yq)  # (B,)
    nd = _norms(yd)  # (B, C)
    dots = np.einsum("bk,bck->bc", yq, yd)
    cos = dots / (nq[:, None] * nd)
    p = posterior(cos, gamma)
    loss = float(-np.log(p[:, 0]).sum())

    # d(mean loss)/d cos
    dcos = gamma * p
    dcos[:, 0] -= gamma
    dcos /= bsz

    uq = yq / nq[:, None]
    ud = yd / nd[:, :, None]
    # dcos/dyq = (ud - cos*uq)/|yq| ; dcos/dyd = (uq - cos*ud)/|yd|
    dyq = (np.einsum("bc,bck->bk", dcos, ud) - (dcos * cos).sum(axis=1)[:, None] * uq) / nq[:, None]
    dyd = (dcos[:, :, None] * (uq[:, None, :] - cos[:, :, None] * ud)) / nd[:, :, None]

    ugrads = backward(user_tower, ucache, dyq)
    igrads = backward(item_tower, icache, dyd.reshape(bsz * n_cand, -1))
    return loss, ugrads, igrads

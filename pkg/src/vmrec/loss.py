"""Structured cross-modal triplet loss and the binary cross-entropy alternative.

The structured loss is a weighted sum of four triplet terms over a batch of
aligned clips (row ``i`` of the music and video batches come from one clip):

``vm``   anchor video ``i``, positive music ``i``, negative music ``j``
``mv``   anchor music ``i``, positive video ``i``, negative video ``j``
``vv``   video-only triples mined from the video input features
``mm``   music-only triples mined from the music input features

Inter-modal terms use every ``j != i`` as a negative and average over the
``B * (B - 1)`` triples. All triplet terms use squared Euclidean distances and
the hinge ``max(d(a, p) - d(a, n) + margin, 0)``; the gradient is zero wherever
the hinge is not strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numerics import NonFiniteError, ShapeError, pairwise_sq_dist

TERMS = ("vm", "mv", "vv", "mm")
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class TripletLossConfig:
    margin: float = 0.5
    weights: tuple = (1.0, 1.0, 0.1, 0.1)
    intra_triples_per_batch: int | None = None  # None: one triple per batch row

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if len(self.weights) != 4 or not all(np.isfinite(self.weights)) or min(self.weights) < 0:
            raise ValueError(f"weights must be four finite non-negative numbers, got {self.weights}")
        if self.intra_triples_per_batch is not None and self.intra_triples_per_batch < 0:
            raise ValueError("intra_triples_per_batch must be non-negative")


def triplet_loss_and_grad(a, p, n, margin):
    """Hinge triplet loss on single vectors; returns ``(loss, da, dp, dn)``."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    if not a.shape == p.shape == n.shape:
        raise ShapeError(f"triplet: shapes {a.shape}, {p.shape}, {n.shape}")
    v = float(np.sum((a - p) ** 2) - np.sum((a - n) ** 2) + margin)
    if v <= 0.0:
        z = np.zeros_like(a)
        return 0.0, z, z.copy(), z.copy()
    return v, 2.0 * (n - p), -2.0 * (a - p), 2.0 * (a - n)


def _all_pairs_term(anchors, others, margin):
    D = pairwise_sq_dist(anchors, others)
    loss, G = kernels.hinge_all_pairs(D, margin)
    d_anchor = 2.0 * (G.sum(axis=1)[:, None] * anchors - G @ others)
    d_other = 2.0 * (G.sum(axis=0)[:, None] * others - G.T @ anchors)
    return loss, d_anchor, d_other


def inter_modal_loss(E_M, E_V, margin):
    """Both inter-modal ranking terms with batch-all negatives.

    Returns ``(L_vm, L_mv, grads)`` where ``grads["vm"]`` and ``grads["mv"]``
    are each a ``(dE_M, dE_V)`` pair.
    """
    E_M = np.asarray(E_M, dtype=np.float64)
    E_V = np.asarray(E_V, dtype=np.float64)
    if E_M.shape != E_V.shape:
        raise ShapeError(f"inter_modal_loss: misaligned batches {E_M.shape} vs {E_V.shape}")
    if E_M.shape[0] < 2:
        raise ShapeError("inter_modal_loss needs at least 2 clips per batch")
    l_vm, dV_vm, dM_vm = _all_pairs_term(E_V, E_M, margin)
    l_mv, dM_mv, dV_mv = _all_pairs_term(E_M, E_V, margin)
    return l_vm, l_mv, {"vm": (dM_vm, dV_vm), "mv": (dM_mv, dV_mv)}


def order_candidates(X, anchors, c1, c2):
    """Split candidate pairs into (positive, negative) by input-space distance to the anchor.

    The closer candidate becomes the positive; on a tie the lower index does.
    """
    X = np.asarray(X, dtype=np.float64)
    anchors, c1, c2 = (np.asarray(v, dtype=np.int64) for v in (anchors, c1, c2))
    d1 = np.einsum("ij,ij->i", X[anchors] - X[c1], X[anchors] - X[c1])
    d2 = np.einsum("ij,ij->i", X[anchors] - X[c2], X[anchors] - X[c2])
    first = (d1 < d2) | ((d1 == d2) & (c1 < c2))
    return np.where(first, c1, c2), np.where(first, c2, c1)


def mine_intra_triples(X, count, rng):
    """Draw ``count`` triples of distinct rows, ordered by distances on ``X``.

    Anchors are uniform over rows; the two other rows are a uniform pair from
    the remaining ones. Returns an int64 array of shape ``(count, 3)`` holding
    ``(anchor, positive, negative)``.
    """
    X = np.asarray(X, dtype=np.float64)
    b = X.shape[0]
    if b < 3:
        raise ShapeError(f"intra-modal mining needs at least 3 rows, got {b}")
    a = rng.integers(0, b, size=count)
    r1 = rng.integers(0, b - 1, size=count)
    c1 = r1 + (r1 >= a)
    r2 = rng.integers(0, b - 2, size=count)
    lo, hi = np.minimum(a, c1), np.maximum(a, c1)
    c2 = r2 + (r2 >= lo)
    c2 = c2 + (c2 >= hi)
    p, n = order_candidates(X, a, c1, c2)
    return np.stack([a, p, n], axis=1).astype(np.int64)


def intra_modal_loss(E, triples, margin):
    """Mean hinge over ``triples`` (rows of ``(a, p, n)``) applied to ``E``; returns ``(loss, dE)``."""
    E = np.asarray(E, dtype=np.float64)
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if triples.size and (triples.min() < 0 or triples.max() >= E.shape[0]):
        raise IndexError(f"triple index out of range for a batch of {E.shape[0]}")
    return kernels.hinge_triples(E, triples[:, 0], triples[:, 1], triples[:, 2], margin)


def combined_loss(l_vm, l_mv, l_vv, l_mm, weights):
    comps = (l_vm, l_mv, l_vv, l_mm)
    if not all(np.isfinite(comps)):
        raise NonFiniteError(f"non-finite loss component in {comps}")
    return float(sum(w * c for w, c in zip(weights, comps)))


@dataclass
class VMLossResult:
    total: float
    components: dict
    dE_M: np.ndarray
    dE_V: np.ndarray


def structured_loss(E_M, E_V, X_M, X_V, config, rng):
    """Full four-term loss on one batch with gradients wrt both embedding batches.

    Intra-modal triples are mined from ``X_M`` / ``X_V`` with ``rng``.
    """
    b = E_M.shape[0]
    w_vm, w_mv, w_vv, w_mm = config.weights
    l_vm, l_mv, g = inter_modal_loss(E_M, E_V, config.margin)
    dE_M = w_vm * g["vm"][0] + w_mv * g["mv"][0]
    dE_V = w_vm * g["vm"][1] + w_mv * g["mv"][1]
    count = b if config.intra_triples_per_batch is None else config.intra_triples_per_batch
    l_vv = l_mm = 0.0
    if b >= 3 and count > 0:
        l_mm, d = intra_modal_loss(E_M, mine_intra_triples(X_M, count, rng.child(0)), config.margin)
        dE_M = dE_M + w_mm * d
        l_vv, d = intra_modal_loss(E_V, mine_intra_triples(X_V, count, rng.child(1)), config.margin)
        dE_V = dE_V + w_vv * d
    total = combined_loss(l_vm, l_mv, l_vv, l_mm, config.weights)
    comps = {"vm": l_vm, "mv": l_mv, "vv": l_vv, "mm": l_mm}
    return VMLossResult(total, comps, dE_M, dE_V)


def bce_loss(scores, labels):
    """Mean binary cross-entropy; returns ``(loss, dscores)``.

    Scores are clamped into ``[1e-7, 1 - 1e-7]``; the gradient is the
    derivative of the log terms evaluated at the clamped score.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise ShapeError(f"bce_loss: {s.shape} scores vs {y.shape} labels")
    s = np.clip(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = s.size
    loss = float(-np.mean(y * np.log(s) + (1.0 - y) * np.log1p(-s)))
    grad = (-y / s + (1.0 - y) / (1.0 - s)) / n
    return loss, grad

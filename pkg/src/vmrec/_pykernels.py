"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module. Results
agree with the compiled path to rounding (summation order differs), and each
path is bit-deterministic on its own.
"""

import numpy as np

# rows of E1 processed per block in sq_dist; bounds the (block, N2, D) temporary
_BLOCK_ELEMS = 1 << 22


def sq_dist(E1, E2):
    n1, d = E1.shape
    n2 = E2.shape[0]
    out = np.empty((n1, n2), dtype=np.float64)
    step = max(1, _BLOCK_ELEMS // max(1, n2 * d))
    for start in range(0, n1, step):
        diff = E1[start:start + step, None, :] - E2[None, :, :]
        out[start:start + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def hinge_all_pairs(D, margin):
    b = D.shape[0]
    inv = 1.0 / (b * (b - 1))
    v = np.diag(D)[:, None] - D + margin
    active = v > 0.0
    np.fill_diagonal(active, False)
    total = float(np.sum(np.where(active, v, 0.0)))
    G = np.where(active, -inv, 0.0)
    G[np.diag_indices(b)] = active.sum(axis=1) * inv
    return total * inv, G


def hinge_triples(E, a, p, n, margin):
    dE = np.zeros_like(E)
    if len(a) == 0:
        return 0.0, dE
    inv = 1.0 / len(a)
    diff_p = E[a] - E[p]
    diff_n = E[a] - E[n]
    v = np.einsum("ij,ij->i", diff_p, diff_p) - np.einsum("ij,ij->i", diff_n, diff_n) + margin
    active = v > 0.0
    ga = 2.0 * inv * diff_p[active]
    gn = 2.0 * inv * diff_n[active]
    np.add.at(dE, a[active], ga - gn)
    np.add.at(dE, p[active], -ga)
    np.add.at(dE, n[active], gn)
    return float(np.sum(v[active])) * inv, dE


def gt_ranks(S, gt, descending):
    rows = np.arange(S.shape[0])
    s_gt = S[rows, gt][:, None]
    better = S > s_gt if descending else S < s_gt
    earlier_tie = (S == s_gt) & (np.arange(S.shape[1])[None, :] < gt[:, None])
    return 1 + better.sum(axis=1).astype(np.int64) + earlier_tie.sum(axis=1)

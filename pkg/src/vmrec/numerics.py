"""Dense layer kernels with analytic gradients, a seeded random stream and Adam.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, row-major.
Every function returns new arrays; inputs are never modified in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A NaN or infinity reached a place that forbids it."""


def as_matrix(x, name="matrix"):
    """Coerce to a 2-D float64 array, rejecting ragged or non-finite input."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains non-finite entries")
    return arr


def check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: contains non-finite entries")
    return arr


class RngStream:
    """Seeded random stream backed by the Philox4x64 counter-based generator.

    A stream is a pure function of ``(seed, spawn path)``: draws depend only on
    the seed and the keys passed to :meth:`child`, never on global state.
    ``child(key)`` derives an independent substream, which lets per-item draws
    stay identical regardless of the order the items are processed in.
    """

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys):
        return RngStream(self.seed, self._path + tuple(int(k) for k in keys))

    def normal(self, size, scale=1.0):
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, size):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)

    def derangement(self, n):
        """Uniform random permutation of ``range(n)`` with no fixed point (n >= 2)."""
        if n < 2:
            raise ValueError(f"no derangement of {n} elements")
        while True:
            perm = self._gen.permutation(n)
            if not np.any(perm == np.arange(n)):
                return perm


def matmul(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {A.shape} by {B.shape}")
    return A @ B


@dataclass
class FCCache:
    X: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    activation: str


def fc_forward(X, W, b, activation="relu"):
    """``act(X @ W + b)`` with ``act`` in {"relu", "linear"}; returns ``(Y, cache)``."""
    if activation not in ("relu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    X = np.asarray(X, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"fc_forward: X {X.shape}, W {W.shape}, b {b.shape}")
    Z = X @ W + b
    Y = np.maximum(Z, 0.0) if activation == "relu" else Z
    return Y, FCCache(X, W, Z, activation)


def fc_backward(dY, cache):
    """Return ``(dX, dW, db)``. The ReLU subgradient at exactly 0 is 0."""
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != cache.Z.shape:
        raise ShapeError(f"fc_backward: dY {dY.shape} does not match output {cache.Z.shape}")
    dZ = dY * (cache.Z > 0.0) if cache.activation == "relu" else dY
    return dZ @ cache.W.T, cache.X.T @ dZ, dZ.sum(axis=0)


@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str


def batchnorm(X, gamma, beta, running_mean, running_var, mode="train", momentum=0.9, eps=1e-5):
    """Batch normalisation over rows.

    Train mode normalises with the batch mean and population variance and
    returns running statistics updated as ``momentum * old + (1 - momentum) * batch``.
    Infer mode uses the running statistics and returns them unchanged.

    Returns ``(Y, cache, (running_mean, running_var))``.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batchnorm: X {X.shape}, gamma {gamma.shape}, beta {beta.shape}")
    if mode == "train":
        if X.shape[0] < 2:
            raise ShapeError(f"batchnorm: train mode needs a batch of at least 2 rows, got {X.shape[0]}")
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        new_stats = (
            momentum * running_mean + (1.0 - momentum) * mean,
            momentum * running_var + (1.0 - momentum) * var,
        )
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X - mean) * inv_std
    return gamma * xhat + beta, BNCache(xhat, inv_std, gamma, mode), new_stats


def batchnorm_backward(dY, cache):
    """Return ``(dX, dgamma, dbeta)`` for the matching :func:`batchnorm` call."""
    dY = np.asarray(dY, dtype=np.float64)
    if dY.shape != cache.xhat.shape:
        raise ShapeError(f"batchnorm_backward: dY {dY.shape} vs cached {cache.xhat.shape}")
    dgamma = np.sum(dY * cache.xhat, axis=0)
    dbeta = dY.sum(axis=0)
    dxhat = dY * cache.gamma
    if cache.mode == "infer":
        return dxhat * cache.inv_std, dgamma, dbeta
    # batch statistics depend on every row
    dX = cache.inv_std * (
        dxhat - dxhat.mean(axis=0) - cache.xhat * np.mean(dxhat * cache.xhat, axis=0)
    )
    return dX, dgamma, dbeta


def dropout(X, p, mode, rng):
    """Inverted dropout. Returns ``(Y, mask)``; ``mask`` already carries the 1/(1-p) scale."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    X = np.asarray(X, dtype=np.float64)
    if mode == "infer" or p == 0.0:
        return X, None
    mask = (rng.uniform(X.shape) >= p) / (1.0 - p)
    return X * mask, mask


def dropout_backward(dY, mask):
    return dY if mask is None else dY * mask


def pairwise_sq_dist(E1, E2):
    """Squared Euclidean distances between rows; entry ``(i, j)`` is ``|E1[i] - E2[j]|^2``.

    Computed by direct differences, so identical rows give exactly 0.
    """
    E1 = np.asarray(E1, dtype=np.float64)
    E2 = np.asarray(E2, dtype=np.float64)
    if E1.ndim != 2 or E2.ndim != 2 or E1.shape[1] != E2.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: {E1.shape} vs {E2.shape}")
    return np.maximum(kernels.sq_dist(E1, E2), 0.0)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, **kw):
        zeros = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(lr=lr, m=zeros, v={k: z.copy() for k, z in zeros.items()}, **kw)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ShapeError("adam_step: parameter, gradient and state keys differ")
    t = state.t + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape or state.m[name].shape != w.shape:
            raise ShapeError(f"adam_step: {name} param {w.shape} vs grad {g.shape}")
        check_finite(g, f"gradient {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_params[name] = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
    return new_params, new_state

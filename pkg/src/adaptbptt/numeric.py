"""Dense numeric kernels and the seeded random generator.

Matrices and vectors are plain float64 numpy arrays. Every kernel accepts
either a single vector of shape ``(n,)`` or a batch of row vectors of shape
``(batch, n)``; batches are how parallel training streams are vectorized.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def affine(A: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return ``A @ x + b`` (row-wise for a batch ``x``)."""
    A = np.asarray(A, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or x.ndim not in (1, 2) or b.ndim != 1:
        raise ValueError("affine expects a matrix, a vector (or batch) and a vector")
    if x.shape[-1] != A.shape[1]:
        raise ValueError(f"dimension mismatch: A has {A.shape[1]} cols, x has dim {x.shape[-1]}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"dimension mismatch: A has {A.shape[0]} rows, b has dim {b.shape[0]}")
    return x @ A.T + b


def sigmoid(x):
    x = np.asarray(x)
    return expit(x if x.dtype.kind == "f" else x.astype(np.float64))


def elementwise(f: str, x) -> np.ndarray:
    if f == "sigmoid":
        return sigmoid(x)
    if f == "tanh":
        return np.tanh(np.asarray(x, dtype=np.float64))
    if f == "linear":
        return np.array(x, dtype=np.float64)
    raise ValueError(f"unknown nonlinearity {f!r}")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits, target):
    """Cross-entropy of ``softmax(logits)`` against class ``target``.

    Returns ``(loss, dlogits)``. For a batch, ``target`` is an int array and
    ``loss`` is the per-row loss vector.
    """
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target)
    n_cls = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= n_cls):
        raise ValueError(f"target out of range for {n_cls} classes")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        t = int(target)
        loss = -logp[t]
        grad = np.exp(logp)
        grad[t] -= 1.0
        return float(loss), grad
    rows = np.arange(logits.shape[0])
    loss = -logp[rows, target]
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return loss, grad


def euclid_norm(x) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(x, x)))


def spectral_norm(W: np.ndarray, iters: int = 200) -> float:
    """Power-iteration estimate of the largest singular value of ``W``."""
    W = np.asarray(W, dtype=np.float64)
    v = np.ones(W.shape[1]) / np.sqrt(W.shape[1])
    s = 0.0
    for _ in range(iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = W.T @ (u / nu)
        s = np.linalg.norm(v)
        v /= s
    return float(s)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """SplitMix64 generator.

    State update ``s <- s + 0x9E3779B97F4A7C15 (mod 2**64)``; output is
    ``mix(s)`` with the standard SplitMix64 finalizer (shifts 30/27/31,
    multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Doubles take the
    top 53 bits. Normals use Box-Muller on consecutive uniform pairs.
    Because the state advances by a constant, a block of ``n`` outputs is
    computed in one vectorized pass.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def u64(self, n: int) -> np.ndarray:
        n = int(n)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64)
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _mix(z)
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return out

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]  # in (0, 1]
        r = np.sqrt(-2.0 * np.log(u1))
        th = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(th)
        z[1::2] = r * np.sin(th)
        z = z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high: int, size=None):
        """Uniform integers on ``[0, high)``."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = self.uniform(size if size is not None else 1)
        k = np.minimum((u * high).astype(np.int64), high - 1)
        return int(k[0]) if size is None else k

    def spawn(self, tag: int) -> "SeededRng":
        """Independent child generator keyed by ``tag``."""
        return SeededRng(self.next_u64() ^ (int(tag) * 0xD1B54A32D192ED03 & _MASK64))

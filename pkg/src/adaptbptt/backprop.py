"""Reverse-mode gradients through time.

The backward sweep walks a recorded tape from its last step towards the
start, carrying the adjoint of the full recurrent state (every layer's ``h``
and, for LSTMs, ``c``). Losses inject their adjoint when the sweep reaches
their step; the sweep stops after a given step, which is what truncation
means here. Jacobians are never formed, only vector-Jacobian products.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .cells import LSTMEntry, ModelParams, Tape, forward_window


class GradAccumulator(dict):
    """Gradient buffers keyed like ``ModelParams.tensors``."""

    @classmethod
    def zeros(cls, params: ModelParams) -> "GradAccumulator":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())

    def __add__(self, other):
        return GradAccumulator({k: v + other[k] for k, v in self.items()})

    def __sub__(self, other):
        return GradAccumulator({k: v - other[k] for k, v in self.items()})

    def scaled(self, a: float) -> "GradAccumulator":
        return GradAccumulator({k: a * v for k, v in self.items()})


@dataclass
class AdjointState:
    """Adjoint of the recurrent state, one ``(batch, d)`` array per layer."""

    h: list
    c: list | None = None

    def flat(self) -> np.ndarray:
        parts = []
        for l in range(len(self.h)):
            if self.c is not None:
                parts.append(self.c[l])
            parts.append(self.h[l])
        return np.concatenate(parts, axis=-1)

    def norms(self) -> np.ndarray:
        sq = sum(np.einsum("bi,bi->b", a, a) for a in self.h)
        if self.c is not None:
            sq = sq + sum(np.einsum("bi,bi->b", a, a) for a in self.c)
        return np.sqrt(sq)


@dataclass
class GradNormProfile:
    """``samples[i, k]`` is the state-adjoint norm ``k`` lags before loss ``indices[i]``."""

    samples: np.ndarray
    R: int
    indices: np.ndarray | None = None


def lstm_vjp(dh, dc, e: LSTMEntry, W, U):
    """Pull ``(dh, dc)`` back through one LSTM step.

    Returns ``(dh_prev, dc_prev, dx, dpre)``; ``dpre`` is the adjoint of the
    stacked gate pre-activations, from which parameter gradients follow as
    ``dW = dpre.T @ h_prev``, ``dU = dpre.T @ x``, ``db = sum(dpre)``.
    """
    dct = dc + dh * e.o * (1.0 - e.tanh_c * e.tanh_c)
    dpre = np.concatenate(
        [
            dct * e.c_prev * e.f * (1.0 - e.f),
            dct * e.z * e.i * (1.0 - e.i),
            dh * e.tanh_c * e.o * (1.0 - e.o),
            dct * e.i * (1.0 - e.z * e.z),
        ],
        axis=-1,
    )
    return dpre @ W, dct * e.f, dpre @ U, dpre


def rnn_vjp(dh, e, W, U, activation: str = "tanh"):
    dpre = dh * (1.0 - e.h * e.h) if activation == "tanh" else dh
    return dpre @ W, dpre @ U, dpre


def vjp_step(adj_h, adj_c, entry, p):
    """Vector-Jacobian product through a single layer step.

    Returns ``(adj_h_prev, adj_c_prev, adj_x, (dW, dU, db))``; ``adj_c`` is
    ignored (and ``None`` is returned) for simple RNN cells.
    """
    if adj_h.shape[-1] != p.W.shape[1] or adj_h.shape != entry.h_prev.shape:
        raise ValueError("adjoint shape does not match tape entry")
    if isinstance(entry, LSTMEntry):
        if adj_c is None or adj_c.shape != entry.c_prev.shape:
            raise ValueError("LSTM step needs a cell-state adjoint of matching shape")
        dh_prev, dc_prev, dx, dpre = lstm_vjp(adj_h, adj_c, entry, p.W, p.U)
    else:
        dh_prev, dx, dpre = rnn_vjp(adj_h, entry, p.W, p.U, p.activation)
        dc_prev = None
    D = np.atleast_2d(dpre)
    grads = (D.T @ np.atleast_2d(entry.h_prev), D.T @ np.atleast_2d(entry.x), D.sum(axis=0))
    return dh_prev, dc_prev, dx, grads


def backward_sweep(params: ModelParams, tape: Tape, weights, stop: int = 0,
                   record_norms: bool = False, want_grads: bool = True, h_seed=None):
    """Reverse sweep over tape steps ``n-1, ..., stop``.

    ``weights[t]`` scales the loss at step ``t`` (per row, or a scalar); a
    ``None`` entry means no loss. ``h_seed`` optionally adds an adjoint on the
    final state of every layer (list of arrays). Returns
    ``(grads, norms, adjoint)`` where ``norms[k]`` is the per-row norm of the
    state adjoint after the sweep has consumed ``k`` steps (so ``norms`` has
    ``n - stop + 1`` rows) and ``adjoint`` is the state adjoint left at
    ``h[stop-1]``.
    """
    n = len(tape)
    if not 0 <= stop <= n:
        raise ValueError(f"stop={stop} outside tape of length {n}")
    lstm = params.cell == "lstm"
    L = params.n_layers
    layers = [params.layer(l) for l in range(L)]
    act = params.activation
    batch = tape.tokens.shape[1]
    V = params.tensors["output.W"]
    ah = [np.zeros((batch, d)) for d in params.d_hidden]
    ac = [np.zeros((batch, d)) for d in params.d_hidden] if lstm else None
    if h_seed is not None:
        ah = [a + s for a, s in zip(ah, h_seed)]
    dpres = [[] for _ in range(L)]
    hprev = [[] for _ in range(L)]
    xin = [[] for _ in range(L)]
    head_d, head_h = [], []
    emb_dx, emb_tok = [], []
    norms = []

    def record():
        if record_norms:
            norms.append(AdjointState(ah, ac).norms())

    for t in range(n - 1, stop - 1, -1):
        w = weights[t]
        d = tape.dlogits[t]
        if w is not None:
            if d is None:
                raise ValueError(f"step {t} has a loss weight but no recorded loss")
            dl = d * (np.asarray(w, dtype=np.float64).reshape(-1, 1) if np.ndim(w) else w)
            ah[L - 1] = ah[L - 1] + dl @ V
            if want_grads:
                head_d.append(dl)
                head_h.append(tape.h_top[t])
        record()
        dx = None
        step = tape.entries[t]
        for l in range(L - 1, -1, -1):
            e = step[l]
            p = layers[l]
            dh = ah[l] if dx is None else ah[l] + dx
            if lstm:
                ah[l], ac[l], dx, dpre = lstm_vjp(dh, ac[l], e, p.W, p.U)
            else:
                ah[l], dx, dpre = rnn_vjp(dh, e, p.W, p.U, act)
            if want_grads:
                dpres[l].append(dpre)
                hprev[l].append(e.h_prev)
                xin[l].append(e.x)
        if want_grads:
            emb_dx.append(dx)
            emb_tok.append(tape.tokens[t])
    record()

    grads = None
    if want_grads:
        grads = GradAccumulator.zeros(params)
        for l in range(L):
            if not dpres[l]:
                continue
            D = np.concatenate(dpres[l])
            grads[f"layers.{l}.W"] += D.T @ np.concatenate(hprev[l])
            grads[f"layers.{l}.U"] += D.T @ np.concatenate(xin[l])
            grads[f"layers.{l}.b"] += D.sum(axis=0)
        if head_d:
            D = np.concatenate(head_d)
            grads["output.W"] += D.T @ np.concatenate(head_h)
            grads["output.b"] += D.sum(axis=0)
        if emb_dx:
            np.add.at(grads["embedding"], np.concatenate(emb_tok), np.concatenate(emb_dx))
    return grads, (np.array(norms) if record_norms else None), AdjointState(ah, ac)


def bptt(params: ModelParams, tape: Tape, K1: int, K2: int) -> GradAccumulator:
    """Truncated backpropagation BPTT(K1, K2) over the end of a window.

    The last ``K2`` steps of the tape carry losses; each is backpropagated
    until step ``n-1-K1`` (inclusive), so loss ``L_{s-k'}`` sees
    ``K1 - k'`` lags. The result is averaged over the ``K2`` losses and the
    batch rows. Hidden states before the tape are constants.
    """
    n = len(tape)
    if K2 < 1 or K2 > K1:
        raise ValueError(f"need 1 <= K2 <= K1, got K1={K1}, K2={K2}")
    if n < K1:
        raise ValueError(f"window of length {n} is shorter than K1={K1}")
    batch = tape.tokens.shape[1]
    w = 1.0 / (K2 * batch)
    weights = [None] * (n - K2) + [w] * K2
    grads, _, _ = backward_sweep(params, tape, weights, stop=max(0, n - 1 - K1))
    return grads


def grad_norm_profile(params: ModelParams, x_tokens, targets, indices, R: int,
                      burn_in: int | None = None, loss_scale=None) -> GradNormProfile:
    """Backpropagated gradient norms ``phi[s, k] = ||dL_s / dh_{s-k}||``.

    Each index ``s`` gets a fresh forward pass from zero state over
    ``[s - R - burn_in + 1, s]``; only ``L_s`` carries a loss. The norm is
    taken over the concatenated state of all layers.
    """
    x_tokens = np.asarray(x_tokens)
    targets = np.asarray(targets)
    B = R if burn_in is None else int(burn_in)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("no profiling indices given")
    span = R + B
    if idx.min() < span - 1 or idx.max() >= len(x_tokens):
        raise ValueError(f"indices need {span - 1} steps of history and must lie inside the data")
    offs = np.arange(-span + 1, 1)
    win = idx[None, :] + offs[:, None]
    xs, ys = x_tokens[win], targets[win]
    _, tape, _ = forward_window(xs, None, params, ys, loss_from=span - 1)
    scale = np.ones(len(idx)) if loss_scale is None else np.asarray(loss_scale, dtype=np.float64)
    weights = [None] * (span - 1) + [scale]
    _, norms, _ = backward_sweep(params, tape, weights, stop=span - R, record_norms=True, want_grads=False)
    return GradNormProfile(np.ascontiguousarray(norms.T), R, idx)


def finite_diff_gradient(loss_fn, params: ModelParams, eps: float = 1e-5,
                         dtype=np.float64) -> GradAccumulator:
    """Central differences of ``loss_fn(params)`` for every coordinate.

    ``dtype=np.longdouble`` evaluates the loss in extended precision, which
    lowers the rounding floor of the difference quotient (about
    ``eps_machine * |loss| / eps``) well below double-precision gradients.
    """
    work = params.astype(dtype)
    out = GradAccumulator.zeros(params)
    for name, arr in work.tensors.items():
        g = out[name].reshape(-1)
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_fn(work)
            flat[j] = orig - eps
            lm = loss_fn(work)
            flat[j] = orig
            g[j] = float((lp - lm) / (2.0 * eps))
    return out


def write_profile_csv(path, profile: GradNormProfile) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["sample_index", "lag", "phi"])
        idx = profile.indices if profile.indices is not None else np.arange(len(profile.samples))
        for s, row in zip(idx, profile.samples):
            for k, v in enumerate(row):
                w.writerow([int(s), k, repr(float(v))])

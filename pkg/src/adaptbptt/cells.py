"""Recurrent cells, the stacked model and its windowed forward pass.

All state arrays are batched: shape ``(batch, dim)``, one row per stream.
LSTM gate weights are stored stacked along the first axis in the order
forget, input, output, candidate (``f, i, o, z``); the per-gate matrices are
exposed as views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .numeric import SeededRng, log_softmax, sigmoid

GATES = ("f", "i", "o", "z")


class RNNEntry(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray


class LSTMEntry(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    z: np.ndarray
    tanh_c: np.ndarray


@dataclass
class SimpleRNNParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray
    activation: str = "tanh"

    def __post_init__(self):
        d_h = self.W.shape[0]
        if self.W.shape != (d_h, d_h) or self.U.shape[0] != d_h or self.b.shape != (d_h,):
            raise ValueError("inconsistent simple RNN parameter shapes")
        if self.activation not in ("tanh", "linear"):
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class LSTMParams:
    """Stacked gate parameters: ``W`` is ``(4h, h)``, ``U`` is ``(4h, in)``."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        n4 = self.W.shape[0]
        if n4 % 4 or self.W.shape != (n4, n4 // 4) or self.U.shape[0] != n4 or self.b.shape != (n4,):
            raise ValueError("inconsistent LSTM parameter shapes")

    @classmethod
    def from_gates(cls, W: dict, U: dict, b: dict) -> "LSTMParams":
        return cls(
            np.concatenate([np.asarray(W[g], float) for g in GATES]),
            np.concatenate([np.asarray(U[g], float) for g in GATES]),
            np.concatenate([np.asarray(b[g], float) for g in GATES]),
        )

    def gate(self, name: str, which: str = "W") -> np.ndarray:
        n = self.W.shape[1]
        k = GATES.index(name)
        return getattr(self, which)[k * n:(k + 1) * n]

    W_f = property(lambda s: s.gate("f"))
    W_i = property(lambda s: s.gate("i"))
    W_o = property(lambda s: s.gate("o"))
    W_z = property(lambda s: s.gate("z"))
    U_f = property(lambda s: s.gate("f", "U"))
    U_i = property(lambda s: s.gate("i", "U"))
    U_o = property(lambda s: s.gate("o", "U"))
    U_z = property(lambda s: s.gate("z", "U"))


def _check_step_dims(W, U, h, x):
    if h.shape[-1] != W.shape[1] or x.shape[-1] != U.shape[1]:
        raise ValueError(
            f"dimension mismatch: state {h.shape[-1]} vs {W.shape[1]}, input {x.shape[-1]} vs {U.shape[1]}"
        )


def simple_rnn_step(h, x, p: SimpleRNNParams, check: bool = True):
    """One step ``h' = act(W h + U x + b)``; returns ``(h', tape entry)``."""
    if check:
        _check_step_dims(p.W, p.U, h, x)
    a = x @ p.U.T + h @ p.W.T + p.b
    h_new = np.tanh(a) if p.activation == "tanh" else a
    return h_new, RNNEntry(x, h, h_new)


def lstm_step(c, h, x, p: LSTMParams, check: bool = True):
    """One LSTM step; returns ``(c', h', tape entry)``."""
    if check:
        _check_step_dims(p.W, p.U, h, x)
    n = p.W.shape[1]
    pre = x @ p.U.T + h @ p.W.T + p.b
    s = sigmoid(pre[..., : 3 * n])
    f, i, o = s[..., :n], s[..., n:2 * n], s[..., 2 * n:]
    z = np.tanh(pre[..., 3 * n:])
    c_new = i * z + f * c
    tc = np.tanh(c_new)
    h_new = o * tc
    return c_new, h_new, LSTMEntry(x, h, c, f, i, o, z, tc)


@dataclass
class ModelParams:
    """Embedding input, a stack of recurrent layers and a linear output head.

    Tensors live in a flat name -> array dict so gradients, updates and
    checkpoints all share one layout.
    """

    cell: str
    vocab: int
    d_emb: int
    d_hidden: tuple
    activation: str = "tanh"
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.d_hidden = tuple(int(d) for d in self.d_hidden)
        if self.cell not in ("lstm", "rnn"):
            raise ValueError(f"unknown cell type {self.cell!r}")
        if not self.tensors:
            self.tensors = {n: np.zeros(s) for n, s in self.shapes().items()}
        for name, shape in self.shapes().items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}")

    @property
    def n_layers(self) -> int:
        return len(self.d_hidden)

    def shapes(self) -> dict:
        g = 4 if self.cell == "lstm" else 1
        out = {"embedding": (self.vocab, self.d_emb)}
        d_in = self.d_emb
        for l, d in enumerate(self.d_hidden):
            out[f"layers.{l}.W"] = (g * d, d)
            out[f"layers.{l}.U"] = (g * d, d_in)
            out[f"layers.{l}.b"] = (g * d,)
            d_in = d
        out["output.W"] = (self.vocab, d_in)
        out["output.b"] = (self.vocab,)
        return out

    def layer(self, l: int):
        t = self.tensors
        W, U, b = t[f"layers.{l}.W"], t[f"layers.{l}.U"], t[f"layers.{l}.b"]
        if self.cell == "lstm":
            return LSTMParams(W, U, b)
        return SimpleRNNParams(W, U, b, self.activation)

    def names(self):
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.cell, self.vocab, self.d_emb, self.d_hidden, self.activation,
                           {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.cell, self.vocab, self.d_emb, self.d_hidden, self.activation)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cell, self.vocab, self.d_emb, self.d_hidden, self.activation,
                           {k: v.astype(dtype) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def meta(self) -> dict:
        return {"cell": self.cell, "vocab": self.vocab, "d_emb": self.d_emb,
                "d_hidden": list(self.d_hidden), "activation": self.activation}


def init_model(cell: str, vocab: int, d_emb: int, d_hidden, rng: SeededRng,
               scale: float = 0.1, activation: str = "tanh") -> ModelParams:
    """Weights i.i.d. uniform on ``[-scale, scale]``, biases zero."""
    p = ModelParams(cell, vocab, d_emb, tuple(d_hidden), activation)
    for name, shape in p.shapes().items():
        if name.endswith(".b"):
            continue
        p.tensors[name] = rng.uniform(shape, -scale, scale)
    return p


@dataclass
class HiddenStates:
    h: list
    c: list | None = None

    @classmethod
    def zeros(cls, params: ModelParams, batch: int) -> "HiddenStates":
        dt = params.tensors["embedding"].dtype
        h = [np.zeros((batch, d), dtype=dt) for d in params.d_hidden]
        c = [np.zeros((batch, d), dtype=dt) for d in params.d_hidden] if params.cell == "lstm" else None
        return cls(h, c)

    def copy(self) -> "HiddenStates":
        return HiddenStates([a.copy() for a in self.h], None if self.c is None else [a.copy() for a in self.c])

    def select(self, rows) -> "HiddenStates":
        return HiddenStates([a[rows] for a in self.h], None if self.c is None else [a[rows] for a in self.c])

    def flat(self) -> np.ndarray:
        """Per-row concatenation of every layer's state (``c`` before ``h``)."""
        parts = []
        for l in range(len(self.h)):
            if self.c is not None:
                parts.append(self.c[l])
            parts.append(self.h[l])
        return np.concatenate(parts, axis=-1)


@dataclass
class Tape:
    """Everything the backward sweep needs for one forward window.

    ``entries[t][l]`` is the cell record for step ``t`` and layer ``l``;
    ``dlogits[t]`` is ``softmax - onehot`` for steps carrying a loss and
    ``None`` otherwise.
    """

    tokens: np.ndarray
    entries: list
    h_top: list
    dlogits: list

    def __len__(self):
        return len(self.entries)


def _as_batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[:, None]
    return tokens.astype(np.int64)


def _check_tokens(tokens, vocab, what):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"{what} token id out of range for vocab {vocab}")


def forward_window(x_tokens, h0: HiddenStates | None, params: ModelParams, targets,
                   loss_from: int = 0):
    """Run the model over a window of tokens.

    ``x_tokens`` and ``targets`` are ``(n,)`` or ``(n, batch)``. Steps before
    ``loss_from`` advance the state but carry no loss. Returns
    ``(losses, tape, hT)`` where ``losses`` is ``(n, batch)`` with zeros on
    loss-free steps.
    """
    x = _as_batch(x_tokens)
    y = _as_batch(targets)
    if x.shape != y.shape:
        raise ValueError("inputs and targets must have the same length")
    _check_tokens(x, params.vocab, "input")
    _check_tokens(y[loss_from:], params.vocab, "target")
    n, batch = x.shape
    if h0 is None:
        h0 = HiddenStates.zeros(params, batch)
    layers = [params.layer(l) for l in range(params.n_layers)]
    E = params.tensors["embedding"]
    V, vb = params.tensors["output.W"], params.tensors["output.b"]
    h = list(h0.h)
    c = list(h0.c) if h0.c is not None else None
    rows = np.arange(batch)
    losses = np.zeros((n, batch), dtype=E.dtype)
    entries, h_top, dlogits = [], [], []
    for t in range(n):
        inp = E[x[t]]
        step = []
        for l, p in enumerate(layers):
            if c is not None:
                c[l], h[l], e = lstm_step(c[l], h[l], inp, p, check=False)
            else:
                h[l], e = simple_rnn_step(h[l], inp, p, check=False)
            step.append(e)
            inp = h[l]
        entries.append(step)
        h_top.append(inp)
        if t >= loss_from:
            logp = log_softmax(inp @ V.T + vb)
            losses[t] = -logp[rows, y[t]]
            d = np.exp(logp)
            d[rows, y[t]] -= 1.0
            dlogits.append(d)
        else:
            dlogits.append(None)
    return losses, Tape(x, entries, h_top, dlogits), HiddenStates(h, c)


def sequence_losses(params: ModelParams, x_tokens, targets, h0: HiddenStates | None = None,
                    chunk: int = 2000):
    """Per-token losses over a full sequence, without recording a tape.

    The recurrence runs step by step; the output head is applied in chunks.
    Returns ``(losses, hT)``.
    """
    x = _as_batch(x_tokens)
    y = _as_batch(targets)
    _check_tokens(x, params.vocab, "input")
    _check_tokens(y, params.vocab, "target")
    n, batch = x.shape
    state = h0 if h0 is not None else HiddenStates.zeros(params, batch)
    layers = [params.layer(l) for l in range(params.n_layers)]
    E = params.tensors["embedding"]
    V, vb = params.tensors["output.W"], params.tensors["output.b"]
    h = list(state.h)
    c = list(state.c) if state.c is not None else None
    out = np.empty((n, batch), dtype=E.dtype)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        tops = np.empty((stop - start, batch, V.shape[1]), dtype=E.dtype)
        for t in range(start, stop):
            inp = E[x[t]]
            for l, p in enumerate(layers):
                if c is not None:
                    c[l], h[l], _ = lstm_step(c[l], h[l], inp, p, check=False)
                else:
                    h[l], _ = simple_rnn_step(h[l], inp, p, check=False)
                inp = h[l]
            tops[t - start] = inp
        logp = log_softmax(tops @ V.T + vb)
        out[start:stop] = -np.take_along_axis(logp, y[start:stop, :, None], axis=2)[..., 0]
    return out, HiddenStates(h, c)


# checkpoint layout: one JSON header line, then raw little-endian float64
# data for each tensor in header order (row-major)
_MAGIC = b"ADAPTBPTT-CKPT v1\n"


def save_checkpoint(path, params: ModelParams) -> None:
    header = dict(params.meta())
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for v in params.tensors.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        if f.readline() != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        header = json.loads(f.readline())
        tensors = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"truncated checkpoint at tensor {spec['name']}")
            tensors[spec["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return ModelParams(header["cell"], header["vocab"], header["d_emb"], tuple(header["d_hidden"]),
                       header["activation"], tensors)

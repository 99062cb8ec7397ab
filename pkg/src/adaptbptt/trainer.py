"""Streaming truncated-BPTT training with per-epoch adaptive truncation."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .backprop import GradAccumulator, GradNormProfile, bptt, grad_norm_profile, write_profile_csv
from .cells import HiddenStates, ModelParams, forward_window, save_checkpoint, sequence_losses
from .numeric import SeededRng
from .tasks import LabeledSequence, perplexity
from .truncation import TruncationSelection, default_tau, truncation_from_profile, write_bias_table_csv

log = logging.getLogger(__name__)

EPOCH_FIELDS = ["epoch", "mode", "K_n", "beta_hat", "delta_hat_at_Kn", "train_loss",
                "valid_ppl", "test_ppl", "wallclock_s"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "adaptive"
    delta: float = 0.5
    K: int = 15
    gamma: float = 1.0
    schedule: str = "constant"
    S: int = 64
    R: int = 100
    K0: int = 15
    K_min: int = 2
    K_max: int = 100
    epochs: int = 25
    adapt_per_epoch: int = 1
    warmup_epochs: int = 0
    tau_hat: int | None = None
    estimator: str = "regression"
    profile_batch: int | None = None
    diagnostics: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"mode must be 'adaptive' or 'fixed', got {self.mode!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.schedule not in ("constant", "inverse-sqrt"):
            raise ValueError(f"unknown stepsize schedule {self.schedule!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.S < 1 or self.epochs < 0 or self.adapt_per_epoch < 1 or self.warmup_epochs < 0:
            raise ValueError("S, adapt_per_epoch must be positive; epochs, warmup_epochs nonnegative")
        if self.mode == "adaptive" and not 1 <= self.K_min <= self.K0 <= self.K_max <= self.R:
            raise ValueError("need 1 <= K_min <= K0 <= K_max <= R")
        if self.tau_hat is not None and not 0 <= self.tau_hat < self.R:
            raise ValueError("tau_hat must lie in [0, R)")
        if self.estimator not in ("regression", "max-slope"):
            raise ValueError(f"unknown estimator {self.estimator!r}")


@dataclass
class StreamState:
    carry: HiddenStates
    cursor: int = 0


@dataclass
class EpochStats:
    epoch: int
    mode: str
    K_n: int
    beta_hat: float = math.nan
    delta_hat_at_Kn: float = math.nan
    train_loss: float = math.nan
    valid_ppl: float = math.nan
    test_ppl: float = math.nan
    wallclock_s: float = 0.0
    clamped: bool = False
    n_loss_terms: int = 0
    n_updates: int = 0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in EPOCH_FIELDS}


def stepsize(n: int, cfg: TrainConfig) -> float:
    if n < 1:
        raise ValueError("epoch index starts at 1")
    if cfg.schedule == "constant":
        return cfg.gamma
    return cfg.gamma / math.sqrt(n)


def partition_streams(tokens, S: int) -> np.ndarray:
    """Split a sequence into ``S`` contiguous equal streams, shape ``(S, T // S)``."""
    tokens = np.asarray(tokens)
    if len(tokens) < S:
        raise ValueError(f"cannot split {len(tokens)} tokens into {S} streams")
    n = len(tokens) // S
    return tokens[: n * S].reshape(S, n)


def streaming_windows(length: int, K: int) -> list:
    """Consecutive ``[start, stop)`` windows of ``K`` steps; a trailing partial window is dropped."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return [(m * K, (m + 1) * K) for m in range(int(length) // K)]


def sgd_update(params: ModelParams, grads: GradAccumulator, gamma: float, K: int) -> ModelParams:
    """In-place ``theta -= gamma * sqrt(K) * g``."""
    if not grads.all_finite():
        raise TrainingDiverged("non-finite gradient")
    step = gamma * math.sqrt(K)
    for name, arr in params.tensors.items():
        arr -= step * grads[name]
    return params


def _state_before(tape, t: int) -> HiddenStates:
    step = tape.entries[t]
    h = [e.h_prev for e in step]
    c = [e.c_prev for e in step] if hasattr(step[0], "c_prev") else None
    return HiddenStates(h, c)


def run_epoch(params: ModelParams, x_streams, y_streams, state: StreamState, K: int, gamma: float,
              counter=None) -> EpochStats:
    """One pass of BPTT(2K, K) updates over time-major streams ``(length, S)``.

    Each update adds ``K`` new losses; the previous window is re-run with the
    current parameters so every loss is backpropagated at least ``K`` lags
    (the first window of the pass only reaches back to its own start).
    ``counter``, if given, is incremented per loss term at each ``(t, stream)``.
    """
    length = x_streams.shape[0]
    if K > length:
        raise ValueError(f"K={K} exceeds stream length {length}")
    windows = streaming_windows(length, K)
    total, n_terms = 0.0, 0
    prev = None
    for a, b in windows:
        if prev is None:
            start, h0 = a, state.carry
        else:
            start, h0 = prev
        losses, tape, hT = forward_window(x_streams[start:b], h0, params, y_streams[start:b],
                                          loss_from=a - start)
        window_loss = losses[a - start:]
        if not np.all(np.isfinite(window_loss)):
            raise TrainingDiverged(f"non-finite loss in window [{a}, {b})")
        total += float(window_loss.sum())
        n_terms += window_loss.size
        if counter is not None:
            counter[a:b] += 1
        grads = bptt(params, tape, min(2 * K, b - start), K)
        sgd_update(params, grads, gamma, K)
        prev = (a, _state_before(tape, a - start))
        state.carry = hT
        state.cursor = b
    return EpochStats(0, "", K, train_loss=total / max(n_terms, 1), n_loss_terms=n_terms,
                      n_updates=len(windows))


def adapt_truncation(params: ModelParams, data: LabeledSequence, cfg: TrainConfig, rng: SeededRng,
                     delta: float | None = None, K_min: int | None = None, K_max: int | None = None):
    """Profile gradient norms on a random minibatch and pick the truncation.

    Returns ``(selection, profile)``.
    """
    n_prof = cfg.profile_batch or cfg.S
    span = 2 * cfg.R
    if len(data) < span:
        raise ValueError(f"need at least {span} tokens to profile with R={cfg.R}")
    idx = (span - 1) + rng.integers(len(data) - span + 1, n_prof)
    profile = grad_norm_profile(params, data.inputs, data.targets, idx, cfg.R, burn_in=cfg.R)
    sel = truncation_from_profile(
        profile,
        cfg.delta if delta is None else delta,
        cfg.K_min if K_min is None else K_min,
        cfg.K_max if K_max is None else K_max,
        tau_hat=cfg.tau_hat if cfg.tau_hat is not None else default_tau(cfg.R),
        method=cfg.estimator,
    )
    return sel, profile


def evaluate(params: ModelParams, data: LabeledSequence) -> float:
    """Perplexity from a single untruncated forward pass over the whole sequence."""
    losses, _ = sequence_losses(params, data.inputs, data.targets)
    return perplexity(losses)


@dataclass
class TrainResult:
    history: list
    best_params: ModelParams
    best_valid_ppl: float
    test_ppl_at_best: float
    selections: list = field(default_factory=list)


def _write_epoch_row(path, stats: EpochStats, first: bool):
    with open(path, "w" if first else "a", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=EPOCH_FIELDS)
        if first:
            w.writeheader()
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in stats.row().items()})


def train(params: ModelParams, train_data: LabeledSequence, valid: LabeledSequence | None,
          test: LabeledSequence | None, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Adaptive (or fixed) truncated BPTT training.

    ``params`` is updated in place. When ``out_dir`` is given, writes
    ``epochs.csv``, one ``bias_epochNNN_J.csv`` and ``profile_epochNNN_J.csv``
    per adaptation event, and ``best.ckpt``.
    """
    x = partition_streams(train_data.inputs, cfg.S).T
    y = partition_streams(train_data.targets, cfg.S).T
    length = x.shape[0]
    state = StreamState(HiddenStates.zeros(params, cfg.S))
    prof_rng = SeededRng(cfg.seed).spawn(0xADA97)
    K_n = cfg.K if cfg.mode == "fixed" else cfg.K0
    history, selections = [], []
    best_valid, test_at_best, best_params = math.inf, math.nan, params.copy()
    epochs_csv = os.path.join(out_dir, "epochs.csv") if out_dir else None

    for n in range(1, cfg.epochs + 1):
        gamma = stepsize(n, cfg)
        t0 = time.perf_counter()
        # adaptation events split the pass into equal chunks of windows
        chunks = cfg.adapt_per_epoch
        bounds = np.linspace(0, length, chunks + 1).astype(int)
        total, terms, updates = 0.0, 0, 0
        beta_hat, delta_hat, clamped = math.nan, math.nan, False
        for j in range(chunks):
            if cfg.diagnostics or cfg.mode == "adaptive":
                sel, profile = adapt_truncation(params, train_data, cfg, prof_rng,
                                                K_min=min(cfg.K_min, cfg.R), K_max=min(cfg.K_max, cfg.R))
                if cfg.mode == "adaptive" and n > cfg.warmup_epochs:
                    K_n = sel.K_selected
                    clamped = sel.clamped
                    if sel.clamped:
                        log.warning("epoch %d: no K in [%d, %d] reaches delta=%g; using K_max",
                                    n, cfg.K_min, cfg.K_max, cfg.delta)
                selections.append((n, j, sel))
                beta_hat = float(sel.table.decay.beta_hat)
                delta_hat = float(sel.table.Delta_hat[K_n]) if K_n < len(sel.table.Delta_hat) else math.nan
                if out_dir:
                    write_bias_table_csv(os.path.join(out_dir, f"bias_epoch{n:03d}_{j}.csv"), sel.table)
                    write_profile_csv(os.path.join(out_dir, f"profile_epoch{n:03d}_{j}.csv"), profile)
            lo, hi = bounds[j], bounds[j + 1]
            if hi - lo < K_n:
                continue
            st = run_epoch(params, x[lo:hi], y[lo:hi], state, K_n, gamma)
            total += st.train_loss * st.n_loss_terms
            terms += st.n_loss_terms
            updates += st.n_updates
        wall = time.perf_counter() - t0
        stats = EpochStats(n, cfg.mode, K_n, beta_hat, delta_hat, total / max(terms, 1),
                           wallclock_s=wall, clamped=clamped, n_loss_terms=terms, n_updates=updates)
        if valid is not None:
            stats.valid_ppl = evaluate(params, valid)
        if test is not None:
            stats.test_ppl = evaluate(params, test)
        if not math.isnan(stats.valid_ppl) and stats.valid_ppl < best_valid:
            best_valid, test_at_best, best_params = stats.valid_ppl, stats.test_ppl, params.copy()
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "best.ckpt"), best_params)
        history.append(stats)
        if epochs_csv:
            _write_epoch_row(epochs_csv, stats, first=(n == 1))
        log.info("epoch %d K=%d beta=%.4f delta_hat=%.4f loss=%.4f valid=%.4f test=%.4f (%.1fs)",
                 n, K_n, beta_hat, delta_hat, stats.train_loss, stats.valid_ppl, stats.test_ppl, wall)
    return TrainResult(history, best_params, best_valid, test_at_best, selections)

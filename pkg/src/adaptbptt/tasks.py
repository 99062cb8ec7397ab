"""Synthetic copy-task data, perplexity, and a biased-gradient SGD testbed."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .numeric import SeededRng


@dataclass
class CopyConfig:
    """Copy task over ``I`` data symbols plus blank (id ``I``) and start-recall (id ``I+1``)."""

    I: int = 6
    m_low: int = 10
    m_high: int = 10
    T: int = 64_000
    seed: int = 0

    def __post_init__(self):
        if self.I < 1:
            raise ValueError("need at least one data symbol")
        if not 1 <= self.m_low <= self.m_high:
            raise ValueError("need 1 <= m_low <= m_high")
        if self.T < 2 * self.m_low:
            raise ValueError(f"T={self.T} is too short for a single block")

    @property
    def vocab(self) -> int:
        return self.I + 2

    @property
    def blank(self) -> int:
        return self.I

    @property
    def recall(self) -> int:
        return self.I + 1


@dataclass
class LabeledSequence:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.inputs)


def copy_block(symbols, I: int):
    """Input and target of one block holding the data ``symbols``."""
    sym = np.asarray(symbols, dtype=np.int64)
    m = len(sym)
    if m < 1 or sym.min() < 0 or sym.max() >= I:
        raise ValueError("a block needs at least one data symbol in [0, I)")
    x = np.full(2 * m, I, dtype=np.int64)
    y = np.full(2 * m, I, dtype=np.int64)
    x[:m] = sym
    x[m] = I + 1
    y[m:] = sym
    return x, y


def gen_copy(cfg: CopyConfig) -> LabeledSequence:
    """Concatenated copy blocks, cut to exactly ``cfg.T`` tokens.

    A block with memory ``m`` has input ``[d_1..d_m, RECALL, BLANK * (m-1)]``
    and target ``[BLANK * m, d_1..d_m]``. ``m`` is redrawn per block when
    ``m_low < m_high``.
    """
    rng = SeededRng(cfg.seed)
    n_blocks = cfg.T // (2 * cfg.m_low) + 1
    if cfg.m_high > cfg.m_low:
        ms = cfg.m_low + rng.integers(cfg.m_high - cfg.m_low + 1, n_blocks)
    else:
        ms = np.full(n_blocks, cfg.m_low)
    n_blocks = int(np.searchsorted(np.cumsum(2 * ms), cfg.T)) + 1
    ms = ms[:n_blocks]
    data = rng.integers(cfg.I, int(ms.sum()))
    splits = np.cumsum(ms)[:-1]
    blocks = [copy_block(sym, cfg.I) for sym in np.split(data, splits)]
    x = np.concatenate([b[0] for b in blocks])
    y = np.concatenate([b[1] for b in blocks])
    return LabeledSequence(x[:cfg.T], y[:cfg.T])


def copy_oracle_predictions(inputs, I: int) -> np.ndarray:
    """Causal predictor of copy-task targets from the inputs seen so far.

    Data symbols are buffered; a start-recall token replays the buffer, one
    symbol per step. Where the replay agrees with the targets everywhere, the
    task's minimal achievable perplexity is exactly 1.
    """
    blank, recall = I, I + 1
    out = np.empty(len(inputs), dtype=np.int64)
    buf: list = []
    replay: list = []
    for t, tok in enumerate(np.asarray(inputs)):
        if tok == recall:
            replay = buf
            buf = []
        elif tok != blank:
            if replay:
                # next block started before its recall finished (cut sequence)
                replay = []
            buf.append(int(tok))
        if tok == recall or (tok == blank and replay):
            out[t] = replay.pop(0) if replay else blank
        else:
            out[t] = blank
    return out


def perplexity(losses) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("perplexity of an empty loss sequence")
    if not np.all(np.isfinite(losses)):
        raise ValueError("non-finite loss")
    return float(np.exp(losses.mean()))


# ---------------------------------------------------------------------------
# biased SGD testbed


@dataclass
class BiasedLossOracle:
    """``f(theta) = 0.5 ||theta||^2 + a * sum cos(b * theta_i)``.

    Its gradient is ``L``-Lipschitz with ``L = 1 + a b^2``; for ``a b^2 > 1``
    the origin is a local maximum and the loss is non-convex. Stochastic
    gradients are ``(1 - delta) g + sigma * xi`` with standard normal ``xi``,
    so the bias is exactly ``delta ||g||`` (antiparallel to ``g``) and the
    variance is ``sigma^2 d``.
    """

    d: int = 20
    a: float = 0.5
    b: float = 2.0
    delta: float = 0.0
    sigma: float = 1.0
    seed: int = 0
    rng: SeededRng = field(init=False, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise ValueError("delta must lie in [0, 1)")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.rng = SeededRng(self.seed)

    @property
    def L(self) -> float:
        return 1.0 + self.a * self.b ** 2

    @property
    def variance(self) -> float:
        return self.sigma ** 2 * self.d

    def loss(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return float(0.5 * theta @ theta + self.a * np.cos(self.b * theta).sum())

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return theta - self.a * self.b * np.sin(self.b * theta)

    def coord_min(self) -> float:
        """Global minimum of the 1-d summand, located by bisection between stationary points."""
        a, b = self.a, self.b
        q = lambda x: 0.5 * x * x + a * math.cos(b * x)
        dq = lambda x: x - a * b * math.sin(b * x)
        hi = a * b + 1e-9  # stationary points satisfy |x| <= a b
        grid = np.linspace(-hi, hi, 4001)
        vals = grid - a * b * np.sin(b * grid)
        best = min(q(0.0), q(-hi), q(hi))
        for lo_x, hi_x, lo_v, hi_v in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
            if lo_v == 0.0:
                best = min(best, q(lo_x))
            elif lo_v * hi_v < 0:
                best = min(best, q(brentq(dq, lo_x, hi_x, xtol=1e-15)))
        return best

    def loss_min(self) -> float:
        return self.d * self.coord_min()


def biased_gradient(oracle: BiasedLossOracle, theta, noise=None) -> np.ndarray:
    g = oracle.grad(theta)
    xi = oracle.rng.normal(g.shape) if noise is None else noise
    return (1.0 - oracle.delta) * g + oracle.sigma * xi


def stepsize_cap(delta: float, L: float) -> float:
    return (1.0 - delta) / (L * (1.0 + delta) ** 2)


def optimal_constant_stepsize(D_L: float, L: float, sigma2: float, N: int) -> float:
    return math.sqrt(2.0 * D_L / (N * L * sigma2))


def constant_rate_bound(D_L: float, L: float, sigma2: float, N: int, delta: float) -> float:
    """Guarantee on ``min_n ||g||^2`` at the optimal constant stepsize."""
    return math.sqrt(8.0 * D_L * L * sigma2 / N) / (1.0 - delta)


@dataclass
class SGDRun:
    grad_sq: np.ndarray
    gammas: np.ndarray
    D_L: float
    bound: float
    cap_ok: bool

    @property
    def min_grad_sq(self) -> float:
        return float(self.grad_sq.min())


def run_biased_sgd(oracle: BiasedLossOracle, theta0, schedule, N: int) -> SGDRun:
    """SGD ``theta <- theta - gamma_n * ghat(theta)`` for ``N`` steps.

    ``schedule`` is a callable ``n -> gamma_n`` (``n`` from 1) or an array of
    ``N`` stepsizes. ``grad_sq[n-1] = ||g(theta_n)||^2`` for ``n = 1..N+1``.
    The run is flagged (``cap_ok=False``) when a stepsize exceeds
    ``(1 - delta) / (L (1 + delta)^2)``.
    """
    if callable(schedule):
        gammas = np.array([schedule(n) for n in range(1, N + 1)], dtype=np.float64)
    else:
        gammas = np.asarray(schedule, dtype=np.float64)
        if gammas.shape != (N,):
            raise ValueError("schedule array must hold N stepsizes")
    theta = np.array(theta0, dtype=np.float64)
    D_L = oracle.loss(theta) - oracle.loss_min()
    noise = oracle.rng.normal((N, oracle.d))
    keep = 1.0 - oracle.delta
    ab, b, a_sig = oracle.a * oracle.b, oracle.b, oracle.sigma
    grad_sq = np.empty(N + 1)
    for n in range(N):
        g = theta - ab * np.sin(b * theta)
        grad_sq[n] = g @ g
        theta -= gammas[n] * (keep * g + a_sig * noise[n])
    g = oracle.grad(theta)
    grad_sq[N] = g @ g
    L = oracle.L
    bound = (2.0 * D_L + L * oracle.variance * np.sum(gammas ** 2)) / (keep * np.sum(gammas))
    cap_ok = bool(np.all(gammas <= stepsize_cap(oracle.delta, L)))
    return SGDRun(grad_sq, gammas, float(D_L), float(bound), cap_ok)


def biased_sgd_sweep(deltas, n_seeds: int, N: int, d: int = 20, a: float = 0.5, b: float = 2.0,
                     sigma: float = 1.5, theta_range: float = 3.0, schedule: str = "optimal-constant",
                     seed: int = 0) -> list:
    """Run biased SGD for every ``(delta, seed)`` pair and compare with the guarantee.

    ``theta_1`` is uniform on ``[-theta_range, theta_range]^d``. With the
    ``optimal-constant`` schedule the stepsize is tuned from the run's own
    ``D_L``; ``inverse-sqrt`` uses ``cap / sqrt(n)``. Returns one dict per run.
    """
    if schedule not in ("optimal-constant", "inverse-sqrt"):
        raise ValueError(f"unknown schedule {schedule!r}")
    root = SeededRng(seed).spawn(0x7E57)
    rows = []
    for delta in deltas:
        for s in range(n_seeds):
            oracle = BiasedLossOracle(d, a, b, delta, sigma, seed=root.next_u64())
            theta0 = oracle.rng.uniform(d, -theta_range, theta_range)
            D_L = oracle.loss(theta0) - oracle.loss_min()
            if schedule == "optimal-constant":
                gammas = np.full(N, optimal_constant_stepsize(D_L, oracle.L, oracle.variance, N))
            else:
                gammas = stepsize_cap(delta, oracle.L) / np.sqrt(np.arange(1, N + 1))
            run = run_biased_sgd(oracle, theta0, gammas, N)
            rate = constant_rate_bound(run.D_L, oracle.L, oracle.variance, N, delta)
            rows.append({"delta": float(delta), "seed": s, "D_L": run.D_L, "gamma_1": float(gammas[0]),
                         "min_grad_sq": run.min_grad_sq, "bound": run.bound, "rate_bound": rate,
                         "cap_ok": run.cap_ok, "violated": bool(run.min_grad_sq > run.bound)})
    return rows

"""Decay-rate estimation and adaptive truncation selection.

Given a batch of backpropagated gradient norms ``phi[s, k]`` this module
fits the geometric decay rate of their mean, turns it into bounds on the
absolute and relative bias of truncating after ``K`` lags, and picks the
smallest ``K`` whose relative-bias bound is below a tolerance.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .backprop import GradNormProfile

log = logging.getLogger(__name__)


@dataclass
class MeanProfile:
    mean_phi: np.ndarray
    count: int

    @property
    def R(self) -> int:
        return len(self.mean_phi) - 1


@dataclass
class DecayEstimate:
    beta_hat: float
    tau_hat: int
    method: str
    R: int
    no_decay: bool = False


@dataclass
class BiasBoundTable:
    """Bias bounds indexed by truncation length ``K = 0..R``."""

    K: np.ndarray
    E_hat: np.ndarray
    Delta_hat: np.ndarray
    grad_norm_proxy: np.ndarray
    decay: DecayEstimate | None = None


@dataclass
class TruncationSelection:
    K_selected: int
    delta_target: float
    clamped: bool
    table: BiasBoundTable | None = None

    @property
    def delta_at_K(self) -> float:
        if self.table is None:
            return math.nan
        return float(self.table.Delta_hat[self.K_selected])


def default_tau(R: int) -> int:
    return (9 * R) // 10


def mean_profile(profile) -> MeanProfile:
    samples = profile.samples if isinstance(profile, GradNormProfile) else np.asarray(profile, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0 or samples.shape[1] == 0:
        raise ValueError("empty gradient-norm profile")
    return MeanProfile(samples.mean(axis=0), samples.shape[0])


def _log_window(mp: MeanProfile, tau_hat: int, R: int):
    if not 0 <= tau_hat < R <= mp.R:
        raise ValueError(f"need 0 <= tau_hat < R <= {mp.R}, got tau_hat={tau_hat}, R={R}")
    window = mp.mean_phi[tau_hat:R + 1]
    if np.any(~(window > 0)) or not np.all(np.isfinite(window)):
        return None
    return np.arange(tau_hat, R + 1, dtype=np.float64), np.log(window)


def estimate_beta_max(mp: MeanProfile, tau_hat: int, R: int) -> DecayEstimate:
    """Exponentiated steepest-ascent pairwise slope of ``log mp`` on ``[tau_hat, R]``.

    Under geometric decay every pairwise slope is at most ``log beta``, so the
    largest one is the tightest data-driven upper estimate.
    """
    lw = _log_window(mp, tau_hat, R)
    if lw is None:
        return DecayEstimate(math.inf, tau_hat, "max-slope", R, no_decay=True)
    k, y = lw
    dk = k[None, :] - k[:, None]
    dy = y[None, :] - y[:, None]
    upper = dk > 0
    slope = float(np.max(dy[upper] / dk[upper]))
    beta = math.exp(slope)
    return DecayEstimate(beta, tau_hat, "max-slope", R, no_decay=beta >= 1.0)


def estimate_beta_regression(mp: MeanProfile, tau_hat: int, R: int) -> DecayEstimate:
    """``exp`` of the least-squares slope of ``log mp`` against lag on ``[tau_hat, R]``."""
    lw = _log_window(mp, tau_hat, R)
    if lw is None:
        return DecayEstimate(math.inf, tau_hat, "regression", R, no_decay=True)
    k, y = lw
    kc = k - k.mean()
    slope = float(np.dot(kc, y - y.mean()) / np.dot(kc, kc))
    beta = math.exp(slope)
    return DecayEstimate(beta, tau_hat, "regression", R, no_decay=beta >= 1.0)


def estimate_beta(mp: MeanProfile, tau_hat: int, R: int, method: str = "regression") -> DecayEstimate:
    if method == "regression":
        return estimate_beta_regression(mp, tau_hat, R)
    if method == "max-slope":
        return estimate_beta_max(mp, tau_hat, R)
    raise ValueError(f"unknown decay estimator {method!r}")


def absolute_bias_bound(mp: MeanProfile, de: DecayEstimate, K: int) -> float:
    """Bound on the absolute truncation bias, in units of the parameter-Jacobian bound."""
    beta, tau = de.beta_hat, de.tau_hat
    if de.no_decay or not beta < 1.0:
        return math.inf
    phi = mp.mean_phi
    tail = phi[tau] / (1.0 - beta)
    if K >= tau:
        return float(tail * beta ** (K - tau))
    return float(phi[K + 1:tau].sum() + tail)


def _bias_arrays(mp: MeanProfile, de: DecayEstimate, K_max: int):
    Ks = np.arange(K_max + 1)
    E = np.array([absolute_bias_bound(mp, de, int(k)) for k in Ks])
    proxy = np.cumsum(mp.mean_phi[:K_max + 1])
    # running max of the lower bound on ||g||; -inf minus inf stays -inf
    D = np.maximum.accumulate(proxy - E)
    with np.errstate(divide="ignore", invalid="ignore"):
        delta = np.where(D > 0, E / np.where(D > 0, D, 1.0), math.inf)
    return Ks, E, delta, proxy


def relative_bias_bound(mp: MeanProfile, de: DecayEstimate, K: int) -> float:
    """``E(K) / max_{k<=K} (sum_{j<=k} mp[j] - E(k))``, or ``inf`` if that is not positive."""
    return float(_bias_arrays(mp, de, K)[2][K])


def bias_bound_table(mp: MeanProfile, de: DecayEstimate, K_max: int | None = None) -> BiasBoundTable:
    K_max = mp.R if K_max is None else K_max
    Ks, E, delta, proxy = _bias_arrays(mp, de, K_max)
    return BiasBoundTable(Ks, E, delta, proxy, de)


def select_truncation(table: BiasBoundTable, delta: float, K_min: int, K_max: int) -> TruncationSelection:
    """Smallest ``K`` in ``[K_min, K_max]`` with ``Delta_hat(K) < delta``, else ``K_max`` (clamped)."""
    if not 1 <= K_min <= K_max <= int(table.K[-1]):
        raise ValueError(f"need 1 <= K_min <= K_max <= {int(table.K[-1])}")
    d = table.Delta_hat[K_min:K_max + 1]
    hits = np.flatnonzero(d < delta)
    if hits.size:
        return TruncationSelection(K_min + int(hits[0]), delta, False, table)
    return TruncationSelection(K_max, delta, True, table)


def truncation_from_profile(profile, delta: float, K_min: int, K_max: int,
                            tau_hat: int | None = None, method: str = "regression") -> TruncationSelection:
    """Profile -> mean -> decay estimate -> bias table -> selection."""
    mp = mean_profile(profile)
    R = mp.R
    tau = default_tau(R) if tau_hat is None else tau_hat
    de = estimate_beta(mp, tau, R, method)
    if de.no_decay:
        log.warning("no geometric decay detected (beta_hat=%s); falling back to K_max=%d", de.beta_hat, K_max)
    table = bias_bound_table(mp, de)
    return select_truncation(table, delta, K_min, K_max)


def write_bias_table_csv(path, table: BiasBoundTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["K", "E_hat", "Delta_hat", "proxy_norm"])
        for k, e, d, p in zip(table.K, table.E_hat, table.Delta_hat, table.grad_norm_proxy):
            w.writerow([int(k), repr(float(e)), repr(float(d)), repr(float(p))])

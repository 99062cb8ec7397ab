import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptbptt.tasks import (BiasedLossOracle, CopyConfig, biased_gradient, constant_rate_bound, copy_block,
                             copy_oracle_predictions, gen_copy, optimal_constant_stepsize, perplexity,
                             run_biased_sgd, stepsize_cap, biased_sgd_sweep)


def render(tokens, I, letters="ABCDEFGH"):
    return "".join("-" if t == I else "#" if t == I + 1 else letters[t] for t in tokens)


def test_worked_example_block():
    # three data symbols A, B, C; blank is id 3, start-recall id 4
    symbols = ["ABC".index(ch) for ch in "ACBBAB"]
    x, y = copy_block(symbols, 3)
    assert render(x, 3) == "ACBBAB#-----"
    assert render(y, 3) == "------ACBBAB"


def test_minimal_block():
    cfg = CopyConfig(I=1, m_low=1, m_high=1, T=2)
    seq = gen_copy(cfg)
    assert render(seq.inputs, 1) == "A#"
    assert render(seq.targets, 1) == "-A"


def _blocks(seq, cfg):
    """Split a sequence at its start-recall tokens into (input, target, m) blocks."""
    x, y = seq.inputs, seq.targets
    recalls = np.flatnonzero(x == cfg.recall)
    out, start = [], 0
    for r in recalls:
        m = r - start
        end = start + 2 * m
        if end > len(x):
            break
        out.append((x[start:end], y[start:end], m))
        start = end
    return out, start


@pytest.mark.parametrize("m_low,m_high", [(10, 10), (5, 10)])
def test_block_structure_scan(m_low, m_high):
    cfg = CopyConfig(I=6, m_low=m_low, m_high=m_high, T=200_000, seed=3)
    seq = gen_copy(cfg)
    assert len(seq) == cfg.T
    blocks, consumed = _blocks(seq, cfg)
    assert len(blocks) >= 10_000
    ms = set()
    for x, y, m in blocks:
        ms.add(m)
        assert len(x) == 2 * m
        assert np.count_nonzero(x == cfg.recall) == 1 and x[m] == cfg.recall
        assert np.all(x[:m] < cfg.I) and np.all(x[m + 1:] == cfg.blank)
        assert np.all(y[:m] == cfg.blank)
        np.testing.assert_array_equal(y[m:], x[:m])
    assert ms == set(range(m_low, m_high + 1))
    assert consumed > cfg.T - 2 * m_high


def test_gen_copy_deterministic():
    a = gen_copy(CopyConfig(T=5000, seed=4, m_low=5))
    b = gen_copy(CopyConfig(T=5000, seed=4, m_low=5))
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert not np.array_equal(a.inputs, gen_copy(CopyConfig(T=5000, seed=5, m_low=5)).inputs)
    assert a.inputs.max() < 8 and a.targets.max() < 8


def test_copy_config_validation():
    assert CopyConfig().vocab == 8
    with pytest.raises(ValueError):
        CopyConfig(I=0)
    with pytest.raises(ValueError):
        CopyConfig(m_low=6, m_high=5)
    with pytest.raises(ValueError):
        CopyConfig(m_low=10, m_high=10, T=19)
    with pytest.raises(ValueError):
        copy_block([0, 7], 6)


@pytest.mark.parametrize("m_low", [10, 5])
def test_copy_task_is_fully_predictable(m_low):
    cfg = CopyConfig(T=20_000, m_low=m_low, seed=1)
    seq = gen_copy(cfg)
    _, complete = _blocks(seq, cfg)
    pred = copy_oracle_predictions(seq.inputs, cfg.I)
    np.testing.assert_array_equal(pred[:complete], seq.targets[:complete])
    # a predictor that is certain where it is right has perplexity exactly 1
    assert perplexity(np.where(pred[:complete] == seq.targets[:complete], 0.0, np.inf)) == 1.0


def test_perplexity():
    assert perplexity(np.zeros(10)) == 1.0
    assert perplexity(np.full(7, math.log(8))) == pytest.approx(8.0, rel=1e-15)
    losses = np.random.default_rng(0).exponential(size=1001)
    assert abs(perplexity(losses) - math.exp(sum(losses) / len(losses))) <= 1e-12
    with pytest.raises(ValueError):
        perplexity([])
    with pytest.raises(ValueError):
        perplexity([1.0, np.nan])


def test_oracle_constants():
    o = BiasedLossOracle()
    assert o.L == 3.0
    xs = np.linspace(-10, 10, 200_001)
    f2 = 1 - o.a * o.b ** 2 * np.cos(o.b * xs)
    assert f2.max() == pytest.approx(o.L, abs=1e-9)
    assert f2[len(xs) // 2] < 0  # origin is a local maximum: non-convex
    q = 0.5 * xs ** 2 + o.a * np.cos(o.b * xs)
    assert o.coord_min() <= q.min() + 1e-12
    assert o.coord_min() == pytest.approx(q.min(), abs=1e-8)
    assert o.loss_min() == pytest.approx(20 * o.coord_min())
    theta = np.random.default_rng(1).normal(size=20)
    eps = 1e-6
    fd = np.array([(o.loss(theta + eps * e) - o.loss(theta - eps * e)) / (2 * eps) for e in np.eye(20)])
    np.testing.assert_allclose(o.grad(theta), fd, atol=1e-7)
    with pytest.raises(ValueError):
        BiasedLossOracle(delta=1.0)
    with pytest.raises(ValueError):
        BiasedLossOracle(sigma=-1.0)


def test_biased_gradient_exact_cases():
    theta = np.random.default_rng(2).normal(size=20)
    exact = BiasedLossOracle(delta=0.0, sigma=0.0)
    np.testing.assert_array_equal(biased_gradient(exact, theta), exact.grad(theta))
    half = BiasedLossOracle(delta=0.5, sigma=0.0)
    g = half.grad(theta)
    ghat = biased_gradient(half, theta)
    np.testing.assert_allclose(ghat, g / 2, rtol=1e-15)
    assert np.linalg.norm(ghat - g) / np.linalg.norm(g) == pytest.approx(0.5, rel=1e-14)


def test_biased_gradient_monte_carlo():
    o = BiasedLossOracle(d=5, delta=0.3, sigma=0.1, seed=7)
    theta = np.array([0.3, -1.0, 2.0, 0.0, 1.5])
    samples = np.array([biased_gradient(o, theta) for _ in range(100_000)])
    se = samples.std(axis=0, ddof=1) / math.sqrt(len(samples))
    assert np.all(np.abs(samples.mean(axis=0) - 0.7 * o.grad(theta)) <= 3 * se)
    assert np.sum(samples.var(axis=0)) == pytest.approx(o.variance, rel=0.02)


def test_sgd_quadratic_noiseless():
    o = BiasedLossOracle(d=5, a=0.0, delta=0.0, sigma=0.0)
    run = run_biased_sgd(o, np.arange(1.0, 6.0), lambda n: 0.5, 100)
    assert np.all(np.diff(run.grad_sq) < 0)
    assert run.grad_sq[-1] < 1e-10
    assert run.cap_ok


def test_sgd_cap_flag_and_schedule_checks():
    o = BiasedLossOracle(delta=0.5)
    assert stepsize_cap(0.5, o.L) == pytest.approx(0.5 / (3 * 2.25))
    run = run_biased_sgd(o, np.zeros(20), np.full(10, 0.5), 10)
    assert not run.cap_ok
    with pytest.raises(ValueError):
        run_biased_sgd(o, np.zeros(20), np.full(9, 0.01), 10)


def test_rate_bound_matches_general_bound():
    D, L, s2, N, delta = 12.0, 3.0, 45.0, 10_000, 0.25
    g = optimal_constant_stepsize(D, L, s2, N)
    general = (2 * D + L * s2 * N * g * g) / ((1 - delta) * N * g)
    assert constant_rate_bound(D, L, s2, N, delta) == pytest.approx(general, rel=1e-13)


def test_nonconvex_testbed_bound_small_sweep():
    rows = biased_sgd_sweep([0.0, 0.5, 0.9], n_seeds=3, N=10_000)
    assert len(rows) == 9
    for r in rows:
        assert r["cap_ok"]
        assert not r["violated"]
        assert r["min_grad_sq"] <= r["rate_bound"]
        assert r["bound"] == pytest.approx(r["rate_bound"], rel=1e-12)


def test_inverse_sqrt_rate_trend():
    # averaged squared gradient along the run should fall roughly like log(n)/sqrt(n)
    Ns = np.array([250, 500, 1000, 2000, 4000, 8000])
    o = BiasedLossOracle(delta=0.5, sigma=1.5, seed=11)
    curves = []
    for rep in range(8):
        theta0 = o.rng.uniform(20, -3.0, 3.0)
        gam = stepsize_cap(0.5, o.L) * 20 / np.sqrt(np.arange(1, Ns[-1] + 1))
        run = run_biased_sgd(o, theta0, gam, Ns[-1])
        w = np.cumsum(gam * run.grad_sq[:-1]) / np.cumsum(gam)
        curves.append(w[Ns - 1])
    avg = np.mean(curves, axis=0)
    slope = np.polyfit(np.log(Ns), np.log(avg), 1)[0]
    assert -1.0 < slope < -0.25


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from([0.0, 0.25, 0.5, 0.75, 0.9]))
def test_bias_is_exactly_relative(seed, delta):
    o = BiasedLossOracle(delta=delta, sigma=0.0, seed=seed)
    theta = o.rng.uniform(20, -3, 3)
    g = o.grad(theta)
    np.testing.assert_allclose(np.linalg.norm(biased_gradient(o, theta) - g), delta * np.linalg.norm(g),
                               rtol=1e-12)

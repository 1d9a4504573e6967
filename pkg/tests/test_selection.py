import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtri

from exprelay.core import (
    ConfigError,
    Experience,
    ExperienceCodec,
    SelectionConfig,
    SelectionStrategy,
)
from exprelay.sharing import (
    MIN_WINDOW_FILL,
    ExperienceSelector,
    RelayChannel,
    WindowStats,
    inverse_normal_cdf,
    should_share_gaussian,
    should_share_quantile,
    should_share_stochastic,
)

OBS_DIM = 3


def make_exp(tag: float, origin: int = 0) -> Experience:
    obs = np.full(OBS_DIM, np.float32(tag))
    return Experience(obs=obs, action=1, reward=tag, next_obs=obs, done=False,
                      origin_agent=origin)


def filled_window(values, k=None) -> WindowStats:
    stats = WindowStats(k if k is not None else max(1, len(values)))
    for v in values:
        stats.push(v)
    return stats


# -- window statistics -----------------------------------------------------

def test_window_mean_variance_match_numpy():
    values = [0.3, 1.7, 0.0, 2.4, 0.9]
    stats = filled_window(values, k=8)
    assert stats.count == 5
    assert stats.mean() == pytest.approx(np.mean(values), rel=1e-12)
    assert stats.variance() == pytest.approx(np.var(values), rel=1e-12)
    assert stats.std() == pytest.approx(np.std(values), rel=1e-12)


def test_window_evicts_oldest_when_full():
    stats = filled_window([10.0, 1.0, 2.0, 3.0], k=3)
    np.testing.assert_array_equal(np.sort(stats.values()), [1.0, 2.0, 3.0])
    assert stats.mean() == pytest.approx(2.0)


@given(st.lists(st.floats(0, 1e4), min_size=1, max_size=50), st.integers(1, 12))
@settings(max_examples=200, deadline=None)
def test_window_running_sums_match_recompute(values, k):
    stats = filled_window(values, k=k)
    tail = np.array(values[-k:])
    assert stats.mean() == pytest.approx(tail.mean(), rel=1e-9, abs=1e-9)
    # sum-of-squares cancellation loses precision proportional to mean^2
    tol = 1e-10 * (1.0 + float(tail.mean()) ** 2)
    assert stats.variance() == pytest.approx(np.var(tail), rel=1e-9, abs=tol)


def test_window_rejects_empty_queries_and_bad_size():
    stats = WindowStats(4)
    with pytest.raises(ConfigError):
        stats.mean()
    with pytest.raises(ConfigError):
        stats.variance()
    with pytest.raises(ConfigError):
        WindowStats(0)


# -- inverse normal cdf ----------------------------------------------------

def test_inverse_normal_cdf_against_scipy():
    grid = np.linspace(0.001, 0.999, 997)
    errors = [abs(inverse_normal_cdf(p) - ndtri(p)) for p in grid]
    assert max(errors) <= 4.5e-4


def test_inverse_normal_cdf_edges():
    assert inverse_normal_cdf(0.5) == 0.0
    assert inverse_normal_cdf(0.0) == -math.inf
    assert inverse_normal_cdf(1.0) == math.inf
    assert inverse_normal_cdf(0.975) == pytest.approx(1.959964, abs=4.5e-4)


# -- quantile rule ---------------------------------------------------------

def test_quantile_threshold_is_mth_largest():
    # ten values 0.1..1.0, beta 0.2 -> m=2 -> threshold 0.9, ties share
    stats = filled_window([v / 10 for v in range(1, 11)])
    assert should_share_quantile(stats, 0.9, 0.2)
    assert should_share_quantile(stats, 0.95, 0.2)
    assert not should_share_quantile(stats, 0.89, 0.2)


def test_quantile_full_bandwidth_and_empty_window():
    stats = filled_window([5.0, 6.0])
    assert should_share_quantile(stats, 0.0, 1.0)
    assert not should_share_quantile(WindowStats(4), 100.0, 0.5)


def test_quantile_monotone_in_beta_and_td():
    gen = np.random.default_rng(2)
    stats = filled_window(gen.random(50))
    for td in gen.random(20):
        shared = [should_share_quantile(stats, td, b)
                  for b in (0.05, 0.2, 0.5, 0.9, 1.0)]
        # once a smaller beta shares, every larger beta must share too
        assert shared == sorted(shared)
    for beta in (0.1, 0.4):
        decisions = [should_share_quantile(stats, td, beta)
                     for td in np.linspace(0, 1, 40)]
        assert decisions == sorted(decisions)


# -- gaussian rule ---------------------------------------------------------

def test_gaussian_median_beta_shares_above_mean():
    stats = filled_window([0.5, 1.5])  # mean 1, variance 0.25
    assert should_share_gaussian(stats, 1.0, 0.5)
    assert should_share_gaussian(stats, 1.2, 0.5)
    assert not should_share_gaussian(stats, 0.99, 0.5)


def test_gaussian_threshold_uses_variance_by_default():
    # beta chosen so the normal quantile c is 1.0: threshold mean + variance
    stats = filled_window([0.5, 1.5])
    beta = 0.15865525393145707
    assert should_share_gaussian(stats, 1.3, beta)
    assert not should_share_gaussian(stats, 1.2, beta)
    # the std form instead thresholds at mean + std = 1.5
    assert not should_share_gaussian(stats, 1.4, beta, use_variance=False)
    assert should_share_gaussian(stats, 1.55, beta, use_variance=False)


def test_gaussian_degenerate_window_and_extreme_betas():
    flat = filled_window([2.0, 2.0, 2.0])
    assert should_share_gaussian(flat, 2.0, 0.3)
    assert not should_share_gaussian(flat, 1.999, 0.3)
    some = filled_window([1.0, 3.0])
    assert not should_share_gaussian(some, 1e9, 0.0)
    assert should_share_gaussian(some, -0.0, 1.0)
    assert not should_share_gaussian(WindowStats(2), 5.0, 0.5)


# -- stochastic rule -------------------------------------------------------

def test_stochastic_equal_window_shares_at_beta():
    stats = filled_window([1.0] * 40)
    rng = np.random.default_rng(0)
    draws = 20_000
    hits = sum(should_share_stochastic(stats, 1.0, 0.3, 0.6, rng)
               for _ in range(draws))
    assert hits / draws == pytest.approx(0.3, abs=0.01)


def test_stochastic_full_beta_on_equal_window_always_shares():
    stats = filled_window([2.0] * 10)
    rng = np.random.default_rng(1)
    assert all(should_share_stochastic(stats, 2.0, 1.0, 0.6, rng)
               for _ in range(100))


def test_stochastic_truncation_undershoots_target():
    # one dominant value truncates its own probability at 1; the lost mass is
    # not redistributed, so the realized fraction over the stream sits below
    # beta
    values = [100.0] + [0.01] * 99
    stats = filled_window(values)
    rng = np.random.default_rng(3)
    beta, alpha, eps = 0.1, 0.6, 1e-6
    denom = ((np.array(values) + eps) ** alpha).sum()
    prob_small = beta * 100 * (0.01 + eps) ** alpha / denom
    assert prob_small < beta / 2
    hits = sum(should_share_stochastic(stats, 0.01, beta, alpha, rng)
               for _ in range(5000))
    assert hits / 5000 == pytest.approx(prob_small, abs=0.02)
    assert all(should_share_stochastic(stats, 100.0, beta, alpha, rng)
               for _ in range(50))


def test_stochastic_empty_window_never_shares():
    rng = np.random.default_rng(0)
    assert not should_share_stochastic(WindowStats(3), 9.0, 1.0, 0.6, rng)


# -- selector gating -------------------------------------------------------

def quantile_selector(beta=0.5, strategy=SelectionStrategy.QUANTILE, seed=0,
                      k=200):
    cfg = SelectionConfig(strategy=strategy, bandwidth_beta=beta,
                          window_size_k=k)
    return ExperienceSelector(0, cfg, np.random.default_rng(seed))


def test_statistics_rules_wait_for_window_fill():
    channel = RelayChannel(2, ExperienceCodec(OBS_DIM))
    for strategy in (SelectionStrategy.QUANTILE, SelectionStrategy.GAUSSIAN,
                     SelectionStrategy.STOCHASTIC):
        sel = quantile_selector(beta=1.0, strategy=strategy)
        exps = [make_exp(1.0)] * (MIN_WINDOW_FILL - 1)
        assert sel.select_and_relay(exps, [1e9] * len(exps), channel) == 0
        assert sel.select_and_relay([make_exp(1.0)] * 5, [1e9] * 5, channel) >= 4
    assert channel.pending_count(0) == 0


def test_ablation_rules_ignore_window_fill():
    channel = RelayChannel(2, ExperienceCodec(OBS_DIM))
    sel = quantile_selector(strategy=SelectionStrategy.SHARE_ALL)
    assert sel.select_and_relay([make_exp(0.5)], [0.1], channel) == 1
    rng_sel = quantile_selector(beta=1.0, strategy=SelectionStrategy.UNIFORM_RANDOM)
    assert rng_sel.select_and_relay([make_exp(0.5)], [0.1], channel) == 1


def test_uniform_random_shares_near_beta():
    channel = RelayChannel(2, ExperienceCodec(OBS_DIM))
    sel = quantile_selector(beta=0.2, strategy=SelectionStrategy.UNIFORM_RANDOM)
    n = 10_000
    shared = sel.select_and_relay([make_exp(0.0)] * n, [0.0] * n, channel)
    assert shared / n == pytest.approx(0.2, abs=0.015)


def test_none_strategy_is_a_complete_no_op():
    channel = RelayChannel(3, ExperienceCodec(OBS_DIM))
    sel = quantile_selector(strategy=SelectionStrategy.NONE)
    shared = sel.select_and_relay([make_exp(1.0)] * 10, [5.0] * 10, channel)
    assert shared == 0
    assert sel.stats.count == 0
    assert channel.offered[0] == 0
    assert channel.shared[0] == 0
    assert channel.actual_bandwidth(0) == 0.0


def test_selector_validates_inputs():
    channel = RelayChannel(2, ExperienceCodec(OBS_DIM))
    sel = quantile_selector()
    with pytest.raises(ConfigError):
        sel.select_and_relay([make_exp(1.0)], [0.5, 0.5], channel)
    with pytest.raises(ConfigError):
        sel.select_and_relay([make_exp(1.0)], [-0.5], channel)
    with pytest.raises(ConfigError):
        ExperienceSelector(0, SelectionConfig(bandwidth_beta=1.5),
                           np.random.default_rng(0))


def test_quantile_calibration_on_uniform_stream():
    channel = RelayChannel(2, ExperienceCodec(OBS_DIM))
    cfg = SelectionConfig(strategy=SelectionStrategy.QUANTILE,
                          bandwidth_beta=0.1, window_size_k=500)
    sel = ExperienceSelector(0, cfg, np.random.default_rng(0))
    gen = np.random.default_rng(11)
    tds = gen.random(5000)
    shared = sel.select_and_relay([make_exp(0.0)] * 5000, tds, channel)
    realized = shared / 5000
    assert 0.07 <= realized <= 0.13
    assert channel.actual_bandwidth(0) == pytest.approx(realized)


# -- relay channel ---------------------------------------------------------

def test_broadcast_reaches_everyone_but_sender():
    channel = RelayChannel(3, ExperienceCodec(OBS_DIM))
    sel = ExperienceSelector(1, SelectionConfig(strategy=SelectionStrategy.SHARE_ALL),
                             np.random.default_rng(0))
    sel.select_and_relay([make_exp(7.0, origin=1)], [2.5], channel)
    assert channel.pending_count(1) == 0
    for recipient in (0, 2):
        got = channel.drain(recipient)
        assert len(got) == 1
        assert got[0].origin_agent == 1
        assert got[0].td_at_share == pytest.approx(2.5)
        assert got[0].reward == pytest.approx(7.0)
    assert channel.drain(0) == []


def test_drain_order_is_sender_major_then_fifo():
    channel = RelayChannel(4, ExperienceCodec(OBS_DIM))
    # interleave sends from agents 2 and 1; recipient 0 must still see agent
    # 1's records first
    channel.broadcast(2, make_exp(20.0, origin=2))
    channel.broadcast(1, make_exp(10.0, origin=1))
    channel.broadcast(2, make_exp(21.0, origin=2))
    channel.broadcast(1, make_exp(11.0, origin=1))
    rewards = [(e.origin_agent, e.reward) for e in channel.drain(0)]
    assert rewards == [(1, 10.0), (1, 11.0), (2, 20.0), (2, 21.0)]


def test_channel_conservation_and_byte_accounting():
    codec = ExperienceCodec(OBS_DIM)
    channel = RelayChannel(3, codec)
    record_len = len(codec.encode(make_exp(0.0)))
    for i in range(5):
        channel.count_offered(0)
        channel.broadcast(0, make_exp(float(i)))
    assert channel.shared[0] == 5
    assert channel.offered[0] == 5
    assert channel.bytes_shared[0] == 5 * record_len
    assert channel.pending_count(1) + channel.pending_count(2) == 10
    assert channel.actual_bandwidth(0) == 1.0
    assert channel.actual_bandwidth(1) == 0.0


def test_channel_rejects_unknown_agents():
    channel = RelayChannel(2, ExperienceCodec(OBS_DIM))
    with pytest.raises(ConfigError):
        channel.broadcast(2, make_exp(0.0))
    with pytest.raises(ConfigError):
        channel.drain(-1)
    with pytest.raises(ConfigError):
        RelayChannel(0, ExperienceCodec(OBS_DIM))

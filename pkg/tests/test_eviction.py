import math

import numpy as np
import pytest

from fastkv.eviction import (EvictionPolicy, EngineStats, round_half_up,
                             select_retained, evict, prefill_window_size,
                             prefill_chunked, decode_gated, GateScorer,
                             OracleScorer, RandomScorer, RecencyScorer)
from fastkv.gate import init_gate
from fastkv.model import KVCache, forward


def fill_cache(config, n, seed=0, score_window_start=None):
    """Synthetic cache with n entries per head; random scores.

    Entries at positions >= score_window_start keep NaN scores.
    """
    rng = np.random.default_rng(seed)
    cache = KVCache(config)
    for heads in cache.layers:
        for hc in heads:
            hc.append(np.arange(n),
                      rng.normal(size=(n, config.d_head)).astype(np.float32),
                      rng.normal(size=(n, config.d_head)).astype(np.float32))
            scores = rng.uniform(size=n).astype(np.float32)
            if score_window_start is not None:
                scores[score_window_start:] = np.nan
            hc.scores = scores
    cache.next_position = n
    return cache


def test_round_half_up():
    assert round_half_up(0.5) == 1
    assert round_half_up(1.49) == 1
    assert round_half_up(2.5) == 3


def test_policy_validation():
    with pytest.raises(ValueError):
        EvictionPolicy()  # no budget at all
    with pytest.raises(ValueError):
        EvictionPolicy(budget_ratio=0.5, budget_fixed_total=10)
    with pytest.raises(ValueError):
        EvictionPolicy(budget_ratio=1.5)
    with pytest.raises(ValueError):
        EvictionPolicy(budget_fixed_total=10, allocation="other")


def test_select_retained_basic():
    entries = [("a", 0.9, 0, 0, 0), ("b", 0.1, 1, 0, 0), ("c", 0.5, 2, 0, 0)]
    assert select_retained(entries, 2) == {"a", "c"}
    assert select_retained(entries, 0) == set()
    with pytest.raises(ValueError):
        select_retained(entries, 4)


def test_select_retained_tie_breaking():
    # equal scores: higher position wins, then lower layer, then lower head
    entries = [("p3", 0.5, 3, 0, 0), ("p7", 0.5, 7, 0, 0)]
    assert select_retained(entries, 1) == {"p7"}
    entries = [("l1", 0.5, 4, 1, 0), ("l0", 0.5, 4, 0, 0)]
    assert select_retained(entries, 1) == {"l0"}
    entries = [("h2", 0.5, 4, 0, 2), ("h1", 0.5, 4, 0, 1)]
    assert select_retained(entries, 1) == {"h1"}


def test_select_retained_matches_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        entries = [((i,), float(rng.choice([0.1, 0.5, 0.9])),
                    int(rng.integers(20)), int(rng.integers(3)),
                    int(rng.integers(2))) for i in range(n)]
        k = int(rng.integers(0, n + 1))
        got = select_retained(entries, k)
        ranked = sorted(entries, key=lambda e: (-e[1], -e[2], e[3], e[4]))
        assert got == {e[0] for e in ranked[:k]}


def test_evict_ratio_one_is_identity(small_config):
    cache = fill_cache(small_config, 30)
    policy = EvictionPolicy(budget_ratio=1.0)
    event = evict(cache, policy, window_start=25)
    assert event.before == event.after == cache.total_entries()


def test_evict_ratio_half_per_head(small_config):
    cache = fill_cache(small_config, 20)
    policy = EvictionPolicy(budget_ratio=0.5, allocation="uniform")
    evict(cache, policy, window_start=16)
    for heads in cache.layers:
        for hc in heads:
            # round_half_up(0.5 * 20) = 10, >= the 4 window entries
            assert len(hc) == 10
            assert np.all(np.isin([16, 17, 18, 19], hc.positions))


def test_window_never_evicted(small_config):
    cache = fill_cache(small_config, 40)
    # zero out window scores so they'd be first to go if not exempt
    for heads in cache.layers:
        for hc in heads:
            hc.scores[30:] = 0.0
    policy = EvictionPolicy(budget_ratio=0.4, allocation="uniform")
    evict(cache, policy, window_start=30)
    for heads in cache.layers:
        for hc in heads:
            assert np.all(np.isin(np.arange(30, 40), hc.positions))


def test_unscored_entries_are_immune(small_config):
    cache = fill_cache(small_config, 20, score_window_start=15)
    policy = EvictionPolicy(budget_ratio=0.5)
    evict(cache, policy, window_start=15)
    for heads in cache.layers:
        for hc in heads:
            assert np.all(np.isin(np.arange(15, 20), hc.positions))


def test_unscored_outside_window_rejected(small_config):
    cache = fill_cache(small_config, 20, score_window_start=10)
    policy = EvictionPolicy(budget_ratio=0.5)
    with pytest.raises(ValueError, match="unscored"):
        evict(cache, policy, window_start=15)


def test_nonuniform_shifts_budget_between_heads(small_config):
    # head 0 holds uniformly high scores, head 1 uniformly low ones;
    # pooled allocation should keep (almost) all of head 0
    rng = np.random.default_rng(1)
    cache = KVCache(small_config)
    n = 40
    for heads in cache.layers:
        for h, hc in enumerate(heads):
            hc.append(np.arange(n),
                      rng.normal(size=(n, small_config.d_head)).astype(np.float32),
                      rng.normal(size=(n, small_config.d_head)).astype(np.float32))
            lo, hi = (0.8, 1.0) if h == 0 else (0.0, 0.2)
            hc.scores = rng.uniform(lo, hi, size=n).astype(np.float32)
    cache.next_position = n

    pooled = EvictionPolicy(budget_ratio=0.5, allocation="nonuniform",
                            pool_scope="layer")
    evict(cache, pooled, window_start=36)
    # layer budget = 40 of 80; 8 window entries are exempt, the remaining
    # 32 slots all go to head 0's high scorers
    for heads in cache.layers:
        assert len(heads[0]) == 36
        assert len(heads[1]) == 4
        assert len(heads[0]) + len(heads[1]) == round_half_up(0.5 * 2 * n)


def test_uniform_keeps_per_head_quota(small_config):
    cache = fill_cache(small_config, 40, seed=2)
    policy = EvictionPolicy(budget_ratio=0.5, allocation="uniform")
    evict(cache, policy, window_start=36)
    for heads in cache.layers:
        for hc in heads:
            assert len(hc) == 20


def test_fixed_total_budget_per_layer(small_config):
    cache = fill_cache(small_config, 50, seed=3)
    policy = EvictionPolicy(budget_fixed_total=24, decode_window=8)
    evict(cache, policy, window_start=42)
    for l in range(small_config.n_layers):
        assert cache.layer_entry_count(l) == 24


def test_short_context_window_rule():
    policy = EvictionPolicy(budget_ratio=0.5, chunk_size=64,
                            prefill_window=16,
                            short_context_window_fraction=0.02)
    assert prefill_window_size(policy, 40) == math.ceil(0.02 * 40)  # = 1
    assert prefill_window_size(policy, 63) == 2
    assert prefill_window_size(policy, 64) == 16
    assert prefill_window_size(policy, 1000) == 16


def test_prefill_transparent_without_scorer(small_config, small_weights):
    toks = list(np.random.default_rng(4).integers(0, 256, size=50))
    policy = EvictionPolicy(budget_ratio=0.5, chunk_size=16)
    cache, logits, _ = prefill_chunked(small_weights, small_config, None,
                                       toks, policy)
    ref = forward(toks, None, small_weights, small_config)
    assert np.abs(logits - ref.logits[-logits.shape[0]:]).max() < 1e-5
    assert cache.total_entries() == \
        len(toks) * small_config.n_layers * small_config.n_kv_heads


def test_prefill_ratio_one_matches_reference(small_config, small_weights,
                                             small_gate_config):
    toks = list(np.random.default_rng(5).integers(0, 256, size=48))
    policy = EvictionPolicy(budget_ratio=1.0, chunk_size=16)
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    _, gated, _ = prefill_chunked(small_weights, small_config, scorer, toks,
                                  policy)
    _, plain, _ = prefill_chunked(small_weights, small_config, None, toks,
                                  policy)
    assert np.array_equal(gated, plain)


def test_prefill_peak_respects_budget(small_config, small_weights,
                                      small_gate_config):
    toks = list(np.random.default_rng(6).integers(0, 256, size=96))
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    stats_small = EngineStats()
    prefill_chunked(small_weights, small_config, scorer, toks,
                    EvictionPolicy(budget_ratio=0.3, chunk_size=16,
                                   prefill_window=4), stats=stats_small)
    stats_full = EngineStats()
    prefill_chunked(small_weights, small_config, scorer, toks,
                    EvictionPolicy(budget_ratio=1.0, chunk_size=16,
                                   prefill_window=4), stats=stats_full)
    assert all(a <= b for a, b in zip(stats_small.peak_entries,
                                      stats_full.peak_entries))
    assert sum(stats_small.peak_entries) < sum(stats_full.peak_entries)


def test_prefill_gating_event_count(small_config, small_weights,
                                    small_gate_config):
    toks = list(np.random.default_rng(7).integers(0, 256, size=70))
    policy = EvictionPolicy(budget_ratio=0.5, chunk_size=16)
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    _, _, stats = prefill_chunked(small_weights, small_config, scorer, toks,
                                  policy)
    assert stats.gating_events == math.ceil(70 / 16)


def test_decode_matches_plain_at_full_budget(small_config, small_weights,
                                             small_gate_config):
    toks = list(np.random.default_rng(8).integers(0, 256, size=32))
    policy = EvictionPolicy(budget_ratio=1.0, chunk_size=16, decode_buffer=4)
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    cache_g, logits_g, _ = prefill_chunked(small_weights, small_config,
                                           scorer, toks, policy)
    gen_g, _ = decode_gated(small_weights, small_config, scorer, cache_g,
                            logits_g, 12, policy)
    cache_p, logits_p, _ = prefill_chunked(small_weights, small_config,
                                           None, toks, policy)
    gen_p, _ = decode_gated(small_weights, small_config, None, cache_p,
                            logits_p, 12, policy)
    assert gen_g == gen_p


def test_decode_buffer_size_does_not_change_tokens(small_config,
                                                   small_weights,
                                                   small_gate_config):
    # at full budget, gating frequency is an implementation detail
    toks = list(np.random.default_rng(9).integers(0, 256, size=24))
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    outs = []
    for buf in (1, 3, 8):
        policy = EvictionPolicy(budget_ratio=1.0, chunk_size=16,
                                decode_buffer=buf)
        cache, logits, _ = prefill_chunked(small_weights, small_config,
                                           scorer, toks, policy)
        gen, _ = decode_gated(small_weights, small_config, scorer, cache,
                              logits, 10, policy)
        outs.append(gen)
    assert outs[0] == outs[1] == outs[2]


def test_decode_gating_event_count(small_config, small_weights,
                                   small_gate_config):
    toks = list(np.random.default_rng(10).integers(0, 256, size=20))
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    for steps, buf in ((10, 4), (12, 4), (5, 8)):
        policy = EvictionPolicy(budget_ratio=0.8, chunk_size=16,
                                decode_buffer=buf, decode_window=4)
        cache, logits, _ = prefill_chunked(small_weights, small_config,
                                           scorer, toks, policy)
        _, stats = decode_gated(small_weights, small_config, scorer, cache,
                                logits, steps, policy,
                                stats=EngineStats())
        assert stats.gating_events == math.ceil(steps / buf)


def test_decode_fixed_total_bounds_cache(small_config, small_weights,
                                         small_gate_config):
    toks = list(np.random.default_rng(11).integers(0, 256, size=40))
    B = 30
    policy = EvictionPolicy(budget_fixed_total=B, chunk_size=16,
                            decode_buffer=4, decode_window=4)
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    cache, logits, _ = prefill_chunked(small_weights, small_config, scorer,
                                       toks, policy)
    decode_gated(small_weights, small_config, scorer, cache, logits, 25,
                 policy)
    bound = max(B, small_config.n_kv_heads * policy.decode_window)
    for l in range(small_config.n_layers):
        assert cache.layer_entry_count(l) <= bound


def test_decode_rejects_budget_below_window(small_config, small_weights,
                                            small_gate_config):
    policy = EvictionPolicy(budget_fixed_total=4, decode_window=8)
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    cache = KVCache(small_config)
    with pytest.raises(ValueError, match="decode_window"):
        decode_gated(small_weights, small_config, scorer, cache,
                     np.zeros((1, small_config.vocab_size)), 4, policy)


def test_oracle_scorer_lookup():
    targets = np.arange(24, dtype=np.float64).reshape(2, 2, 6) / 24.0
    s = OracleScorer(targets)
    out = s.score(1, None, np.array([0, 5, 100]))
    assert np.allclose(out[0], targets[1, :, 0])
    assert np.allclose(out[1], targets[1, :, 5])
    assert np.allclose(out[2], 1.0)  # beyond the scored range


def test_recency_scorer_monotone():
    s = RecencyScorer(n_kv_heads=2, max_position=100)
    out = s.score(0, None, np.array([3, 50, 99]))
    assert np.all(np.diff(out[:, 0]) > 0)


def test_random_scorer_seeded():
    a = RandomScorer(2, seed=5).score(0, None, np.arange(10))
    b = RandomScorer(2, seed=5).score(0, None, np.arange(10))
    assert np.array_equal(a, b)


def test_evict_fuzz_invariants(small_config):
    """Randomized eviction instances: budget arithmetic and window safety."""
    rng = np.random.default_rng(12)
    n_events = 0
    while n_events < 1000:
        n = int(rng.integers(5, 60))
        window = int(rng.integers(1, n + 1))
        cache = fill_cache(small_config, n, seed=int(rng.integers(1 << 30)))
        if rng.random() < 0.5:
            policy = EvictionPolicy(
                budget_ratio=float(rng.uniform(0.05, 1.0)),
                allocation=str(rng.choice(["uniform", "nonuniform"])),
                pool_scope=str(rng.choice(["global", "layer"])))
        else:
            policy = EvictionPolicy(
                budget_fixed_total=int(rng.integers(1, 2 * n)),
                allocation=str(rng.choice(["uniform", "nonuniform"])))
        event = evict(cache, policy, window_start=n - window)
        n_events += 1
        # the evict() budget assertion ran; window entries must all survive
        assert event.after == event.expected_after
        assert event.after <= event.before
        for heads in cache.layers:
            for hc in heads:
                assert np.all(np.isin(np.arange(n - window, n), hc.positions))
                assert np.all(np.diff(hc.positions) > 0)


def test_prefill_retention_tracks_ratio(small_config, small_weights,
                                        small_gate_config):
    # ratio budgets are relative to all tokens processed, so retention
    # does not decay with the number of chunks
    toks = list(np.random.default_rng(13).integers(0, 256, size=160))
    scorer = GateScorer([init_gate(small_gate_config, s)
                         for s in range(small_config.n_layers)])
    policy = EvictionPolicy(budget_ratio=0.5, chunk_size=32,
                            prefill_window=4, pool_scope="layer")
    cache, _, stats = prefill_chunked(small_weights, small_config, scorer,
                                      toks, policy)
    for l in range(small_config.n_layers):
        kept = cache.layer_entry_count(l)
        expected = round_half_up(0.5 * 160) * small_config.n_kv_heads
        assert kept == expected

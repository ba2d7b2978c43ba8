"""Evaluation, analysis and benchmarking machinery behind the CLI.

Desk-scale metric: logit fidelity of compressed inference against the
full-cache run (a random-weight toy model has no task accuracy to
measure). All runs are deterministic given their seeds.
"""

import time
from collections import Counter

import numpy as np
from scipy.stats import spearmanr

from .model import ModelConfig, TransformerWeights, forward
from .gate import gate_forward
from .targets import compute_reconstruction_targets
from .eviction import (EvictionPolicy, prefill_chunked, decode_gated,
                       GateScorer, OracleScorer, RandomScorer, RecencyScorer)
from .tokenizer import token_repr

HEAD_CLASS_SPARSE_MAX = 0.05
HEAD_CLASS_DENSE_MIN = 0.9


def classify_head(rate):
    """Retention-rate taxonomy: sparse (<0.05), dense (>=0.9), else medium."""
    if rate < HEAD_CLASS_SPARSE_MAX:
        return "sparse"
    if rate >= HEAD_CLASS_DENSE_MIN:
        return "dense"
    return "medium"


def make_scorer(policy_name, *, gates=None, weights=None, config=None,
                ctx=None, seed=0):
    """Scorer factory for the eval policies."""
    if policy_name == "gate":
        if gates is None:
            raise ValueError("policy 'gate' needs trained gates")
        return GateScorer(gates)
    if policy_name == "oracle":
        targets = compute_reconstruction_targets(weights, config, ctx)
        return OracleScorer(targets)
    if policy_name == "random":
        return RandomScorer(config.n_kv_heads, seed)
    if policy_name == "recency":
        return RecencyScorer(config.n_kv_heads, config.max_position)
    raise ValueError(f"unknown eval policy {policy_name!r}")


def _with_ratio(policy: EvictionPolicy, ratio):
    return EvictionPolicy(
        budget_ratio=ratio, budget_fixed_total=None,
        allocation=policy.allocation, pool_scope=policy.pool_scope,
        chunk_size=policy.chunk_size, prefill_window=policy.prefill_window,
        short_context_window_fraction=policy.short_context_window_fraction,
        decode_buffer=policy.decode_buffer, decode_window=policy.decode_window)


def suffix_logits(weights, config, scorer, ctx, suffix, policy):
    """Prefill ctx (gated if scorer set), then teacher-force the suffix.

    Returns the (|suffix|, vocab) logits produced against the resulting
    cache; no eviction happens during the suffix.
    """
    cache, _, _ = prefill_chunked(weights, config, scorer, ctx, policy)
    result = forward(suffix, cache, weights, config)
    return result.logits


def eval_context(weights, config, ctx, suffix, policy, scorer):
    """(mean L2 logit deviation, top-1 agreement) vs the full-cache run."""
    ref = suffix_logits(weights, config, None, ctx, suffix, policy)
    got = suffix_logits(weights, config, scorer, ctx, suffix, policy)
    dev = float(np.mean(np.linalg.norm(
        got.astype(np.float64) - ref.astype(np.float64), axis=1)))
    agree = float(np.mean(np.argmax(got, axis=1) == np.argmax(ref, axis=1)))
    return dev, agree


def eval_policy_sweep(weights, config, contexts, budgets, policies,
                      base_policy, suffix_tokens, gates=None, seed=0):
    """Ratio sweep over eviction policies; one averaged row per pair."""
    rows = []
    for ratio in budgets:
        policy = _with_ratio(base_policy, ratio)
        for name in policies:
            devs, agrees = [], []
            for i, tokens in enumerate(contexts):
                ctx = tokens[:-suffix_tokens]
                suffix = tokens[-suffix_tokens:]
                scorer = make_scorer(name, gates=gates, weights=weights,
                                     config=config, ctx=ctx,
                                     seed=seed + 7919 * i)
                dev, agree = eval_context(weights, config, ctx, suffix,
                                          policy, scorer)
                devs.append(dev)
                agrees.append(agree)
            rows.append({
                "policy": name,
                "ratio": ratio,
                "logit_deviation": float(np.mean(devs)),
                "top1_agreement": float(np.mean(agrees)),
            })
    return rows


def analyze_gates(weights, config, gates, contexts, budget, base_policy):
    """Retention-rate heatmap, head taxonomy and token-frequency tables.

    Runs gated prefill at the given budget ratio over the sample contexts
    and aggregates which byte tokens each head class retains or evicts.
    """
    L, H = config.n_layers, config.n_kv_heads
    retained = np.zeros((L, H))
    totals = np.zeros((L, H))
    token_counts = {}  # (l, h) -> (retained Counter, evicted Counter)
    policy = _with_ratio(base_policy, budget)
    scorer = GateScorer(gates)

    for tokens in contexts:
        cache, _, stats = prefill_chunked(weights, config, scorer, tokens, policy)
        tokens = np.asarray(tokens)
        for l in range(L):
            for h in range(H):
                hc = cache.layers[l][h]
                kept = set(int(p) for p in hc.positions)
                retained[l, h] += len(kept)
                totals[l, h] += len(tokens)
                kept_counter, evicted_counter = token_counts.setdefault(
                    (l, h), (Counter(), Counter()))
                for p, tok in enumerate(tokens):
                    if p in kept:
                        kept_counter[int(tok)] += 1
                    else:
                        evicted_counter[int(tok)] += 1

    rates = retained / np.maximum(totals, 1)
    taxonomy = {}
    class_counts = {"sparse": (Counter(), Counter()),
                    "medium": (Counter(), Counter()),
                    "dense": (Counter(), Counter())}
    for l in range(L):
        for h in range(H):
            cls = classify_head(rates[l, h])
            taxonomy[f"{l}.{h}"] = {"retention_rate": float(rates[l, h]),
                                    "class": cls}
            class_counts[cls][0].update(token_counts[(l, h)][0])
            class_counts[cls][1].update(token_counts[(l, h)][1])

    token_tables = {}
    for cls, (kept_counter, evicted_counter) in class_counts.items():
        token_tables[cls] = {
            "most_retained": [token_repr(t) for t, _ in
                              kept_counter.most_common(10)],
            "most_evicted": [token_repr(t) for t, _ in
                             evicted_counter.most_common(10)],
        }
    return rates, taxonomy, token_tables


def score_calibration(weights, config, gates, ctx):
    """Per-layer mean gate score vs mean oracle target on one context."""
    targets, hiddens = compute_reconstruction_targets(
        weights, config, ctx, return_hiddens=True)
    curves = []
    for l in range(config.n_layers):
        pred = gate_forward(hiddens[l], gates[l], gates[l].config)
        curves.append((l, float(pred.mean()), float(targets[l].mean())))
    return curves


def gate_spearman(weights, config, gates, ctx):
    """Mean per-layer Spearman correlation of gate scores vs oracle targets."""
    targets, hiddens = compute_reconstruction_targets(
        weights, config, ctx, return_hiddens=True)
    rhos = []
    for l in range(config.n_layers):
        pred = gate_forward(hiddens[l], gates[l], gates[l].config)
        rho = spearmanr(pred.ravel(), targets[l].T.ravel()).statistic
        rhos.append(0.0 if np.isnan(rho) else float(rho))
    return float(np.mean(rhos))


def bench_run(weights: TransformerWeights, config: ModelConfig, gates,
              lengths, base_policy: EvictionPolicy, decode_steps, seed=0):
    """Timing and memory accounting, with and without gating.

    Gating overhead is isolated at ratio 1.0 (identical compute apart from
    the buffered gate path). Peak entries are measured at the configured
    budget.
    """
    rng = np.random.default_rng(seed)
    scorer = GateScorer(gates)
    transparent = _with_ratio(base_policy, 1.0)
    results = []
    for length in lengths:
        tokens = rng.integers(0, 256, size=length)

        t0 = time.perf_counter()
        cache_p, logits_p, plain_stats = prefill_chunked(
            weights, config, None, tokens, transparent)
        t_plain_prefill = time.perf_counter() - t0
        t0 = time.perf_counter()
        _, plain_stats = decode_gated(
            weights, config, None, cache_p, logits_p, decode_steps,
            transparent, stats=plain_stats)
        t_plain_decode = time.perf_counter() - t0

        t0 = time.perf_counter()
        cache_g, logits_g, _ = prefill_chunked(weights, config, scorer, tokens,
                                               transparent)
        t_gated_prefill = time.perf_counter() - t0
        t0 = time.perf_counter()
        _, decode_stats = decode_gated(
            weights, config, scorer, cache_g, logits_g, decode_steps,
            transparent)
        t_gated_decode = time.perf_counter() - t0

        _, _, budget_stats = prefill_chunked(weights, config, scorer, tokens,
                                             base_policy)

        overhead = max(0.0, (t_gated_decode - t_plain_decode)
                       / max(t_plain_decode, 1e-9))
        results.append({
            "length": int(length),
            "prefill_s_plain": t_plain_prefill,
            "prefill_s_gated": t_gated_prefill,
            "decode_s_per_token_plain": t_plain_decode / decode_steps,
            "decode_s_per_token_gated": t_gated_decode / decode_steps,
            "gating_overhead_fraction": overhead,
            "gating_events": decode_stats.gating_events,
            "peak_entries": budget_stats.peak_entries,
            "peak_entries_full": plain_stats.peak_entries,
        })

    gate_params = sum(g.n_params() for g in gates)
    param_ratio = gate_params / (config.n_layers
                                 * weights.attention_layer_params())
    return {
        "decode_steps": decode_steps,
        "decode_buffer": base_policy.decode_buffer,
        "gate_param_count": int(gate_params),
        "gate_to_attention_param_ratio": float(param_ratio),
        "runs": results,
    }

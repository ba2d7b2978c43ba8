"""Inference-time eviction: chunked prefill and buffered gated decoding.

A compressed cache keeps, per (layer, head), the highest-scoring KV entries
under a ratio or fixed-total budget. Entries inside the active local window
are exempt but still count toward the budget. During decoding, hidden
states accumulate in a small buffer and are gated in one batch; entries
are never evicted before they have a score.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .model import KVCache, ModelConfig, TransformerWeights, forward
from .gate import gate_forward


def round_half_up(x):
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class EvictionPolicy:
    """Budget and scheduling knobs for gated eviction.

    Exactly one of budget_ratio / budget_fixed_total must be set.
    nonuniform allocation pools evictable entries under one global score
    threshold (across layers when pool_scope="global"); uniform applies
    independent per-head quotas.
    """
    budget_ratio: float | None = None
    budget_fixed_total: int | None = None
    allocation: str = "nonuniform"
    pool_scope: str = "global"  # "global" | "layer"
    chunk_size: int = 64
    prefill_window: int = 16
    short_context_window_fraction: float = 0.02
    decode_buffer: int = 8
    decode_window: int = 8

    def __post_init__(self):
        if (self.budget_ratio is None) == (self.budget_fixed_total is None):
            raise ValueError("set exactly one of budget_ratio / budget_fixed_total")
        if self.budget_ratio is not None and not 0.0 < self.budget_ratio <= 1.0:
            raise ValueError("budget_ratio must lie in (0, 1]")
        if self.budget_fixed_total is not None and self.budget_fixed_total < 1:
            raise ValueError("budget_fixed_total must be >= 1")
        if self.allocation not in ("uniform", "nonuniform"):
            raise ValueError(f"unknown allocation {self.allocation!r}")
        if self.pool_scope not in ("global", "layer"):
            raise ValueError(f"unknown pool_scope {self.pool_scope!r}")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    @property
    def budget_mode(self):
        return "ratio" if self.budget_ratio is not None else "fixed"


@dataclass
class EvictionEvent:
    window_start: int
    before: int
    after: int
    per_layer_after: list
    expected_after: int


@dataclass
class EngineStats:
    peak_entries: list = field(default_factory=list)  # per layer
    events: list = field(default_factory=list)
    gating_events: int = 0
    retained: dict = field(default_factory=dict)  # (layer, head) -> count
    totals: dict = field(default_factory=dict)  # (layer, head) -> tokens seen

    def note_peak(self, cache):
        counts = [cache.layer_entry_count(l)
                  for l in range(cache.config.n_layers)]
        if not self.peak_entries:
            self.peak_entries = counts
        else:
            self.peak_entries = [max(a, b)
                                 for a, b in zip(self.peak_entries, counts)]

    def as_dict(self):
        return {
            "peak_entries": self.peak_entries,
            "gating_events": self.gating_events,
            "n_eviction_events": len(self.events),
            "retained_per_head": {f"{l}.{h}": int(v)
                                  for (l, h), v in sorted(self.retained.items())},
            "events": [{"window_start": e.window_start, "before": e.before,
                        "after": e.after, "expected_after": e.expected_after}
                       for e in self.events],
        }


def select_retained(entries, keep_count):
    """Top keep_count entries by score; deterministic tie-breaking.

    entries: sequence of (id, score, position, layer, head). Ties prefer
    the higher position, then the lower layer, then the lower head.
    """
    if keep_count > len(entries):
        raise ValueError(f"keep_count {keep_count} > {len(entries)} entries")
    ranked = sorted(entries,
                    key=lambda e: (-e[1], -e[2], e[3], e[4]))
    return {e[0] for e in ranked[:keep_count]}


def _gather_entries(cache, window_start):
    """Split entries into exempt (window / unscored) and evictable pools."""
    evictable = []  # (id, score, position, layer, head)
    window_counts = {}  # layer -> count of exempt entries
    head_info = {}  # (layer, head) -> (n_entries, n_exempt)
    for l, heads in enumerate(cache.layers):
        window_counts[l] = 0
        for h, hc in enumerate(heads):
            in_window = hc.positions >= window_start
            unscored = np.isnan(hc.scores)
            if np.any(unscored & ~in_window):
                raise ValueError(
                    f"unscored entries outside window at layer {l} head {h}")
            exempt = in_window | unscored
            n_exempt = int(exempt.sum())
            window_counts[l] += n_exempt
            head_info[(l, h)] = (len(hc), n_exempt)
            for idx in np.nonzero(~exempt)[0]:
                evictable.append(((l, h, int(idx)), float(hc.scores[idx]),
                                  int(hc.positions[idx]), l, h))
    return evictable, window_counts, head_info


def _keep_targets(cache, policy, window_counts, head_info):
    """Exact retained-count targets implied by the policy.

    Returns ("per_head", {(l,h): keep}) or ("pooled", {layer_or_None: keep}).
    Window entries count toward every budget; a window can never be cut.
    Ratio budgets are relative to the uncompressed cache — every position
    processed so far — so the final retention rate tracks the ratio
    regardless of how many eviction events preceded this one.
    """
    L = cache.config.n_layers
    H = cache.config.n_kv_heads
    seen = cache.next_position  # uncompressed entry count per head
    if policy.budget_mode == "ratio":
        r = policy.budget_ratio
        if policy.allocation == "uniform":
            per_head = {}
            for (l, h), (n, n_exempt) in head_info.items():
                per_head[(l, h)] = max(n_exempt,
                                       min(n, round_half_up(r * seen)))
            return "per_head", per_head
        if policy.pool_scope == "layer":
            per_pool = {}
            for l in range(L):
                total = cache.layer_entry_count(l)
                per_pool[l] = max(window_counts[l],
                                  min(total, round_half_up(r * seen * H)))
            return "pooled", per_pool
        total = cache.total_entries()
        exempt = sum(window_counts.values())
        return "pooled", {None: max(exempt,
                                    min(total,
                                        round_half_up(r * seen * H * L)))}
    # fixed-total budget applies per layer (decoding)
    B = policy.budget_fixed_total
    if policy.allocation == "uniform":
        per_head = {}
        for (l, h), (n, n_exempt) in head_info.items():
            quota = B // H + (1 if h < B % H else 0)
            per_head[(l, h)] = max(n_exempt, min(n, quota))
        return "per_head", per_head
    per_pool = {}
    for l in range(L):
        total = cache.layer_entry_count(l)
        per_pool[l] = max(window_counts[l], min(total, B))
    return "pooled", per_pool


def evict(cache: KVCache, policy: EvictionPolicy, window_start: int):
    """Apply the policy once; returns an EvictionEvent.

    window_start: absolute position from which entries are exempt.
    """
    evictable, window_counts, head_info = _gather_entries(cache, window_start)
    mode, targets = _keep_targets(cache, policy, window_counts, head_info)
    before = cache.total_entries()

    keep_ids = set()
    if mode == "per_head":
        by_head = {}
        for e in evictable:
            by_head.setdefault((e[3], e[4]), []).append(e)
        for (l, h), keep in targets.items():
            n, n_exempt = head_info[(l, h)]
            pool = by_head.get((l, h), [])
            keep_ids |= select_retained(pool, keep - n_exempt)
        expected_after = sum(targets.values())
    else:
        expected_after = 0
        for pool_key, keep in targets.items():
            if pool_key is None:
                pool = evictable
                exempt = sum(window_counts.values())
            else:
                pool = [e for e in evictable if e[3] == pool_key]
                exempt = window_counts[pool_key]
            keep_ids |= select_retained(pool, keep - exempt)
            expected_after += keep

    for l, heads in enumerate(cache.layers):
        for h, hc in enumerate(heads):
            in_window = hc.positions >= window_start
            unscored = np.isnan(hc.scores)
            mask = in_window | unscored
            for idx in np.nonzero(~mask)[0]:
                if (l, h, int(idx)) in keep_ids:
                    mask[idx] = True
            hc.keep(mask)

    after = cache.total_entries()
    event = EvictionEvent(
        window_start=window_start, before=before, after=after,
        per_layer_after=[cache.layer_entry_count(l)
                         for l in range(cache.config.n_layers)],
        expected_after=expected_after)
    if after != expected_after:
        raise AssertionError(
            f"budget mismatch: retained {after}, expected {expected_after}")
    return event


class DecodeBuffer:
    """Per-layer buffer of recent (position, hidden) rows awaiting gating."""

    def __init__(self, n_layers, capacity):
        self.capacity = capacity
        self.positions = []
        self.hiddens = [[] for _ in range(n_layers)]

    def __len__(self):
        return len(self.positions)

    def push(self, position, layer_hiddens):
        self.positions.append(position)
        for l, h in enumerate(layer_hiddens):
            self.hiddens[l].append(h)

    @property
    def full(self):
        return len(self.positions) >= self.capacity

    def take(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        batches = [np.stack(rows) for rows in self.hiddens]
        self.positions = []
        self.hiddens = [[] for _ in self.hiddens]
        return pos, batches


# --- scorers -----------------------------------------------------------------
# A scorer maps (layer, hiddens (T,D), positions (T,)) -> scores (T,H).

class GateScorer:
    """Scores from trained per-layer gates (position-independent)."""

    def __init__(self, gates):
        self.gates = gates

    def score(self, layer, hiddens, positions):
        g = self.gates[layer]
        return gate_forward(hiddens, g, g.config)


class OracleScorer:
    """Scores looked up from precomputed targets (n_layers, H, T_ctx).

    Positions beyond the target range score 1.0 (never preferred for
    eviction over scored context).
    """

    def __init__(self, targets):
        self.targets = np.asarray(targets, dtype=np.float64)

    def score(self, layer, hiddens, positions):
        T_ctx = self.targets.shape[2]
        H = self.targets.shape[1]
        out = np.ones((len(positions), H))
        for i, p in enumerate(positions):
            if p < T_ctx:
                out[i] = self.targets[layer, :, p]
        return out


class RandomScorer:
    """Seeded uniform scores; the random-eviction baseline."""

    def __init__(self, n_kv_heads, seed):
        self.n_kv_heads = n_kv_heads
        self.rng = np.random.default_rng(seed)

    def score(self, layer, hiddens, positions):
        return self.rng.uniform(size=(len(positions), self.n_kv_heads))


class RecencyScorer:
    """Monotone-in-position scores; keeps the most recent entries."""

    def __init__(self, n_kv_heads, max_position):
        self.n_kv_heads = n_kv_heads
        self.max_position = max_position

    def score(self, layer, hiddens, positions):
        base = (np.asarray(positions, dtype=np.float64) + 1) / (self.max_position + 1)
        return np.repeat(base[:, None], self.n_kv_heads, axis=1)


def _assign_scores(cache, layer, positions, scores):
    """Attach gate scores to the cache entries at the given positions."""
    pos_to_row = {int(p): i for i, p in enumerate(positions)}
    for h, hc in enumerate(cache.layers[layer]):
        hit = np.nonzero(np.isin(hc.positions, positions))[0]
        for idx in hit:
            hc.scores[idx] = scores[pos_to_row[int(hc.positions[idx])], h]


def prefill_window_size(policy: EvictionPolicy, total_tokens: int):
    """Local window during prefill; short contexts use the 2% rule."""
    if total_tokens < policy.chunk_size:
        return max(1, math.ceil(policy.short_context_window_fraction * total_tokens))
    return policy.prefill_window


def prefill_chunked(weights: TransformerWeights, config: ModelConfig, scorer,
                    tokens, policy: EvictionPolicy, cache=None, stats=None):
    """Chunked prefill with per-chunk gated eviction.

    scorer=None disables gating and eviction entirely (reference path).
    Returns (cache, logits of the final chunk, stats).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("tokens must be non-empty")
    if cache is None:
        cache = KVCache(config)
    stats = stats or EngineStats()
    window = prefill_window_size(policy, len(tokens))

    logits = None
    for off in range(0, len(tokens), policy.chunk_size):
        chunk = tokens[off:off + policy.chunk_size]
        result = forward(chunk, cache, weights, config)
        logits = result.logits
        if scorer is not None:
            for l in range(config.n_layers):
                scores = scorer.score(l, result.hiddens[l], result.positions)
                _assign_scores(cache, l, result.positions, scores)
            stats.note_peak(cache)
            event = evict(cache, policy, cache.next_position - window)
            stats.events.append(event)
            stats.gating_events += 1
        else:
            stats.note_peak(cache)

    for l, heads in enumerate(cache.layers):
        for h, hc in enumerate(heads):
            stats.retained[(l, h)] = len(hc)
            stats.totals[(l, h)] = len(tokens)
    return cache, logits, stats


def _sample_token(logits, sampler, rng):
    if sampler == "greedy":
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def decode_gated(weights: TransformerWeights, config: ModelConfig, scorer,
                 cache: KVCache, prompt_logits, n_steps: int,
                 policy: EvictionPolicy, sampler="greedy", seed=0,
                 stats=None):
    """Buffered gated decoding: generate n_steps tokens from the cache.

    Each new token's KV entries join the cache unscored; its hidden states
    go to the decode buffer. A full (or final) buffer triggers one batched
    gating event followed by eviction with the decode window exempt.
    Unscored entries are eviction-immune until their flush.
    """
    if (policy.budget_fixed_total is not None
            and policy.budget_fixed_total < policy.decode_window):
        raise ValueError("budget smaller than decode_window")
    stats = stats or EngineStats()
    rng = np.random.default_rng(seed)
    buffer = DecodeBuffer(config.n_layers, policy.decode_buffer)
    logits = np.asarray(prompt_logits)[-1]
    generated = []

    def flush():
        positions, batches = buffer.take()
        for l in range(config.n_layers):
            g = scorer.score(l, batches[l], positions)
            _assign_scores(cache, l, positions, g)
        stats.gating_events += 1
        stats.note_peak(cache)
        event = evict(cache, policy, cache.next_position - policy.decode_window)
        stats.events.append(event)

    for _ in range(n_steps):
        token = _sample_token(logits, sampler, rng)
        generated.append(token)
        result = forward([token], cache, weights, config)
        logits = result.logits[-1]
        if scorer is not None:
            buffer.push(result.positions[0],
                        [h[0] for h in result.hiddens])
            if buffer.full:
                flush()
        else:
            stats.note_peak(cache)

    if scorer is not None and len(buffer):
        flush()

    for l, heads in enumerate(cache.layers):
        for h, hc in enumerate(heads):
            stats.retained[(l, h)] = len(hc)
    return generated, stats

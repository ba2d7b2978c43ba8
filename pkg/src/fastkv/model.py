"""Frozen toy decoder-only transformer with GQA, RoPE and explicit KV caching.

Pre-norm blocks with RMS-norm and a SwiGLU MLP. Activations are stored in
f32; softmax and norm reductions accumulate in f64 so tolerances are
reproducible. The model is never trained: it serves as the hidden-state
source and attention oracle for gate distillation.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import serial
from .tokenizer import VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_kv_heads: int = 2
    group_size: int = 2
    d_head: int = 16
    vocab_size: int = VOCAB_SIZE
    rope_theta: float = 10000.0
    max_position: int = 4096
    norm_eps: float = 1e-6
    init_std: float = 0.02
    # q/k projections draw at a larger scale so the untrained model has
    # peaked, head-specific attention rather than a near-uniform pattern;
    # uniform attention carries no retention signal to distill.
    qk_init_std: float = 0.25
    # Which hidden state feeds the gates: the attention input after the
    # pre-attention norm ("post_norm", default) or the raw residual
    # stream ("pre_norm").
    hidden_tap: str = "post_norm"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_kv_heads", "group_size",
                     "d_head", "vocab_size", "max_position"):
            if getattr(self, name) < 1:
                raise ValueError(f"empty model: {name} must be >= 1")
        if self.d_head % 2 != 0:
            raise ValueError("d_head must be even for rotary embeddings")
        if self.hidden_tap not in ("post_norm", "pre_norm"):
            raise ValueError(f"unknown hidden_tap {self.hidden_tap!r}")

    @property
    def n_query_heads(self):
        return self.n_kv_heads * self.group_size

    @property
    def d_ff(self):
        return 4 * self.d_model


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray  # (H*G*d_head, D)
    w_k: np.ndarray  # (H*d_head, D)
    w_v: np.ndarray  # (H*d_head, D)
    w_o: np.ndarray  # (D, H*G*d_head)
    attn_norm: np.ndarray  # (D,)
    mlp_norm: np.ndarray  # (D,)
    w_gate: np.ndarray  # (d_ff, D)
    w_up: np.ndarray  # (d_ff, D)
    w_down: np.ndarray  # (D, d_ff)


@dataclass(frozen=True)
class TransformerWeights:
    config: ModelConfig
    seed: int
    embedding: np.ndarray  # (vocab, D)
    layers: tuple  # of LayerWeights
    final_norm: np.ndarray  # (D,)
    lm_head: np.ndarray  # (vocab, D)

    def n_params(self):
        total = self.embedding.size + self.final_norm.size + self.lm_head.size
        for lw in self.layers:
            total += sum(getattr(lw, f.name).size for f in
                         lw.__dataclass_fields__.values())
        return total

    def attention_layer_params(self):
        """Parameter count of one attention layer (projections only)."""
        lw = self.layers[0]
        return lw.w_q.size + lw.w_k.size + lw.w_v.size + lw.w_o.size


def init_model(config: ModelConfig, seed: int) -> TransformerWeights:
    """Draw frozen weights: normal(0, init_std) from a PCG64 generator;
    q/k projections use qk_init_std. Identical (config, seed) yields
    bit-identical weights.
    """
    rng = np.random.default_rng(seed)

    def draw(*shape, std=config.init_std):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    c = config
    layers = []
    embedding = draw(c.vocab_size, c.d_model)
    for _ in range(c.n_layers):
        layers.append(LayerWeights(
            w_q=draw(c.n_query_heads * c.d_head, c.d_model, std=c.qk_init_std),
            w_k=draw(c.n_kv_heads * c.d_head, c.d_model, std=c.qk_init_std),
            w_v=draw(c.n_kv_heads * c.d_head, c.d_model),
            w_o=draw(c.d_model, c.n_query_heads * c.d_head),
            attn_norm=np.ones(c.d_model, dtype=np.float32),
            mlp_norm=np.ones(c.d_model, dtype=np.float32),
            w_gate=draw(c.d_ff, c.d_model),
            w_up=draw(c.d_ff, c.d_model),
            w_down=draw(c.d_model, c.d_ff),
        ))
    final_norm = np.ones(c.d_model, dtype=np.float32)
    lm_head = draw(c.vocab_size, c.d_model)
    return TransformerWeights(config=c, seed=seed, embedding=embedding,
                              layers=tuple(layers), final_norm=final_norm,
                              lm_head=lm_head)


def rms_norm(x, scale, eps=1e-6):
    """RMS normalization; the mean-square reduction runs in f64."""
    ms = np.mean(np.asarray(x, dtype=np.float64) ** 2, axis=-1, keepdims=True)
    out = x / np.sqrt(ms + eps)
    return (out * scale).astype(np.float32)


def rope_angles(positions, d_head, theta):
    """(len(positions), d_head/2) rotation angles."""
    positions = np.asarray(positions, dtype=np.float64)
    idx = np.arange(d_head // 2, dtype=np.float64)
    inv_freq = theta ** (-2.0 * idx / d_head)
    return positions[:, None] * inv_freq[None, :]


def rope_rotate(x, positions, theta):
    """Rotate (..., T, d_head) vectors by their positions' angles.

    Pairs (2i, 2i+1) rotate together; norm-preserving.
    """
    d_head = x.shape[-1]
    ang = rope_angles(positions, d_head, theta)
    cos = np.cos(ang)
    sin = np.sin(ang)
    x = np.asarray(x, dtype=np.float64)
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out.astype(np.float32)


def apply_rope(vec, position, theta=10000.0):
    """Rotary embedding of a single d_head vector at one position."""
    vec = np.asarray(vec, dtype=np.float32)
    if vec.shape[-1] % 2 != 0:
        raise ValueError("d_head must be even")
    return rope_rotate(vec[None, :], [position], theta)[0]


class HeadCache:
    """KV entries of one (layer, head): parallel arrays ordered by position.

    score is NaN until the gating path assigns one.
    """

    __slots__ = ("positions", "keys", "values", "scores")

    def __init__(self, d_head):
        self.positions = np.empty(0, dtype=np.int64)
        self.keys = np.empty((0, d_head), dtype=np.float32)
        self.values = np.empty((0, d_head), dtype=np.float32)
        self.scores = np.empty(0, dtype=np.float32)

    def __len__(self):
        return len(self.positions)

    def append(self, positions, keys, values):
        positions = np.asarray(positions, dtype=np.int64)
        if len(self.positions) and len(positions):
            if positions[0] <= self.positions[-1]:
                raise ValueError("cache positions must be strictly increasing")
        self.positions = np.concatenate([self.positions, positions])
        self.keys = np.concatenate([self.keys, keys.astype(np.float32)])
        self.values = np.concatenate([self.values, values.astype(np.float32)])
        self.scores = np.concatenate(
            [self.scores, np.full(len(positions), np.nan, dtype=np.float32)])

    def keep(self, mask):
        self.positions = self.positions[mask]
        self.keys = self.keys[mask]
        self.values = self.values[mask]
        self.scores = self.scores[mask]


class KVCache:
    """Per-layer, per-head KV store with a single monotone position counter."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.layers = [[HeadCache(config.d_head) for _ in range(config.n_kv_heads)]
                       for _ in range(config.n_layers)]
        self.next_position = 0

    def layer_entry_count(self, layer):
        return sum(len(h) for h in self.layers[layer])

    def total_entries(self):
        return sum(self.layer_entry_count(l) for l in range(self.config.n_layers))


@dataclass
class ForwardResult:
    hiddens: list  # per layer, (T, D) tap states of the new tokens
    logits: np.ndarray  # (T, vocab)
    cache: KVCache
    attention: list | None  # per layer, (H*G, T, n_keys) or None
    positions: np.ndarray  # (T,) absolute positions of the new tokens


def _silu(x):
    x64 = np.asarray(x, dtype=np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def _softmax_rows(logits_f32, mask):
    """Masked softmax over the last axis, accumulated in f64."""
    z = np.asarray(logits_f32, dtype=np.float64)
    z = np.where(mask, z, -np.inf)
    z -= np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def forward(tokens, cache, weights: TransformerWeights, config: ModelConfig,
            capture_attention=False):
    """Run new tokens through the model against an existing cache.

    New queries attend causally over (cache entries ∪ new tokens); GQA maps
    query head h*G+j onto KV head h. New keys are appended post-RoPE. The
    per-layer tap hidden states returned here are what the gates consume.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("tokens must be non-empty")
    if cache is None:
        cache = KVCache(config)
    T = len(tokens)
    start = cache.next_position
    if start + T > config.max_position:
        raise ValueError(
            f"position overflow: {start + T} > max_position {config.max_position}")
    new_pos = np.arange(start, start + T, dtype=np.int64)

    c = config
    scale = 1.0 / np.sqrt(c.d_head)
    x = weights.embedding[tokens]  # (T, D)
    taps = []
    attn_out = [] if capture_attention else None

    for layer_idx, lw in enumerate(weights.layers):
        h_norm = rms_norm(x, lw.attn_norm, c.norm_eps)
        taps.append(x.copy() if c.hidden_tap == "pre_norm" else h_norm.copy())

        q = (h_norm @ lw.w_q.T).reshape(T, c.n_kv_heads, c.group_size, c.d_head)
        k = (h_norm @ lw.w_k.T).reshape(T, c.n_kv_heads, c.d_head)
        v = (h_norm @ lw.w_v.T).reshape(T, c.n_kv_heads, c.d_head)

        q = rope_rotate(q.transpose(1, 2, 0, 3), new_pos, c.rope_theta)  # (H,G,T,d)
        k = rope_rotate(k.transpose(1, 0, 2), new_pos, c.rope_theta)  # (H,T,d)
        v = v.transpose(1, 0, 2)

        layer_attn = [] if capture_attention else None
        out_heads = np.empty((c.n_kv_heads, c.group_size, T, c.d_head),
                             dtype=np.float32)
        for h in range(c.n_kv_heads):
            hc = cache.layers[layer_idx][h]
            k_all = np.concatenate([hc.keys, k[h]])
            v_all = np.concatenate([hc.values, v[h]])
            pos_all = np.concatenate([hc.positions, new_pos])
            mask = pos_all[None, :] <= new_pos[:, None]  # (T, n_keys)
            logits = np.einsum("gtd,nd->gtn", q[h].astype(np.float32), k_all) * scale
            probs = _softmax_rows(logits, mask[None, :, :])
            out_heads[h] = (probs @ v_all.astype(np.float64)).astype(np.float32)
            if capture_attention:
                layer_attn.append(probs)
            hc.append(new_pos, k[h], v[h])
        if capture_attention:
            # query head index h*G+j
            attn_out.append(np.concatenate(layer_attn, axis=0))

        attn = out_heads.transpose(2, 0, 1, 3).reshape(T, -1)  # (T, H*G*d)
        x = x + attn @ lw.w_o.T

        m_norm = rms_norm(x, lw.mlp_norm, c.norm_eps)
        mlp = (_silu(m_norm @ lw.w_gate.T) * (m_norm @ lw.w_up.T)) @ lw.w_down.T
        x = x + mlp

    cache.next_position = start + T
    logits = rms_norm(x, weights.final_norm, c.norm_eps) @ weights.lm_head.T
    return ForwardResult(hiddens=taps, logits=logits.astype(np.float32),
                         cache=cache, attention=attn_out, positions=new_pos)


def attention_matrix_bruteforce(tokens, weights: TransformerWeights,
                                config: ModelConfig, return_hiddens=False):
    """Dense T×T attention probabilities per layer and query head.

    Independent reference path: no cache, explicit lower-triangular mask,
    full matrices materialized. Returns a list of (H*G, T, T) arrays;
    with return_hiddens=True also returns the per-layer tap states.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    c = config
    T = len(tokens)
    if T > c.max_position:
        raise ValueError("sequence exceeds max_position")
    positions = np.arange(T, dtype=np.int64)
    tril = np.tril(np.ones((T, T), dtype=bool))
    scale = 1.0 / np.sqrt(c.d_head)

    x = weights.embedding[tokens]
    matrices = []
    taps = []
    for lw in weights.layers:
        h_norm = rms_norm(x, lw.attn_norm, c.norm_eps)
        taps.append(x.copy() if c.hidden_tap == "pre_norm" else h_norm.copy())

        q = (h_norm @ lw.w_q.T).reshape(T, c.n_kv_heads, c.group_size, c.d_head)
        k = (h_norm @ lw.w_k.T).reshape(T, c.n_kv_heads, c.d_head)
        v = (h_norm @ lw.w_v.T).reshape(T, c.n_kv_heads, c.d_head)
        q = rope_rotate(q.transpose(1, 2, 0, 3), positions, c.rope_theta)
        k = rope_rotate(k.transpose(1, 0, 2), positions, c.rope_theta)
        v = v.transpose(1, 0, 2)

        layer_mat = np.empty((c.n_query_heads, T, T), dtype=np.float64)
        out_heads = np.empty((c.n_kv_heads, c.group_size, T, c.d_head),
                             dtype=np.float32)
        for h in range(c.n_kv_heads):
            for j in range(c.group_size):
                logits = (q[h, j].astype(np.float32) @ k[h].T) * scale
                probs = _softmax_rows(logits, tril)
                layer_mat[h * c.group_size + j] = probs
                out_heads[h, j] = (probs @ v[h].astype(np.float64)).astype(np.float32)
        matrices.append(layer_mat)

        attn = out_heads.transpose(2, 0, 1, 3).reshape(T, -1)
        x = x + attn @ lw.w_o.T
        m_norm = rms_norm(x, lw.mlp_norm, c.norm_eps)
        x = x + (_silu(m_norm @ lw.w_gate.T) * (m_norm @ lw.w_up.T)) @ lw.w_down.T

    if return_hiddens:
        return matrices, taps
    return matrices


def _weight_tensors(weights: TransformerWeights):
    tensors = [("embedding", weights.embedding)]
    for i, lw in enumerate(weights.layers):
        for name in ("w_q", "w_k", "w_v", "w_o", "attn_norm", "mlp_norm",
                     "w_gate", "w_up", "w_down"):
            tensors.append((f"layer{i}.{name}", getattr(lw, name)))
    tensors.append(("final_norm", weights.final_norm))
    tensors.append(("lm_head", weights.lm_head))
    return tensors


def save_model(weights: TransformerWeights, path):
    header = {"config": asdict(weights.config), "seed": weights.seed}
    serial.write_container(path, serial.MAGIC_MODEL, header,
                           _weight_tensors(weights))


def load_model(path) -> TransformerWeights:
    header, tensors = serial.read_container(path, serial.MAGIC_MODEL)
    config = ModelConfig(**header["config"])
    layers = []
    for i in range(config.n_layers):
        layers.append(LayerWeights(**{
            name: tensors[f"layer{i}.{name}"]
            for name in ("w_q", "w_k", "w_v", "w_o", "attn_norm", "mlp_norm",
                         "w_gate", "w_up", "w_down")}))
    return TransformerWeights(config=config, seed=header["seed"],
                              embedding=tensors["embedding"],
                              layers=tuple(layers),
                              final_norm=tensors["final_norm"],
                              lm_head=tensors["lm_head"])


def serialize_weights_bytes(weights: TransformerWeights):
    """Deterministic byte string of all weight tensors, for checksums."""
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for _, a in _weight_tensors(weights))

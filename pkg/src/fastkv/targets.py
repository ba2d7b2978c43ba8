"""Distillation targets: max attention received during context reconstruction.

The frozen model reads [ctx ∥ repeat-prompt ∥ ctx]; while it re-emits the
context, each KV pair of the first copy receives attention from the second
copy's queries. The target for (layer, head, position) is the maximum such
probability over reconstruction queries and group members. A next-token
variant uses a plain forward pass instead, which yields denser patterns.
"""

from dataclasses import dataclass

import numpy as np

from . import serial
from .model import ModelConfig, TransformerWeights, attention_matrix_bruteforce
from .tokenizer import default_repeat_prompt


@dataclass(frozen=True)
class ReconstructionLayout:
    tokens: tuple  # full sequence [ctx ∥ prompt ∥ ctx]
    key_range: tuple  # (start, stop) of the first ctx copy
    query_range: tuple  # (start, stop) of the second ctx copy


def build_reconstruction_layout(ctx, prompt=None, max_position=None):
    """Concatenate ctx with the repeat prompt and a second ctx copy."""
    ctx = list(ctx)
    if not ctx:
        raise ValueError("ctx must be non-empty")
    prompt = default_repeat_prompt() if prompt is None else list(prompt)
    tokens = ctx + prompt + ctx
    if max_position is not None and len(tokens) > max_position:
        raise ValueError(
            f"layout length {len(tokens)} exceeds max_position {max_position}")
    return ReconstructionLayout(
        tokens=tuple(tokens),
        key_range=(0, len(ctx)),
        query_range=(len(ctx) + len(prompt), len(tokens)),
    )


def max_attention_targets(matrices, config: ModelConfig, key_range, query_range):
    """Max over queries in query_range and group members, per KV position.

    matrices: per-layer (H*G, T, T) attention probabilities.
    Returns (n_layers, H, |key_range|) in [0,1].
    """
    k0, k1 = key_range
    q0, q1 = query_range
    if q1 <= q0:
        raise ValueError("empty query range")
    out = np.empty((config.n_layers, config.n_kv_heads, k1 - k0), dtype=np.float64)
    for l, mat in enumerate(matrices):
        per_head = mat.reshape(config.n_kv_heads, config.group_size,
                               mat.shape[1], mat.shape[2])
        out[l] = per_head[:, :, q0:q1, k0:k1].max(axis=(1, 2))
    return out


def compute_reconstruction_targets(weights: TransformerWeights,
                                   config: ModelConfig, ctx, prompt=None,
                                   include_prompt_queries=False,
                                   return_hiddens=False):
    """Targets over the first ctx copy's positions; values in [0,1].

    include_prompt_queries widens the query range to cover the repeat
    prompt tokens as well. With return_hiddens=True also returns the
    per-layer tap states at key_range positions (the gates' inputs).
    """
    layout = build_reconstruction_layout(ctx, prompt, config.max_position)
    matrices, hiddens = attention_matrix_bruteforce(
        layout.tokens, weights, config, return_hiddens=True)
    query_range = layout.query_range
    if include_prompt_queries:
        query_range = (layout.key_range[1], layout.query_range[1])
    targets = max_attention_targets(matrices, config, layout.key_range, query_range)
    if return_hiddens:
        k0, k1 = layout.key_range
        return targets, [h[k0:k1] for h in hiddens]
    return targets


def compute_next_token_targets(weights: TransformerWeights,
                               config: ModelConfig, seq,
                               return_hiddens=False):
    """Max attention over all causal queries of a plain forward pass."""
    seq = list(seq)
    matrices, hiddens = attention_matrix_bruteforce(
        seq, weights, config, return_hiddens=True)
    targets = max_attention_targets(matrices, config,
                                    (0, len(seq)), (0, len(seq)))
    if return_hiddens:
        return targets, hiddens
    return targets


def write_shard(path, layer, config: ModelConfig, samples, provenance=None):
    """Write one layer's (hidden, target) tuples as an FKVT container.

    samples: list of (hiddens T×D, targets T×H) pairs for that layer.
    """
    header = {
        "layer": layer,
        "n_kv_heads": config.n_kv_heads,
        "d_model": config.d_model,
        "n_samples": len(samples),
        "sample_lengths": [int(h.shape[0]) for h, _ in samples],
        "provenance": provenance or {},
    }
    tensors = []
    for i, (h, t) in enumerate(samples):
        tensors.append((f"sample{i}.hidden", np.asarray(h, dtype=np.float32)))
        tensors.append((f"sample{i}.target", np.asarray(t, dtype=np.float32)))
    serial.write_container(path, serial.MAGIC_SHARD, header, tensors)


def read_shard(path):
    """Read an FKVT shard; returns (header, hiddens (N,D), targets (N,H)).

    Samples are concatenated along the tuple axis in declared order.
    """
    header, tensors = serial.read_container(path, serial.MAGIC_SHARD)
    hiddens = []
    targets = []
    for i in range(header["n_samples"]):
        hiddens.append(tensors[f"sample{i}.hidden"])
        targets.append(tensors[f"sample{i}.target"])
    if not hiddens:
        raise serial.ContainerError(f"{path}: shard holds no samples")
    return header, np.concatenate(hiddens), np.concatenate(targets)

"""Shard building and per-layer gate training (plain SGD + BCE).

Shards hold (hidden state, target score) tuples produced by the
reconstruction oracle over corpus samples. Each layer's gate trains
independently: mini-batches are drawn uniformly with replacement per step,
validation BCE is computed on a seeded held-out split.
"""

import hashlib
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, TransformerWeights
from .gate import GateConfig, GateParams, init_gate, gate_forward, \
    gate_loss_and_grad, bce_loss
from .targets import compute_reconstruction_targets, write_shard, read_shard
from .tokenizer import default_repeat_prompt


class DataError(Exception):
    """Unusable corpus or shard input."""


class NumericError(Exception):
    """Training diverged (non-finite loss)."""


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.2
    steps: int = 500
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")


@dataclass(frozen=True)
class CorpusSpec:
    source_paths: tuple
    min_seq_tokens: int = 256
    max_seq_tokens: int = 1024
    total_tokens: int = 50_000
    long_concat_enabled: bool = False
    long_concat_target_length: int = 0

    def __post_init__(self):
        if not self.min_seq_tokens <= self.max_seq_tokens <= self.total_tokens:
            raise ValueError("need min_seq_tokens <= max_seq_tokens <= total_tokens")


@dataclass
class TrainReport:
    layer: int
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_train_loss: float = 0.0
    final_train_loss: float = 0.0
    params_checksum: str = ""
    wall_time_s: float = 0.0
    n_tuples: int = 0

    def as_dict(self):
        return dict(self.__dict__)


def load_corpus_tokens(spec: CorpusSpec):
    """Byte tokens of every UTF-8 text file under the source paths."""
    docs = []
    for root in spec.source_paths:
        root = Path(root)
        if not root.exists():
            raise DataError(f"corpus path does not exist: {root}")
        files = sorted(root.rglob("*.txt")) if root.is_dir() else [root]
        for f in files:
            try:
                data = f.read_bytes()
            except OSError as exc:
                raise DataError(f"unreadable corpus file {f}: {exc}") from exc
            if data:
                docs.append(list(data))
    if not docs:
        raise DataError(f"empty corpus under {list(spec.source_paths)}")
    return docs


def sample_contexts(spec: CorpusSpec, seed: int):
    """Sample sequences until total_tokens is reached (uniform lengths).

    Short documents are cycled to fill a requested length. With
    long_concat enabled, sampled sequences are additionally merged into
    chains of at most long_concat_target_length tokens.
    """
    docs = load_corpus_tokens(spec)
    rng = np.random.default_rng(seed)
    samples = []
    total = 0
    while total < spec.total_tokens:
        length = int(rng.integers(spec.min_seq_tokens, spec.max_seq_tokens + 1))
        doc = docs[int(rng.integers(len(docs)))]
        if len(doc) <= length:
            reps = -(-length // len(doc))
            seq = (doc * reps)[:length]
        else:
            start = int(rng.integers(len(doc) - length + 1))
            seq = doc[start:start + length]
        samples.append(seq)
        total += length
    if spec.long_concat_enabled and spec.long_concat_target_length > 0:
        merged = []
        cur = []
        for seq in samples:
            if cur and len(cur) + len(seq) > spec.long_concat_target_length:
                merged.append(cur)
                cur = []
            cur += seq
        if cur:
            merged.append(cur)
        samples = merged
    return samples


def build_training_shards(weights: TransformerWeights, config: ModelConfig,
                          spec: CorpusSpec, out_dir, prompt=None, seed=0,
                          provenance=None):
    """Run the reconstruction oracle over sampled contexts; write FKVT shards.

    One shard file per layer; tuples cover key_range positions only.
    Returns the list of shard paths.
    """
    prompt = default_repeat_prompt() if prompt is None else list(prompt)
    contexts = sample_contexts(spec, seed)
    for ctx in contexts:
        if 2 * len(ctx) + len(prompt) > config.max_position:
            raise DataError(
                f"context of {len(ctx)} tokens exceeds max_position "
                f"{config.max_position} under the reconstruction layout")

    per_layer = [[] for _ in range(config.n_layers)]
    for ctx in contexts:
        tgt, hid = compute_reconstruction_targets(
            weights, config, ctx, prompt=prompt, return_hiddens=True)
        for l in range(config.n_layers):
            per_layer[l].append((hid[l], tgt[l].T))  # (T,D), (T,H)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = dict(provenance or {})
    provenance.setdefault("seed", seed)
    provenance.setdefault("n_contexts", len(contexts))
    paths = []
    for l in range(config.n_layers):
        path = out_dir / f"shard_layer{l}.fkvt"
        write_shard(path, l, config, per_layer[l], provenance=provenance)
        paths.append(path)
    return paths


def split_train_val(n, val_fraction, seed):
    """Seeded tuple-level split; returns (train_idx, val_idx)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return perm[n_val:], perm[:n_val]


def train_layer(shard, gate_config: GateConfig, trainer: TrainerConfig,
                init_seed=None):
    """SGD-train one layer's gate on its shard.

    shard: an FKVT path or a (hiddens, targets) pair. Returns
    (GateParams, TrainReport).
    """
    if isinstance(shard, (str, Path)):
        header, hiddens, targets = read_shard(shard)
        layer = header["layer"]
        if header["d_model"] != gate_config.d_model \
                or header["n_kv_heads"] != gate_config.n_kv_heads:
            raise DataError(
                f"shard dims ({header['d_model']}, {header['n_kv_heads']}) "
                f"do not match gate config")
    else:
        hiddens, targets = shard
        layer = -1
    hiddens = np.asarray(hiddens, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    t0 = time.perf_counter()
    train_idx, val_idx = split_train_val(len(hiddens), trainer.val_fraction,
                                         trainer.seed)
    params = init_gate(gate_config, trainer.seed if init_seed is None else init_seed)
    rng = np.random.default_rng(trainer.seed + 1)
    report = TrainReport(layer=layer, n_tuples=len(hiddens))
    report.initial_train_loss = bce_loss(
        gate_forward(hiddens[train_idx], params, gate_config),
        targets[train_idx])

    for step in range(trainer.steps):
        batch = train_idx[rng.integers(len(train_idx), size=trainer.batch_size)]
        loss, grads = gate_loss_and_grad(params, hiddens[batch], targets[batch],
                                         gate_config)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at layer {layer} step {step}")
        if step % trainer.log_every == 0 or step == trainer.steps - 1:
            report.steps.append(step)
            report.train_loss.append(loss)
            if len(val_idx):
                val_pred = gate_forward(hiddens[val_idx], params, gate_config)
                report.val_loss.append(bce_loss(val_pred, targets[val_idx]))
        for name, g in grads.items():
            params.tensors[name] -= trainer.learning_rate * g

    report.final_train_loss = bce_loss(
        gate_forward(hiddens[train_idx], params, gate_config),
        targets[train_idx])
    report.wall_time_s = time.perf_counter() - t0
    blob = b"".join(np.ascontiguousarray(params.tensors[k]).tobytes()
                    for k in sorted(params.tensors))
    report.params_checksum = hashlib.sha256(blob).hexdigest()
    return params, report


def train_all_layers(shard_paths, gate_config: GateConfig,
                     trainer: TrainerConfig, n_workers=1):
    """Train every layer with per-layer seeds; returns (gates, reports).

    Layers are independent, so results are identical for any n_workers;
    workers > 1 overlap the layer runs in threads.
    """
    def run_layer(l, path):
        layer_trainer = TrainerConfig(
            learning_rate=trainer.learning_rate, steps=trainer.steps,
            batch_size=trainer.batch_size, seed=trainer.seed + 1000 * l,
            val_fraction=trainer.val_fraction, log_every=trainer.log_every)
        return train_layer(path, gate_config, layer_trainer)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_layer, range(len(shard_paths)),
                                    shard_paths))
    else:
        results = [run_layer(l, p) for l, p in enumerate(shard_paths)]
    gates = [params for params, _ in results]
    reports = [report for _, report in results]
    return gates, reports

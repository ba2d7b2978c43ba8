"""Gated KV-cache eviction for a toy GQA transformer.

Train lightweight sink-attention gates by distilling reconstruction-based
KV importance scores from a frozen model, then run chunked-prefill and
buffered-decoding inference that evicts low-importance KV pairs under a
memory budget.
"""

from .model import (ModelConfig, TransformerWeights, KVCache, init_model,
                    apply_rope, forward, attention_matrix_bruteforce,
                    save_model, load_model)
from .gate import (GateConfig, GateParams, init_gate, gate_forward,
                   gate_loss_and_grad, bce_loss, save_gates, load_gates)
from .targets import (ReconstructionLayout, build_reconstruction_layout,
                      compute_reconstruction_targets, compute_next_token_targets)
from .training import (TrainerConfig, CorpusSpec, TrainReport,
                       build_training_shards, train_layer, train_all_layers)
from .eviction import (EvictionPolicy, EngineStats, select_retained, evict,
                       prefill_chunked, decode_gated, GateScorer,
                       OracleScorer, RandomScorer, RecencyScorer)

__version__ = "0.1.0"

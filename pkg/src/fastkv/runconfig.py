"""TOML run configuration binding model, gate, corpus, trainer and policy.

Unknown keys are rejected so typos fail loudly instead of silently using
defaults.
"""

import dataclasses
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .model import ModelConfig
from .gate import GateConfig
from .training import TrainerConfig, CorpusSpec
from .eviction import EvictionPolicy


class ConfigError(Exception):
    """Invalid run configuration."""


@dataclasses.dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    gate: GateConfig
    corpus: CorpusSpec | None
    trainer: TrainerConfig
    policy: EvictionPolicy
    model_seed: int
    out_dir: Path
    eval_budgets: tuple
    eval_policies: tuple
    eval_n_contexts: int
    eval_suffix_tokens: int
    analyze_budget: float
    bench_lengths: tuple
    bench_decode_steps: int
    render_figures: bool


_KNOWN_SECTIONS = {"model", "gate", "corpus", "trainer", "policy",
                   "eval", "analyze", "bench", "output", "seeds"}


def _build(cls, section, name):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - fields
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}]: {exc}") from exc


def _take(section, name, known):
    unknown = set(section) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return section


def load_run_config(path, out_override=None, seed_override=None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    unknown = set(doc) - _KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")

    model = _build(ModelConfig, doc.get("model", {}), "model")

    gate_section = dict(doc.get("gate", {}))
    gate_section.setdefault("d_model", model.d_model)
    gate_section.setdefault("n_kv_heads", model.n_kv_heads)
    gate_section.setdefault("group_size", model.group_size)
    gate = _build(GateConfig, gate_section, "gate")
    if (gate.d_model, gate.n_kv_heads, gate.group_size) != \
            (model.d_model, model.n_kv_heads, model.group_size):
        raise ConfigError("gate dimensions must match the model")

    corpus = None
    if "corpus" in doc:
        corpus_section = dict(doc["corpus"])
        if "source_paths" in corpus_section:
            base = path.parent
            corpus_section["source_paths"] = tuple(
                str((base / p)) if not Path(p).is_absolute() else p
                for p in corpus_section["source_paths"])
        corpus = _build(CorpusSpec, corpus_section, "corpus")

    trainer = _build(TrainerConfig, doc.get("trainer", {}), "trainer")
    policy_section = dict(doc.get("policy", {}))
    policy_section.setdefault("budget_ratio", 1.0)
    policy = _build(EvictionPolicy, policy_section, "policy")

    seeds = _take(doc.get("seeds", {}), "seeds", {"model"})
    model_seed = seeds.get("model", 0)
    if seed_override is not None:
        model_seed = seed_override

    ev = _take(doc.get("eval", {}), "eval",
               {"budgets", "policies", "n_contexts", "suffix_tokens"})
    an = _take(doc.get("analyze", {}), "analyze", {"budget"})
    be = _take(doc.get("bench", {}), "bench", {"lengths", "decode_steps"})
    out = _take(doc.get("output", {}), "output", {"dir", "figures"})

    out_dir = Path(out_override) if out_override else \
        path.parent / out.get("dir", "out")

    return RunConfig(
        model=model, gate=gate, corpus=corpus, trainer=trainer, policy=policy,
        model_seed=model_seed, out_dir=out_dir,
        eval_budgets=tuple(ev.get("budgets", [0.25, 0.5, 0.75, 1.0])),
        eval_policies=tuple(ev.get("policies",
                                   ["gate", "oracle", "random", "recency"])),
        eval_n_contexts=int(ev.get("n_contexts", 5)),
        eval_suffix_tokens=int(ev.get("suffix_tokens", 16)),
        analyze_budget=float(an.get("budget", 0.36)),
        bench_lengths=tuple(be.get("lengths", [128, 256])),
        bench_decode_steps=int(be.get("decode_steps", 32)),
        render_figures=bool(out.get("figures", True)),
    )

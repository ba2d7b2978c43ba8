"""fastkv command line: train | eval | analyze | bench | inspect.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. All commands are deterministic given the config's seeds and
write only under the configured output directory.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import harness, report, serial
from .gate import save_gates, load_gates
from .model import init_model, save_model
from .runconfig import ConfigError, load_run_config
from .training import (DataError, NumericError, build_training_shards,
                       sample_contexts, train_all_layers)

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_json(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _write_csv(path, fieldnames, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    tmp.replace(path)


def _model_for(rc):
    weights = init_model(rc.model, rc.model_seed)
    return weights


def _n_workers():
    """Worker cap from FASTKV_THREADS (default 1; results are identical)."""
    raw = os.environ.get("FASTKV_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FASTKV_THREADS must be an integer, got {raw!r}") \
            from exc
    if n < 1:
        raise ConfigError("FASTKV_THREADS must be >= 1")
    return n


def _eval_contexts(rc, min_len=None):
    """Held-out contexts: sampled with a seed disjoint from training."""
    if rc.corpus is None:
        raise DataError("config has no [corpus] section")
    spec = rc.corpus
    contexts = sample_contexts(spec, seed=rc.trainer.seed + 90001)
    max_ctx = (rc.model.max_position - 40) // 2
    contexts = [c[:max_ctx] for c in contexts[:rc.eval_n_contexts]]
    if min_len:
        contexts = [c for c in contexts if len(c) >= min_len]
    return contexts


def cmd_train(args):
    rc = load_run_config(args.config, args.out, args.seed)
    out = rc.out_dir
    out.mkdir(parents=True, exist_ok=True)
    weights = _model_for(rc)
    save_model(weights, out / "model.fkvm")

    shard_dir = out / "shards"
    corpus_hash = hashlib.sha256(
        json.dumps([str(p) for p in rc.corpus.source_paths]).encode()
    ).hexdigest()[:16] if rc.corpus else ""
    t0 = time.perf_counter()
    shard_paths = build_training_shards(
        weights, rc.model, rc.corpus, shard_dir, seed=rc.trainer.seed,
        provenance={"corpus_hash": corpus_hash})
    gates, reports = train_all_layers(shard_paths, rc.gate, rc.trainer,
                                      n_workers=_n_workers())
    wall = time.perf_counter() - t0

    gate_path = out / "gates.fkvz"
    save_gates(gates, gate_path, provenance={
        "corpus_hash": corpus_hash,
        "trainer": rc.trainer.__dict__,
        "model_seed": rc.model_seed,
    })
    _write_json(out / "train_report.json", {
        "wall_time_s": wall,
        "layers": [r.as_dict() for r in reports],
        "gate_file": str(gate_path),
    })
    if rc.render_figures:
        report.plot_training_curves(reports, out / "train_loss.png")
    print(f"trained {len(gates)} gate layers in {wall:.1f}s -> {gate_path}")
    return 0


def cmd_eval(args):
    rc = load_run_config(args.config, args.out, args.seed)
    out = rc.out_dir
    weights = _model_for(rc)
    gates = None
    if "gate" in rc.eval_policies:
        gate_path = out / "gates.fkvz"
        if args.gates:
            gate_path = Path(args.gates)
        if not gate_path.exists():
            raise DataError(f"gate file not found: {gate_path}")
        gates, _ = load_gates(gate_path)
    contexts = _eval_contexts(rc)
    if not contexts:
        raise DataError("no evaluation contexts available")
    rows = harness.eval_policy_sweep(
        weights, rc.model, contexts, rc.eval_budgets, rc.eval_policies,
        rc.policy, rc.eval_suffix_tokens, gates=gates,
        seed=rc.trainer.seed + 5)
    csv_path = out / "eval.csv"
    _write_csv(csv_path, ["policy", "ratio", "logit_deviation",
                          "top1_agreement"], rows)
    if rc.render_figures:
        report.plot_eval_sweep(rows, out / "eval.png")
    print(f"wrote {len(rows)} rows -> {csv_path}")
    return 0


def cmd_analyze(args):
    rc = load_run_config(args.config, args.out, args.seed)
    out = rc.out_dir
    weights = _model_for(rc)
    gate_path = Path(args.gates) if args.gates else out / "gates.fkvz"
    if not gate_path.exists():
        raise DataError(f"gate file not found: {gate_path}")
    gates, _ = load_gates(gate_path)
    contexts = _eval_contexts(rc)
    if not contexts:
        raise DataError("no analysis contexts available")

    rates, taxonomy, token_tables = harness.analyze_gates(
        weights, rc.model, gates, contexts, rc.analyze_budget, rc.policy)
    heat_rows = [{"layer": l, **{f"head{h}": f"{rates[l, h]:.6f}"
                                 for h in range(rc.model.n_kv_heads)}}
                 for l in range(rc.model.n_layers)]
    _write_csv(out / "retention_rates.csv",
               ["layer"] + [f"head{h}" for h in range(rc.model.n_kv_heads)],
               heat_rows)
    _write_json(out / "head_taxonomy.json", {
        "budget": rc.analyze_budget,
        "heads": taxonomy,
        "token_tables": token_tables,
    })
    curves = harness.score_calibration(weights, rc.model, gates, contexts[0])
    _write_csv(out / "score_calibration.csv",
               ["layer", "mean_gate_score", "mean_oracle_target"],
               [{"layer": l, "mean_gate_score": f"{g:.6f}",
                 "mean_oracle_target": f"{t:.6f}"} for l, g, t in curves])
    if rc.render_figures:
        report.plot_retention_heatmap(rates, out / "retention_rates.png")
        report.plot_score_calibration(curves, out / "score_calibration.png")
    print(f"analyzed {len(contexts)} contexts at budget {rc.analyze_budget}")
    return 0


def cmd_bench(args):
    rc = load_run_config(args.config, args.out, args.seed)
    out = rc.out_dir
    weights = _model_for(rc)
    gate_path = Path(args.gates) if args.gates else out / "gates.fkvz"
    if not gate_path.exists():
        raise DataError(f"gate file not found: {gate_path}")
    gates, _ = load_gates(gate_path)
    results = harness.bench_run(weights, rc.model, gates, rc.bench_lengths,
                                rc.policy, rc.bench_decode_steps,
                                seed=rc.model_seed)
    _write_json(out / "bench.json", results)
    if rc.render_figures:
        report.plot_bench(results["runs"], out / "bench.png")
    print(f"bench over lengths {list(rc.bench_lengths)} -> {out / 'bench.json'}")
    return 0


def cmd_inspect(args):
    path = Path(args.file)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    magic = path.read_bytes()[:4]
    known = {serial.MAGIC_MODEL: "model checkpoint",
             serial.MAGIC_GATES: "gate weights",
             serial.MAGIC_SHARD: "target shard"}
    if magic not in known:
        raise DataError(f"{path}: unknown magic {magic!r}")
    header, tensors = serial.read_container(path, magic)
    print(f"{path}: {known[magic]} ({magic.decode()})")
    for key, value in sorted(header.items()):
        if key == "tensors":
            continue
        print(f"  {key}: {json.dumps(value, sort_keys=True)}")
    total = 0
    for entry in header["tensors"]:
        arr = tensors[entry["name"]]
        total += arr.size
        print(f"  tensor {entry['name']}: shape {tuple(arr.shape)}")
    print(f"  total parameters: {total}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fastkv",
        description="Gated KV-cache eviction: gate training and compressed "
                    "inference on a toy GQA transformer.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, needs_config=True, needs_gates=False):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=True, help="TOML run config")
            p.add_argument("--out", default=None, help="output directory")
            p.add_argument("--seed", type=int, default=None,
                           help="override the model seed")
        if needs_gates:
            p.add_argument("--gates", default=None,
                           help="gate file (default: <out>/gates.fkvz)")
        p.set_defaults(fn=fn)
        return p

    add("train", cmd_train, "build shards and train per-layer gates")
    add("eval", cmd_eval, "sweep eviction policies over cache budgets",
        needs_gates=True)
    add("analyze", cmd_analyze, "retention rates, head taxonomy, token tables",
        needs_gates=True)
    add("bench", cmd_bench, "timing, overhead and memory accounting",
        needs_gates=True)
    p = sub.add_parser("inspect", help="describe a FKVM/FKVZ/FKVT file")
    p.add_argument("file")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, serial.ContainerError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: synth, ingest, vocab, gen-pairs, pretrain, finetune,
index, eval, bm25-eval, experiment, report.

Option values resolve as CLI flag > TWOTOWER_<NAME> env var > --config JSON >
built-in default. Every run appends one manifest record (resolved config,
input/output hashes, timing) to manifests.jsonl beside its primary output.
Progress goes to stderr; machine-readable results go to files or stdout.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import time
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import benchmark, pairs, retrieval, synth, training, util
from .corpus import Vocabulary, build_vocab, parse_corpus, serialize_corpus, tokenize_corpus
from .encoders import EncoderConfig, load_checkpoint, save_checkpoint
from .training import TrainRunConfig

ENV_PREFIX = "TWOTOWER_"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve_options(args: argparse.Namespace, defaults: Dict[str, object]) -> Dict[str, object]:
    """Merge CLI flags over env vars over the --config file over defaults."""
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = util.load_json(args.config)
        if not isinstance(file_cfg, dict):
            raise UsageError(f"--config {args.config} must hold a JSON object")
    resolved = {}
    for name, default in defaults.items():
        attr = name.replace("-", "_")
        cli_value = getattr(args, attr, None)
        if cli_value is not None:
            resolved[name] = cli_value
            continue
        env_value = os.environ.get(ENV_PREFIX + attr.upper())
        if env_value is not None:
            resolved[name] = _coerce(env_value, default)
            continue
        if name in file_cfg:
            resolved[name] = file_cfg[name]
            continue
        resolved[name] = default
    return resolved


def _require(resolved: Dict[str, object], *names: str) -> None:
    for name in names:
        if resolved.get(name) in (None, ""):
            raise UsageError(f"missing required --{name}")


def _check_outputs(paths: Sequence[str], force: bool) -> None:
    for path in paths:
        if os.path.exists(path) and not force:
            raise RuntimeError(f"output {path} exists; pass --force to overwrite")


def _write_manifest(
    command: str,
    resolved: Dict[str, object],
    seed: int,
    inputs: Sequence[str],
    outputs: Sequence[str],
    elapsed: float,
) -> None:
    primary = outputs[0] if outputs else "."
    directory = os.path.dirname(os.path.abspath(primary)) or "."
    record = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "inputs": {p: util.sha256_file(p) for p in inputs if os.path.exists(p)},
        "outputs": {p: util.sha256_file(p) for p in outputs if os.path.exists(p)},
        "elapsed_seconds": elapsed,
    }
    with open(os.path.join(directory, "manifests.jsonl"), "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def _read_lines(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return f.readlines()


def _load_corpus(path: str, link_policy: str = "drop"):
    return parse_corpus(_read_lines(path), link_policy)


def _load_vocab(path: str) -> Vocabulary:
    return Vocabulary.load(_read_lines(path))


def _enc_config_from(resolved: Dict[str, object], vocab_size: int) -> EncoderConfig:
    return EncoderConfig(
        arch=str(resolved["arch"]),
        num_layers=int(resolved["layers"]),
        hidden_dim=int(resolved["hidden-dim"]),
        num_heads=int(resolved["heads"]),
        ff_dim=int(resolved["ff-dim"]),
        emb_dim=int(resolved["emb-dim"]),
        vocab_size=vocab_size,
        query_max_len=int(resolved["query-max-len"]),
        doc_max_len=int(resolved["doc-max-len"]),
        share_towers=bool(resolved["share-towers"]),
        dtype=str(resolved["dtype"]),
    )


_ENC_DEFAULTS = {
    "arch": "transformer",
    "layers": 2,
    "hidden-dim": 64,
    "heads": 4,
    "ff-dim": 256,
    "emb-dim": 32,
    "query-max-len": 16,
    "doc-max-len": 48,
    "share-towers": False,
    "dtype": "float32",
}

_TRAIN_DEFAULTS = {
    "steps": 800,
    "batch": 32,
    "lr": 1e-3,
    "warmup": 0.1,
    "correction": "none",
    "eval-every": 50,
    "patience": 5,
}


def _add_options(sub: argparse.ArgumentParser, defaults: Dict[str, object]) -> None:
    for name, default in defaults.items():
        flag = "--" + name
        if isinstance(default, bool):
            sub.add_argument(flag, action="store_const", const=True, default=None)
        elif isinstance(default, int):
            sub.add_argument(flag, type=int, default=None)
        elif isinstance(default, float):
            sub.add_argument(flag, type=float, default=None)
        else:
            sub.add_argument(flag, type=str, default=None)


def _parse_ratio(text: str) -> Tuple[int, int]:
    try:
        train_pct, test_pct = (int(part) for part in text.split("/"))
    except ValueError as exc:
        raise UsageError(f"--ratio must look like 80/20, got {text!r}") from exc
    return train_pct, test_pct


def _parse_ks(text: str) -> List[int]:
    return [int(part) for part in text.split(",")]


# ---------------------------------------------------------------- commands


def _cmd_synth(args) -> int:
    defaults = {
        "out": None,
        "qa": None,
        "articles": 500,
        "topics": 100,
        "qa-count": 1000,
        "seed": 13,
        "force": False,
    }
    resolved = resolve_options(args, defaults)
    _require(resolved, "out", "qa")
    outputs = [str(resolved["out"]), str(resolved["qa"])]
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    cfg = synth.SynthConfig(
        n_articles=int(resolved["articles"]),
        n_topics=int(resolved["topics"]),
        n_qa=int(resolved["qa-count"]),
        seed=int(resolved["seed"]),
    )
    records, entries = synth.generate(cfg)
    util.atomic_write_text(outputs[0], synth.corpus_jsonl(records))
    buffer = io.StringIO()
    benchmark.write_qa_entries(buffer, entries)
    util.atomic_write_text(outputs[1], buffer.getvalue())
    _log(f"wrote {len(records)} articles and {len(entries)} QA entries")
    _write_manifest("synth", resolved, cfg.seed, [], outputs, time.time() - start)
    return EXIT_OK


def _cmd_ingest(args) -> int:
    defaults = {"corpus": None, "out": None, "link-policy": "drop", "seed": 7, "force": False}
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "out")
    outputs = [str(resolved["out"])]
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]), str(resolved["link-policy"]))
    buffer = io.StringIO()
    serialize_corpus(store, buffer)
    util.atomic_write_text(outputs[0], buffer.getvalue())
    _log(f"ingested {len(store.articles)} articles, {len(store.passages)} passages")
    _write_manifest(
        "ingest", resolved, int(resolved["seed"]), [str(resolved["corpus"])], outputs,
        time.time() - start,
    )
    return EXIT_OK


def _cmd_vocab(args) -> int:
    defaults = {
        "corpus": None,
        "out": None,
        "max-size": 8192,
        "min-freq": 1,
        "seed": 7,
        "force": False,
    }
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "out")
    outputs = [str(resolved["out"])]
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]))
    vocab = build_vocab(store, int(resolved["max-size"]), int(resolved["min-freq"]))
    buffer = io.StringIO()
    vocab.save(buffer)
    util.atomic_write_text(outputs[0], buffer.getvalue())
    _log(f"vocabulary of {len(vocab)} tokens")
    _write_manifest(
        "vocab", resolved, int(resolved["seed"]), [str(resolved["corpus"])], outputs,
        time.time() - start,
    )
    return EXIT_OK


def _cmd_gen_pairs(args) -> int:
    defaults = {
        "corpus": None,
        "vocab": None,
        "out": None,
        "stats": "",
        "tasks": "ict+bfs+wlp",
        "n": 1000,
        "query-max-len": 16,
        "doc-max-len": 48,
        "seed": 7,
        "force": False,
    }
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "vocab", "out")
    outputs = [str(resolved["out"])] + ([str(resolved["stats"])] if resolved["stats"] else [])
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]))
    vocab = _load_vocab(str(resolved["vocab"]))
    tokenize_corpus(store, vocab)
    mixture = benchmark.parse_task_spec(str(resolved["tasks"]))
    if mixture is None:
        raise RuntimeError(f"gen-pairs needs a pair-generating task spec, got {resolved['tasks']!r}")
    seed = int(resolved["seed"])
    generated = list(
        pairs.sample_mixture(
            store,
            mixture,
            int(resolved["n"]),
            util.subrng(seed, "pairs"),
            int(resolved["query-max-len"]),
            int(resolved["doc-max-len"]),
        )
    )
    buffer = io.StringIO()
    pairs.write_pairs(buffer, generated)
    util.atomic_write_text(outputs[0], buffer.getvalue())
    if resolved["stats"]:
        util.dump_json(str(resolved["stats"]), pairs.pair_stats(generated))
    _log(f"generated {len(generated)} pairs")
    _write_manifest(
        "gen-pairs", resolved, seed, [str(resolved["corpus"]), str(resolved["vocab"])],
        outputs, time.time() - start,
    )
    return EXIT_OK


def _pretrain_common(args, mlm: bool) -> int:
    defaults = {
        "corpus": None,
        "vocab": None,
        "out": None,
        "metrics": "",
        "tasks": "mlm" if mlm else "ict+bfs+wlp",
        "seed": 7,
        "force": False,
        **_ENC_DEFAULTS,
        **_TRAIN_DEFAULTS,
    }
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "vocab", "out")
    prefix = str(resolved["out"])
    outputs = [prefix + ".json", prefix + ".bin"]
    metrics_path = str(resolved["metrics"]) if resolved["metrics"] else ""
    if metrics_path:
        outputs.append(metrics_path)
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]))
    vocab = _load_vocab(str(resolved["vocab"]))
    tokenize_corpus(store, vocab)
    enc_cfg = _enc_config_from(resolved, len(vocab))
    seed = int(resolved["seed"])
    train_cfg = TrainRunConfig(
        batch_size=int(resolved["batch"]),
        total_steps=int(resolved["steps"]),
        seed=seed,
        correction=str(resolved["correction"]),
        lr_peak=float(resolved["lr"]),
        warmup_fraction=float(resolved["warmup"]),
    )
    metrics_out = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        task_spec = str(resolved["tasks"])
        if task_spec == "mlm":
            params_q, params_d, _ = training.mlm_pretrain(train_cfg, enc_cfg, store, metrics_out)
        else:
            mixture = benchmark.parse_task_spec(task_spec)
            stream = pairs.sample_mixture(
                store,
                mixture,
                train_cfg.total_steps * train_cfg.batch_size,
                util.subrng(seed, "pairs", task_spec),
                enc_cfg.query_max_len,
                enc_cfg.doc_max_len,
            )
            params_q, params_d, _ = training.pretrain(train_cfg, enc_cfg, stream, metrics_out)
    finally:
        if metrics_out:
            metrics_out.close()
    fingerprint = save_checkpoint(
        prefix, params_q, params_d, enc_cfg, {"stage": "pretrain", "tasks": str(resolved["tasks"])}
    )
    _log(f"checkpoint {prefix} ({fingerprint[:12]})")
    _write_manifest(
        "pretrain", resolved, seed, [str(resolved["corpus"]), str(resolved["vocab"])],
        outputs, time.time() - start,
    )
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    return _pretrain_common(args, mlm=False)


def _build_benchmark(resolved, store, vocab):
    entries = benchmark.read_qa_entries(_read_lines(str(resolved["qa"])))
    return benchmark.build_reqa(
        entries, store, vocab, int(resolved["query-max-len"]), int(resolved["doc-max-len"])
    ), entries


def _cmd_finetune(args) -> int:
    defaults = {
        "corpus": None,
        "vocab": None,
        "qa": None,
        "ckpt": None,
        "out": None,
        "metrics": "",
        "ratio": "80/20",
        "seed": 7,
        "force": False,
        **_TRAIN_DEFAULTS,
    }
    defaults["steps"] = 300
    defaults["lr"] = 5e-4
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "vocab", "qa", "ckpt", "out")
    prefix = str(resolved["out"])
    outputs = [prefix + ".json", prefix + ".bin"]
    metrics_path = str(resolved["metrics"]) if resolved["metrics"] else ""
    if metrics_path:
        outputs.append(metrics_path)
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]))
    vocab = _load_vocab(str(resolved["vocab"]))
    tokenize_corpus(store, vocab)
    params_q, params_d, enc_cfg, _ = load_checkpoint(str(resolved["ckpt"]))
    resolved["query-max-len"] = enc_cfg.query_max_len
    resolved["doc-max-len"] = enc_cfg.doc_max_len
    (examples, candidates, dropped), _ = _build_benchmark(resolved, store, vocab)
    seed = int(resolved["seed"])
    split = benchmark.make_split(examples, _parse_ratio(str(resolved["ratio"])), seed)
    train_cfg = TrainRunConfig(
        batch_size=int(resolved["batch"]),
        total_steps=int(resolved["steps"]),
        seed=seed,
        lr_peak=float(resolved["lr"]),
        warmup_fraction=float(resolved["warmup"]),
        eval_every=int(resolved["eval-every"]),
        patience=int(resolved["patience"]),
    )
    metrics_out = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        best_q, best_d, history = training.finetune(
            params_q,
            params_d,
            enc_cfg,
            train_cfg,
            benchmark.finetune_pairs(split.train, candidates),
            [ex.question_tokens for ex in split.validation],
            [ex.gold_id for ex in split.validation],
            [(c.id, c.tower_tokens) for c in candidates],
            metrics_out,
        )
    finally:
        if metrics_out:
            metrics_out.close()
    best = max((h.get("val_recall") or 0.0) for h in history if "val_recall" in h)
    fingerprint = save_checkpoint(
        prefix, best_q, best_d, enc_cfg,
        {"stage": "finetune", "ratio": str(resolved["ratio"]), "val_recall_at_10": best},
    )
    _log(f"checkpoint {prefix} ({fingerprint[:12]}), best val recall@10 {best:.4f}")
    _write_manifest(
        "finetune", resolved, seed,
        [str(resolved["corpus"]), str(resolved["vocab"]), str(resolved["qa"])],
        outputs, time.time() - start,
    )
    return EXIT_OK


def _cmd_index(args) -> int:
    defaults = {
        "corpus": None,
        "vocab": None,
        "qa": None,
        "ckpt": None,
        "out": None,
        "seed": 7,
        "force": False,
    }
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "vocab", "qa", "ckpt", "out")
    prefix = str(resolved["out"])
    outputs = [prefix + ".json", prefix + ".bin"]
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]))
    vocab = _load_vocab(str(resolved["vocab"]))
    tokenize_corpus(store, vocab)
    params_q, params_d, enc_cfg, _ = load_checkpoint(str(resolved["ckpt"]))
    resolved["query-max-len"] = enc_cfg.query_max_len
    resolved["doc-max-len"] = enc_cfg.doc_max_len
    (examples, candidates, _), _ = _build_benchmark(resolved, store, vocab)
    index = retrieval.build_dense_index(
        params_d,
        enc_cfg,
        [c.tower_tokens for c in candidates],
        candidate_ids=[c.id for c in candidates],
        fingerprint=util.tensor_fingerprint(str(resolved["ckpt"])),
        tower="shared" if enc_cfg.share_towers else "doc",
    )
    retrieval.save_dense_index(prefix, index)
    _log(f"indexed {len(candidates)} candidates")
    _write_manifest(
        "index", resolved, int(resolved["seed"]),
        [str(resolved["corpus"]), str(resolved["vocab"]), str(resolved["qa"])],
        outputs, time.time() - start,
    )
    return EXIT_OK


def _eval_common(args, dense: bool) -> int:
    defaults = {
        "corpus": None,
        "vocab": None,
        "qa": None,
        "out": None,
        "ratio": "80/20",
        "k": "1,5,10,50,100",
        "split-part": "test",
        "augment": 0,
        "query-max-len": 16,
        "doc-max-len": 48,
        "seed": 7,
        "force": False,
    }
    if dense:
        defaults["ckpt"] = None
    else:
        defaults["bm25-k1"] = 1.2
        defaults["bm25-b"] = 0.75
    resolved = resolve_options(args, defaults)
    required = ["corpus", "vocab", "qa", "out"] + (["ckpt"] if dense else [])
    _require(resolved, *required)
    outputs = [str(resolved["out"])]
    _check_outputs(outputs, bool(resolved["force"]))
    start = time.time()
    store = _load_corpus(str(resolved["corpus"]))
    vocab = _load_vocab(str(resolved["vocab"]))
    tokenize_corpus(store, vocab)
    if dense:
        params_q, params_d, enc_cfg, _ = load_checkpoint(str(resolved["ckpt"]))
        resolved["query-max-len"] = enc_cfg.query_max_len
        resolved["doc-max-len"] = enc_cfg.doc_max_len
    (examples, candidates, dropped), entries = _build_benchmark(resolved, store, vocab)
    seed = int(resolved["seed"])
    split = benchmark.make_split(examples, _parse_ratio(str(resolved["ratio"])), seed)
    part = {
        "train": split.train,
        "validation": split.validation,
        "test": split.test,
    }.get(str(resolved["split-part"]))
    if part is None:
        raise UsageError(f"--split-part must be train/validation/test")
    if int(resolved["augment"]) > 0:
        referenced = {e.passage_id for e in entries}
        distractors = benchmark.sample_distractors(
            store, referenced, int(resolved["augment"]), seed
        )
        candidates = benchmark.augment_open_domain(
            candidates, distractors, int(resolved["augment"]), vocab, int(resolved["doc-max-len"])
        )
    ks = _parse_ks(str(resolved["k"]))
    queries = [ex.question_tokens for ex in part]
    gold = [ex.gold_id for ex in part]
    if dense:
        ranked = benchmark._rank_dense(params_q, params_d, enc_cfg, queries, candidates, max(ks))
        label = f"dense:{enc_cfg.arch}"
    else:
        index = retrieval.InvertedIndex([(c.id, c.match_tokens) for c in candidates])
        bm25 = retrieval.BM25Params(float(resolved["bm25-k1"]), float(resolved["bm25-b"]))
        ranked = benchmark._rank_bm25(index, queries, max(ks), bm25)
        label = "bm25"
    report = benchmark.evaluate(ranked, gold, ks, n_candidates=len(candidates))
    payload = {
        "system": label,
        "ratio": str(resolved["ratio"]),
        "part": str(resolved["split-part"]),
        "n_candidates": report.n_candidates,
        "n_queries": report.n_queries,
        "n_dropped_entries": dropped,
        "recalls": {str(k): report.recalls[k] for k in ks},
    }
    util.dump_json(outputs[0], payload)
    _log(f"{label} recalls: " + ", ".join(f"R@{k}={report.recalls[k]:.4f}" for k in ks))
    inp = [str(resolved["corpus"]), str(resolved["vocab"]), str(resolved["qa"])]
    if dense:
        inp += [str(resolved["ckpt"]) + ".json", str(resolved["ckpt"]) + ".bin"]
    _write_manifest("eval" if dense else "bm25-eval", resolved, seed, inp, outputs, time.time() - start)
    return EXIT_OK


def _cmd_eval(args) -> int:
    return _eval_common(args, dense=True)


def _cmd_bm25_eval(args) -> int:
    return _eval_common(args, dense=False)


def render_report(report: dict) -> str:
    """Plain-text table of mean recalls: one row per (ratio, encoder, task)."""
    ks = report["config"]["ks"] if "config" in report else [1, 5, 10, 50, 100]
    header = f"{'ratio':>8}  {'encoder':<12} {'pretraining':<14} " + " ".join(
        f"{'R@' + str(k):>8}" for k in ks
    )
    blocks = []
    for augmented in (False, True):
        rows = [m for m in report.get("means", []) if m.get("augmented") == augmented]
        if not rows:
            continue
        lines = []
        if augmented:
            lines.append("")
            lines.append(f"with {report['config'].get('augment_limit', 0)} distractor candidates:")
        lines.append(header)
        lines.append("-" * len(header))
        for row in sorted(rows, key=lambda r: (r["ratio"], r["encoder"], r["task"])):
            cells = " ".join(f"{100.0 * row['recalls'][str(k)]:>8.2f}" for k in ks)
            lines.append(f"{row['ratio']:>8}  {row['encoder']:<12} {row['task']:<14} {cells}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks) + "\n"


def _cmd_experiment(args) -> int:
    defaults = {
        "corpus": None,
        "qa": None,
        "out": None,
        "seed": 7,
        "force": False,
    }
    resolved = resolve_options(args, defaults)
    _require(resolved, "corpus", "qa", "out")
    out_dir = str(resolved["out"])
    report_json = os.path.join(out_dir, "report.json")
    report_txt = os.path.join(out_dir, "report.txt")
    _check_outputs([report_json, report_txt], bool(resolved["force"]))
    start = time.time()
    file_cfg = util.load_json(args.config) if getattr(args, "config", None) else {}
    grid_cfg = {k: v for k, v in file_cfg.items() if k in benchmark.ExperimentConfig.__dataclass_fields__}
    exp_cfg = benchmark.ExperimentConfig.from_dict(grid_cfg)
    if "seeds" not in grid_cfg:
        exp_cfg.seeds = [int(resolved["seed"])]
    store = _load_corpus(str(resolved["corpus"]))
    entries = benchmark.read_qa_entries(_read_lines(str(resolved["qa"])))
    report = benchmark.run_experiment(store, entries, exp_cfg, log=_log)
    os.makedirs(out_dir, exist_ok=True)
    util.dump_json(report_json, report)
    util.atomic_write_text(report_txt, render_report(report))
    print(render_report(report), end="")
    _write_manifest(
        "experiment", resolved, int(resolved["seed"]),
        [str(resolved["corpus"]), str(resolved["qa"])] + ([args.config] if args.config else []),
        [report_json, report_txt], time.time() - start,
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    defaults = {"in": None, "out": "", "seed": 7, "force": False}
    resolved = resolve_options(args, defaults)
    _require(resolved, "in")
    report = util.load_json(str(resolved["in"]))
    text = render_report(report)
    if resolved["out"]:
        _check_outputs([str(resolved["out"])], bool(resolved["force"]))
        util.atomic_write_text(str(resolved["out"]), text)
    print(text, end="")
    return EXIT_OK


_COMMANDS = {
    "synth": (
        _cmd_synth,
        {"out": "", "qa": "", "articles": 0, "topics": 0, "qa-count": 0, "seed": 0},
    ),
    "ingest": (_cmd_ingest, {"corpus": "", "out": "", "link-policy": "", "seed": 0}),
    "vocab": (_cmd_vocab, {"corpus": "", "out": "", "max-size": 0, "min-freq": 0, "seed": 0}),
    "gen-pairs": (
        _cmd_gen_pairs,
        {
            "corpus": "",
            "vocab": "",
            "out": "",
            "stats": "",
            "tasks": "",
            "n": 0,
            "query-max-len": 0,
            "doc-max-len": 0,
            "seed": 0,
        },
    ),
    "pretrain": (
        _cmd_pretrain,
        {
            "corpus": "",
            "vocab": "",
            "out": "",
            "metrics": "",
            "tasks": "",
            "seed": 0,
            **{k: v for k, v in _ENC_DEFAULTS.items()},
            **{k: v for k, v in _TRAIN_DEFAULTS.items()},
        },
    ),
    "finetune": (
        _cmd_finetune,
        {
            "corpus": "",
            "vocab": "",
            "qa": "",
            "ckpt": "",
            "out": "",
            "metrics": "",
            "ratio": "",
            "seed": 0,
            **{k: v for k, v in _TRAIN_DEFAULTS.items()},
        },
    ),
    "index": (_cmd_index, {"corpus": "", "vocab": "", "qa": "", "ckpt": "", "out": "", "seed": 0}),
    "eval": (
        _cmd_eval,
        {
            "corpus": "",
            "vocab": "",
            "qa": "",
            "ckpt": "",
            "out": "",
            "ratio": "",
            "k": "",
            "split-part": "",
            "augment": 0,
            "query-max-len": 0,
            "doc-max-len": 0,
            "seed": 0,
        },
    ),
    "bm25-eval": (
        _cmd_bm25_eval,
        {
            "corpus": "",
            "vocab": "",
            "qa": "",
            "out": "",
            "ratio": "",
            "k": "",
            "split-part": "",
            "augment": 0,
            "bm25-k1": 0.0,
            "bm25-b": 0.0,
            "query-max-len": 0,
            "doc-max-len": 0,
            "seed": 0,
        },
    ),
    "experiment": (_cmd_experiment, {"corpus": "", "qa": "", "out": "", "seed": 0}),
    "report": (_cmd_report, {"in": "", "out": "", "seed": 0}),
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="twotower", description=__doc__)
    subparsers = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, flags) in _COMMANDS.items():
        sub = subparsers.add_parser(name)
        _add_options(sub, flags)
        sub.add_argument("--config", type=str, default=None)
        sub.add_argument("--force", action="store_const", const=True, default=None)
        sub.add_argument("--threads", type=int, default=None)
        sub.add_argument("--deterministic", action="store_const", const=True, default=None)
    return parser


def cmd_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        handler, _ = _COMMANDS[args.command]
        return handler(args)
    except SystemExit as exc:  # --help prints and exits 0
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    return cmd_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())

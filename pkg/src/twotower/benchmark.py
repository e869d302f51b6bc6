"""Retrieval QA benchmark: candidate construction, cold-start splits,
open-domain augmentation, recall@k evaluation, and the experiment grid."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import retrieval, training
from .corpus import CorpusStore, TokenSeq, Vocabulary, build_vocab, tokenize, tokenize_corpus
from .encoders import ARCH_BOW_MLP, ARCH_TRANSFORMER, EncoderConfig, Params, encode
from .pairs import (
    PRETRAIN_TASKS,
    TASK_FINETUNE,
    PretrainPair,
    TaskMixture,
    make_doc_input,
    make_query_input,
    sample_mixture,
)
from .training import TrainRunConfig, finetune, mlm_pretrain, pretrain
from .util import canonical_json, sha256_bytes, subrng

TASK_NONE = "none"
TASK_MLM = "mlm"
DEFAULT_KS = (1, 5, 10, 50, 100)


@dataclass
class QaEntry:
    question: str
    answer: str
    passage_id: int


@dataclass
class Candidate:
    id: int
    sentence_index: int
    passage_id: int
    tower_tokens: TokenSeq
    match_tokens: List[int]


@dataclass
class ReqaExample:
    question: str
    question_tokens: TokenSeq
    gold_id: int


@dataclass
class Split:
    train: List[ReqaExample]
    validation: List[ReqaExample]
    test: List[ReqaExample]
    ratio_label: str


@dataclass
class EvalReport:
    recalls: Dict[int, float]
    n_candidates: int
    n_queries: int
    fingerprint: str = ""


def read_qa_entries(lines: Iterable[str]) -> List[QaEntry]:
    entries = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        record = json.loads(line)
        for key in ("q", "a", "pid"):
            if key not in record:
                raise ValueError(f"QA line {lineno}: missing field {key!r}")
        entries.append(QaEntry(record["q"], record["a"], record["pid"]))
    return entries


def write_qa_entries(out, entries: Iterable[QaEntry]) -> None:
    for entry in entries:
        out.write(
            json.dumps({"q": entry.question, "a": entry.answer, "pid": entry.passage_id}) + "\n"
        )


def build_reqa(
    entries: Sequence[QaEntry],
    store: CorpusStore,
    vocab: Vocabulary,
    query_max_len: int,
    doc_max_len: int,
) -> Tuple[List[ReqaExample], List[Candidate], int]:
    """Expand referenced passages into (sentence, passage) candidates and map
    each entry to the first sentence containing its answer span.

    Entries whose answer is not contained in any single sentence are dropped;
    the dropped count is returned.
    """
    referenced = sorted({e.passage_id for e in entries})
    for pid in referenced:
        if pid not in store.passages:
            raise ValueError(f"QA entry references unknown passage id {pid}")
    candidates: List[Candidate] = []
    lookup: Dict[Tuple[int, int], int] = {}
    for pid in referenced:
        passage = store.passage(pid)
        passage_ids = [t for s in passage.sentences for t in s.token_ids]
        for i, sentence in enumerate(passage.sentences):
            cid = len(candidates)
            lookup[(pid, i)] = cid
            candidates.append(
                Candidate(
                    id=cid,
                    sentence_index=i,
                    passage_id=pid,
                    tower_tokens=make_doc_input(sentence.token_ids, passage_ids, doc_max_len),
                    match_tokens=sentence.token_ids + passage_ids,
                )
            )
    examples: List[ReqaExample] = []
    dropped = 0
    for entry in entries:
        passage = store.passage(entry.passage_id)
        gold = None
        for i, sentence in enumerate(passage.sentences):
            if entry.answer in sentence.text:
                gold = lookup[(entry.passage_id, i)]
                break
        if gold is None:
            dropped += 1
            continue
        examples.append(
            ReqaExample(
                question=entry.question,
                question_tokens=make_query_input(tokenize(entry.question, vocab).ids, query_max_len),
                gold_id=gold,
            )
        )
    return examples, candidates, dropped


def make_split(
    examples: Sequence[ReqaExample], ratio: Tuple[int, int], seed: int
) -> Split:
    """Shuffle unique questions, send the first train% to the training pool
    and the rest to test; 10% of the training pool becomes validation.

    Duplicate question strings are co-assigned, so no question appears in
    two parts.
    """
    train_pct, test_pct = ratio
    if train_pct + test_pct != 100 or train_pct <= 0 or test_pct <= 0:
        raise ValueError(f"invalid split ratio {ratio}")
    groups: Dict[str, List[ReqaExample]] = {}
    order: List[str] = []
    for example in examples:
        if example.question not in groups:
            groups[example.question] = []
            order.append(example.question)
        groups[example.question].append(example)
    rng = subrng(seed, "split", train_pct, test_pct)
    shuffled = [order[i] for i in rng.permutation(len(order))]
    n_train = int(len(shuffled) * train_pct / 100 + 0.5)
    n_val = int(n_train * 0.10 + 0.5)
    train_qs = shuffled[: n_train - n_val]
    val_qs = shuffled[n_train - n_val : n_train]
    test_qs = shuffled[n_train:]
    if not train_qs or not val_qs or not test_qs:
        raise ValueError(f"split {ratio} leaves an empty part ({len(shuffled)} unique questions)")
    flat = lambda qs: [ex for q in qs for ex in groups[q]]
    return Split(
        train=flat(train_qs),
        validation=flat(val_qs),
        test=flat(test_qs),
        ratio_label=f"{train_pct}/{test_pct}",
    )


def augment_open_domain(
    candidates: Sequence[Candidate],
    external: Iterable[Tuple[str, str]],
    limit: int,
    vocab: Vocabulary,
    doc_max_len: int,
) -> List[Candidate]:
    """Append up to `limit` external (sentence, passage) texts as distractor
    candidates with fresh ids; existing candidates and gold ids are unchanged."""
    out = list(candidates)
    next_id = max((c.id for c in out), default=-1) + 1
    n_added = 0
    for sentence_text, passage_text in external:
        if n_added >= limit:
            break
        sent_ids = tokenize(sentence_text, vocab).ids
        passage_ids = tokenize(passage_text, vocab).ids
        out.append(
            Candidate(
                id=next_id,
                sentence_index=0,
                passage_id=-(n_added + 1),
                tower_tokens=make_doc_input(sent_ids, passage_ids, doc_max_len),
                match_tokens=sent_ids + passage_ids,
            )
        )
        next_id += 1
        n_added += 1
    return out


def sample_distractors(
    store: CorpusStore, exclude_pids: Iterable[int], limit: int, seed: int
) -> List[Tuple[str, str]]:
    """(sentence, passage) texts drawn from passages no QA entry references."""
    excluded = set(exclude_pids)
    pool = [
        (sentence.text, passage.text)
        for pid in sorted(store.passages)
        if pid not in excluded
        for passage in [store.passage(pid)]
        for sentence in passage.sentences
    ]
    rng = subrng(seed, "distractors")
    order = rng.permutation(len(pool))
    return [pool[i] for i in order[:limit]]


def evaluate(
    ranked: Sequence[Optional[retrieval.RankedList]],
    gold_ids: Sequence[int],
    ks: Sequence[int] = DEFAULT_KS,
    n_candidates: int = 0,
    fingerprint: str = "",
) -> EvalReport:
    """recall@k = fraction of queries whose gold id is in the top k."""
    if len(ranked) != len(gold_ids):
        raise ValueError("one ranked list per query is required")
    positions = []
    for i, (rlist, gold) in enumerate(zip(ranked, gold_ids)):
        if rlist is None:
            raise ValueError(f"missing ranked list for query {i}")
        try:
            positions.append(rlist.ids.index(gold))
        except ValueError:
            positions.append(len(rlist.ids) + max(ks))
    recalls = {k: sum(1 for p in positions if p < k) / len(positions) for k in ks}
    return EvalReport(
        recalls=recalls,
        n_candidates=n_candidates,
        n_queries=len(gold_ids),
        fingerprint=fingerprint,
    )


@dataclass
class ExperimentConfig:
    ratios: List[List[int]] = field(default_factory=lambda: [[80, 20]])
    encoders: List[str] = field(default_factory=lambda: [ARCH_TRANSFORMER])
    tasks: List[str] = field(default_factory=lambda: [TASK_NONE, TASK_MLM, "ict+bfs+wlp"])
    seeds: List[int] = field(default_factory=lambda: [7])
    include_bm25: bool = True
    augment_limit: int = 0
    ks: List[int] = field(default_factory=lambda: list(DEFAULT_KS))
    # encoder hyper-parameters
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 256
    emb_dim: int = 32
    query_max_len: int = 16
    doc_max_len: int = 48
    dtype: str = "float32"
    # training hyper-parameters
    pretrain_steps: int = 800
    finetune_steps: int = 300
    batch_size: int = 32
    pretrain_lr: float = 1e-3
    finetune_lr: float = 5e-4
    warmup_fraction: float = 0.1
    eval_every: int = 50
    patience: int = 5
    # vocabulary
    vocab_max_size: int = 8192
    vocab_min_freq: int = 1
    # bm25
    bm25_k1: float = 1.2
    bm25_b: float = 0.75

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**data)

    def encoder_config(self, arch: str, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            arch=arch,
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            ff_dim=self.ff_dim,
            emb_dim=self.emb_dim,
            vocab_size=vocab_size,
            query_max_len=self.query_max_len,
            doc_max_len=self.doc_max_len,
            dtype=self.dtype,
        )


def parse_task_spec(spec: str) -> Optional[TaskMixture]:
    """none -> None; mlm -> handled by caller; otherwise a uniform mixture
    over a '+'-joined subset of the pre-training tasks."""
    if spec in (TASK_NONE, TASK_MLM):
        return None
    tasks = spec.split("+")
    unknown = set(tasks) - set(PRETRAIN_TASKS)
    if unknown:
        raise ValueError(f"unknown pre-training tasks: {sorted(unknown)}")
    return TaskMixture.uniform(tasks)


def _rank_dense(
    params_q: Params,
    params_d: Params,
    enc_cfg: EncoderConfig,
    queries: Sequence[TokenSeq],
    candidates: Sequence[Candidate],
    k: int,
    batch_size: int = 512,
) -> List[retrieval.RankedList]:
    role_q = "shared" if enc_cfg.share_towers else "query"
    role_d = "shared" if enc_cfg.share_towers else "doc"
    index = retrieval.build_dense_index(
        params_d,
        enc_cfg,
        [c.tower_tokens for c in candidates],
        candidate_ids=[c.id for c in candidates],
        batch_size=batch_size,
        tower=role_d,
    )
    ranked = []
    for start in range(0, len(queries), batch_size):
        embs = encode(params_q, enc_cfg, queries[start : start + batch_size], role_q)
        for row in embs:
            ranked.append(retrieval.dense_topk(index, row, k))
    return ranked


def _rank_bm25(
    index: retrieval.InvertedIndex,
    queries: Sequence[TokenSeq],
    k: int,
    params: retrieval.BM25Params,
) -> List[retrieval.RankedList]:
    return [retrieval.bm25_topk(index, q, k, params) for q in queries]


def finetune_pairs(split_part: Sequence[ReqaExample], candidates: Sequence[Candidate]) -> List[PretrainPair]:
    by_id = {c.id: c for c in candidates}
    return [
        PretrainPair(
            query=ex.question_tokens,
            doc=by_id[ex.gold_id].tower_tokens,
            task=TASK_FINETUNE,
            source=(-1, by_id[ex.gold_id].passage_id, by_id[ex.gold_id].sentence_index),
        )
        for ex in split_part
    ]


def run_experiment(
    store: CorpusStore,
    entries: Sequence[QaEntry],
    cfg: ExperimentConfig,
    vocab: Optional[Vocabulary] = None,
    log: Callable[[str], None] = lambda msg: print(msg, file=sys.stderr),
) -> dict:
    """Execute the (split ratio x encoder x pre-training task) grid and
    return the full report as a JSON-serializable dict."""
    if vocab is None:
        vocab = build_vocab(store, cfg.vocab_max_size, cfg.vocab_min_freq)
    tokenize_corpus(store, vocab)
    examples, candidates, dropped = build_reqa(
        entries, store, vocab, cfg.query_max_len, cfg.doc_max_len
    )
    log(f"benchmark: {len(examples)} examples, {len(candidates)} candidates, {dropped} dropped")
    max_k = max(cfg.ks)
    bm25_params = retrieval.BM25Params(k1=cfg.bm25_k1, b=cfg.bm25_b)

    augmented_candidates: Optional[List[Candidate]] = None
    if cfg.augment_limit > 0:
        referenced = {e.passage_id for e in entries}
        distractors = sample_distractors(store, referenced, cfg.augment_limit, cfg.seeds[0])
        augmented_candidates = augment_open_domain(
            candidates, distractors, cfg.augment_limit, vocab, cfg.doc_max_len
        )
        log(f"augmentation: +{len(augmented_candidates) - len(candidates)} distractors")

    cells: List[dict] = []

    def add_cell(ratio_label, encoder, task, seed, report: EvalReport, augmented: bool):
        cells.append(
            {
                "ratio": ratio_label,
                "encoder": encoder,
                "task": task,
                "seed": seed,
                "augmented": augmented,
                "recalls": {str(k): report.recalls[k] for k in cfg.ks},
                "n_candidates": report.n_candidates,
                "n_queries": report.n_queries,
                "fingerprint": report.fingerprint,
            }
        )

    def cell_fingerprint(*labels) -> str:
        payload = canonical_json({"config": asdict(cfg), "cell": labels})
        return sha256_bytes(payload.encode())[:16]

    for seed in cfg.seeds:
        splits = {tuple(r): make_split(examples, tuple(r), seed) for r in cfg.ratios}
        pretrained: Dict[Tuple[str, str], Tuple[Params, Params]] = {}
        for arch in cfg.encoders:
            enc_cfg = cfg.encoder_config(arch, len(vocab))
            for task in cfg.tasks:
                if task == TASK_MLM and arch != ARCH_TRANSFORMER:
                    continue  # token-masking baseline is defined for the transformer only
                key = (arch, task)
                train_cfg = TrainRunConfig(
                    batch_size=cfg.batch_size,
                    total_steps=cfg.pretrain_steps,
                    seed=seed,
                    lr_peak=cfg.pretrain_lr,
                    warmup_fraction=cfg.warmup_fraction,
                )
                if task == TASK_NONE:
                    pretrained[key] = training._init_towers(enc_cfg, seed)
                elif task == TASK_MLM:
                    log(f"pretrain[{seed}] {arch}/{task}: {cfg.pretrain_steps} steps")
                    pq, pd, _ = mlm_pretrain(train_cfg, enc_cfg, store)
                    pretrained[key] = (pq, pd)
                else:
                    mixture = parse_task_spec(task)
                    log(f"pretrain[{seed}] {arch}/{task}: {cfg.pretrain_steps} steps")
                    stream = sample_mixture(
                        store,
                        mixture,
                        cfg.pretrain_steps * cfg.batch_size,
                        subrng(seed, "pairs", task),
                        cfg.query_max_len,
                        cfg.doc_max_len,
                    )
                    pq, pd, _ = pretrain(train_cfg, enc_cfg, stream)
                    pretrained[key] = (pq, pd)

                for ratio in cfg.ratios:
                    split = splits[tuple(ratio)]
                    log(f"finetune[{seed}] {arch}/{task} @ {split.ratio_label}")
                    ft_cfg = TrainRunConfig(
                        batch_size=min(cfg.batch_size, max(2, len(split.train))),
                        total_steps=cfg.finetune_steps,
                        seed=seed,
                        lr_peak=cfg.finetune_lr,
                        warmup_fraction=cfg.warmup_fraction,
                        eval_every=cfg.eval_every,
                        patience=cfg.patience,
                    )
                    pq, pd = pretrained[key]
                    best_q, best_d, _ = finetune(
                        pq,
                        pd,
                        enc_cfg,
                        ft_cfg,
                        finetune_pairs(split.train, candidates),
                        [ex.question_tokens for ex in split.validation],
                        [ex.gold_id for ex in split.validation],
                        [(c.id, c.tower_tokens) for c in candidates],
                    )
                    test_queries = [ex.question_tokens for ex in split.test]
                    test_gold = [ex.gold_id for ex in split.test]
                    ranked = _rank_dense(best_q, best_d, enc_cfg, test_queries, candidates, max_k)
                    report = evaluate(
                        ranked,
                        test_gold,
                        cfg.ks,
                        n_candidates=len(candidates),
                        fingerprint=cell_fingerprint(split.ratio_label, arch, task, seed, False),
                    )
                    add_cell(split.ratio_label, arch, task, seed, report, False)
                    if augmented_candidates is not None:
                        ranked = _rank_dense(
                            best_q, best_d, enc_cfg, test_queries, augmented_candidates, max_k
                        )
                        report = evaluate(
                            ranked,
                            test_gold,
                            cfg.ks,
                            n_candidates=len(augmented_candidates),
                            fingerprint=cell_fingerprint(split.ratio_label, arch, task, seed, True),
                        )
                        add_cell(split.ratio_label, arch, task, seed, report, True)

        if cfg.include_bm25:
            base_index = retrieval.InvertedIndex([(c.id, c.match_tokens) for c in candidates])
            aug_index = (
                retrieval.InvertedIndex([(c.id, c.match_tokens) for c in augmented_candidates])
                if augmented_candidates is not None
                else None
            )
            for ratio in cfg.ratios:
                split = splits[tuple(ratio)]
                test_queries = [ex.question_tokens for ex in split.test]
                test_gold = [ex.gold_id for ex in split.test]
                ranked = _rank_bm25(base_index, test_queries, max_k, bm25_params)
                report = evaluate(
                    ranked,
                    test_gold,
                    cfg.ks,
                    n_candidates=len(candidates),
                    fingerprint=cell_fingerprint(split.ratio_label, "bm25", TASK_NONE, seed, False),
                )
                add_cell(split.ratio_label, "bm25", TASK_NONE, seed, report, False)
                if aug_index is not None:
                    ranked = _rank_bm25(aug_index, test_queries, max_k, bm25_params)
                    report = evaluate(
                        ranked,
                        test_gold,
                        cfg.ks,
                        n_candidates=len(augmented_candidates),
                        fingerprint=cell_fingerprint(split.ratio_label, "bm25", TASK_NONE, seed, True),
                    )
                    add_cell(split.ratio_label, "bm25", TASK_NONE, seed, report, True)

    return {
        "config": asdict(cfg),
        "benchmark": {
            "n_examples": len(examples),
            "n_candidates": len(candidates),
            "n_dropped": dropped,
            "vocab_size": len(vocab),
        },
        "cells": cells,
        "means": summarize_cells(cells, cfg.ks),
    }


def summarize_cells(cells: Sequence[dict], ks: Sequence[int]) -> List[dict]:
    """Mean recalls per (ratio, encoder, task, augmented) across seeds."""
    grouped: Dict[Tuple, List[dict]] = {}
    for cell in cells:
        key = (cell["ratio"], cell["encoder"], cell["task"], cell["augmented"])
        grouped.setdefault(key, []).append(cell)
    means = []
    for key in sorted(grouped, key=lambda item: tuple(str(x) for x in item)):
        members = grouped[key]
        means.append(
            {
                "ratio": key[0],
                "encoder": key[1],
                "task": key[2],
                "augmented": key[3],
                "n_seeds": len(members),
                "recalls": {
                    str(k): sum(m["recalls"][str(k)] for m in members) / len(members)
                    for k in ks
                },
            }
        )
    return means

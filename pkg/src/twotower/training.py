"""Training: in-batch sampled softmax, Adam with warmup + linear decay,
and the pre-training / fine-tuning loops."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import retrieval
from .corpus import CorpusStore, TokenSeq
from .encoders import (
    ARCH_TRANSFORMER,
    EncoderConfig,
    Params,
    backward_from_cache,
    encode,
    encode_with_cache,
    hidden_backward,
    hidden_states,
    init_params,
)
from .pairs import PretrainPair, gen_mlm, make_doc_input
from .util import subrng

CORRECTION_NONE = "none"
CORRECTION_LOG_FREQUENCY = "log_frequency"


@dataclass
class LossOutput:
    loss: float
    grad_q: np.ndarray
    grad_d: np.ndarray
    in_batch_accuracy: float


@dataclass
class TrainRunConfig:
    batch_size: int = 32
    total_steps: int = 200
    seed: int = 0
    correction: str = CORRECTION_NONE
    eval_every: int = 20
    patience: int = 5
    lr_peak: float = 1e-3
    warmup_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    mask_rate: float = 0.15

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (at least one in-batch negative)")
        if self.correction not in (CORRECTION_NONE, CORRECTION_LOG_FREQUENCY):
            raise ValueError(f"unknown correction mode: {self.correction!r}")


def in_batch_softmax_loss(
    q_embs: np.ndarray, d_embs: np.ndarray, correction: Optional[np.ndarray] = None
) -> LossOutput:
    """Mean NLL of each query against its own doc with all other in-batch
    docs as negatives; logits are inner products minus the per-doc correction."""
    q = np.asarray(q_embs)
    d = np.asarray(d_embs)
    if q.ndim != 2 or q.shape != d.shape:
        raise ValueError(f"embedding shapes must match: {q.shape} vs {d.shape}")
    batch = q.shape[0]
    if batch < 2:
        raise ValueError("need a batch of at least 2 for in-batch negatives")
    if not (np.isfinite(q).all() and np.isfinite(d).all()):
        raise ValueError("non-finite embeddings")
    logits = q @ d.T
    if correction is not None:
        c = np.asarray(correction)
        if c.shape != (batch,):
            raise ValueError(f"correction must have shape ({batch},)")
        logits = logits - c[None, :]
    peak = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - peak)
    denom = expd.sum(axis=1, keepdims=True)
    probs = expd / denom
    lse = peak[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - np.diag(logits)))
    grad_logits = (probs - np.eye(batch, dtype=probs.dtype)) / batch
    accuracy = float(np.mean(np.argmax(logits, axis=1) == np.arange(batch)))
    return LossOutput(
        loss=loss,
        grad_q=grad_logits @ d,
        grad_d=grad_logits.T @ q,
        in_batch_accuracy=accuracy,
    )


def full_softmax_loss(q_emb: np.ndarray, all_d_embs: np.ndarray, gold: int) -> float:
    """NLL of the gold doc under the softmax over every candidate doc."""
    d = np.asarray(all_d_embs)
    if not 0 <= gold < d.shape[0]:
        raise IndexError(f"gold index {gold} out of range [0, {d.shape[0]})")
    logits = d @ np.asarray(q_emb)
    peak = logits.max()
    lse = peak + math.log(np.exp(logits - peak).sum())
    return float(lse - logits[gold])


@dataclass
class OptimizerState:
    step: int
    m: Params
    v: Params
    lr_peak: float
    warmup_fraction: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Params, cfg: TrainRunConfig) -> "OptimizerState":
        return cls(
            step=0,
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            lr_peak=cfg.lr_peak,
            warmup_fraction=cfg.warmup_fraction,
            total_steps=cfg.total_steps,
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            epsilon=cfg.adam_epsilon,
        )

    def learning_rate(self, step: Optional[int] = None) -> float:
        """Piecewise-linear schedule: 0 -> lr_peak over the warmup window,
        then linear decay to 0 at total_steps."""
        t = self.step if step is None else step
        warm = self.warmup_fraction * self.total_steps
        if t <= warm:
            return self.lr_peak * (t / warm) if warm > 0 else self.lr_peak
        if t >= self.total_steps:
            return 0.0
        return self.lr_peak * (self.total_steps - t) / (self.total_steps - warm)


def adam_step(params: Params, grads: Params, state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """One Adam update with bias correction; mutates params and state."""
    state.step += 1
    t = state.step
    lr = state.learning_rate(t)
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        if lr != 0.0:
            update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
            params[name] -= lr * update
    return params, state


def _tower_role(config: EncoderConfig, role: str) -> str:
    return "shared" if config.share_towers else role


def _init_towers(config: EncoderConfig, seed: int) -> Tuple[Params, Params]:
    if config.share_towers:
        shared = init_params(config, subrng(seed, "init", "shared"), "shared")
        return shared, shared
    params_q = init_params(config, subrng(seed, "init", "query"), "query")
    params_d = init_params(config, subrng(seed, "init", "doc"), "doc")
    return params_q, params_d


def _combine(params_q: Params, params_d: Params, shared: bool) -> Params:
    if shared:
        return {f"s:{k}": a for k, a in params_q.items()}
    combined = {f"q:{k}": a for k, a in params_q.items()}
    combined.update({f"d:{k}": a for k, a in params_d.items()})
    return combined


def _combine_grads(grads_q: Params, grads_d: Params, shared: bool) -> Params:
    if shared:
        return {f"s:{k}": grads_q[k] + grads_d[k] for k in grads_q}
    combined = {f"q:{k}": a for k, a in grads_q.items()}
    combined.update({f"d:{k}": a for k, a in grads_d.items()})
    return combined


class _FrequencyCorrection:
    """logQ correction from a streaming count of sampled doc identities."""

    def __init__(self):
        self.counts: Dict[Tuple, int] = {}
        self.total = 0

    def update_and_get(self, keys: Sequence[Tuple]) -> np.ndarray:
        for key in keys:
            self.counts[key] = self.counts.get(key, 0) + 1
            self.total += 1
        return np.array([math.log(self.counts[k] / self.total) for k in keys])


def _emit(metrics_out, record: dict) -> None:
    if metrics_out is not None:
        metrics_out.write(json.dumps(record) + "\n")


def pretrain(
    train_cfg: TrainRunConfig,
    enc_cfg: EncoderConfig,
    pair_stream: Iterable[PretrainPair],
    metrics_out=None,
) -> Tuple[Params, Params, List[dict]]:
    """Contrastive pre-training over a positive-pair stream.

    Both towers are updated each step from the in-batch softmax loss.
    Returns (query tower, doc tower, per-step history).
    """
    params_q, params_d = _init_towers(enc_cfg, train_cfg.seed)
    combined = _combine(params_q, params_d, enc_cfg.share_towers)
    state = OptimizerState.for_params(combined, train_cfg)
    stream = iter(pair_stream)
    correction = _FrequencyCorrection() if train_cfg.correction == CORRECTION_LOG_FREQUENCY else None
    history: List[dict] = []
    for step in range(1, train_cfg.total_steps + 1):
        batch = list(itertools.islice(stream, train_cfg.batch_size))
        if len(batch) < train_cfg.batch_size:
            raise ValueError(f"pair stream exhausted at step {step}")
        q_embs, q_cache = encode_with_cache(
            params_q, enc_cfg, [p.query for p in batch], _tower_role(enc_cfg, "query")
        )
        d_embs, d_cache = encode_with_cache(
            params_d, enc_cfg, [p.doc for p in batch], _tower_role(enc_cfg, "doc")
        )
        c = correction.update_and_get([p.source for p in batch]) if correction else None
        out = in_batch_softmax_loss(q_embs, d_embs, c)
        if not np.isfinite(out.loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        grads_q = backward_from_cache(params_q, enc_cfg, q_cache, out.grad_q)
        grads_d = backward_from_cache(params_d, enc_cfg, d_cache, out.grad_d)
        adam_step(combined, _combine_grads(grads_q, grads_d, enc_cfg.share_towers), state)
        record = {
            "step": step,
            "loss": out.loss,
            "acc": out.in_batch_accuracy,
            "lr": state.learning_rate(),
        }
        history.append(record)
        _emit(metrics_out, record)
    return params_q, params_d, history


def _mlm_step(
    params: Params,
    enc_cfg: EncoderConfig,
    batch: List[TokenSeq],
    rng: np.random.Generator,
    mask_rate: float,
    role: str,
) -> Tuple[float, float, Params]:
    """One masked-token prediction step for a single tower.

    The vocabulary head ties the token embedding matrix plus a bias.
    """
    examples = [gen_mlm(seq, rng, mask_rate, enc_cfg.vocab_size) for seq in batch]
    hidden, cache = hidden_states(params, enc_cfg, [e.input for e in examples], role)
    rows, cols, targets = [], [], []
    for i, example in enumerate(examples):
        for pos, original in example.labels:
            rows.append(i)
            cols.append(pos)
            targets.append(original)
    if not targets:
        zero = {k: np.zeros_like(a) for k, a in params.items()}
        return 0.0, 0.0, zero
    backing = hidden[rows, cols]
    emb = params["emb/token"]
    logits = backing @ emb.T + params["mlm/bias"]
    peak = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - peak)
    denom = expd.sum(axis=1, keepdims=True)
    probs = expd / denom
    target_idx = np.array(targets)
    n = len(targets)
    lse = peak[:, 0] + np.log(denom[:, 0])
    loss = float(np.mean(lse - logits[np.arange(n), target_idx]))
    acc = float(np.mean(np.argmax(logits, axis=1) == target_idx))
    dlogits = probs
    dlogits[np.arange(n), target_idx] -= 1.0
    dlogits /= n
    d_hidden = np.zeros_like(hidden)
    d_hidden[rows, cols] = dlogits @ emb
    grads = hidden_backward(params, enc_cfg, cache, d_hidden)
    grads["emb/token"] += dlogits.T @ backing
    grads["mlm/bias"] = dlogits.sum(axis=0)
    return loss, acc, grads


def mlm_pretrain(
    train_cfg: TrainRunConfig,
    enc_cfg: EncoderConfig,
    store: CorpusStore,
    metrics_out=None,
) -> Tuple[Params, Params, List[dict]]:
    """Masked-token baseline pre-training (transformer towers only).

    Each tower is trained on its own input distribution: the query tower on
    sentences, the doc tower on title-plus-passage docs. The vocabulary head
    is discarded from the returned parameters.
    """
    if enc_cfg.arch != ARCH_TRANSFORMER:
        raise ValueError("masked-token pre-training requires the transformer arch")
    params_q, params_d = _init_towers(enc_cfg, train_cfg.seed)
    dt = enc_cfg.np_dtype()
    params_q["mlm/bias"] = np.zeros(enc_cfg.vocab_size, dtype=dt)
    if not enc_cfg.share_towers:
        params_d["mlm/bias"] = np.zeros(enc_cfg.vocab_size, dtype=dt)
    combined = _combine(params_q, params_d, enc_cfg.share_towers)
    state = OptimizerState.for_params(combined, train_cfg)

    passages = [store.passage(pid) for pid in sorted(store.passages)]
    sentences = [s for p in passages for s in p.sentences if s.token_ids]
    if not sentences:
        raise ValueError("corpus has no tokenized sentences")
    rng = subrng(train_cfg.seed, "mlm")
    history: List[dict] = []
    for step in range(1, train_cfg.total_steps + 1):
        idx = rng.integers(len(sentences), size=train_cfg.batch_size)
        q_batch = [
            TokenSeq(sentences[i].token_ids[: enc_cfg.query_max_len]) for i in idx
        ]
        idx = rng.integers(len(passages), size=train_cfg.batch_size)
        d_batch = []
        for i in idx:
            passage = passages[i]
            body = [t for s in passage.sentences for t in s.token_ids]
            title = store.title_token_ids.get(passage.article_id, [])
            d_batch.append(make_doc_input(title, body, enc_cfg.doc_max_len))
        loss_q, acc_q, grads_q = _mlm_step(
            params_q, enc_cfg, q_batch, rng, train_cfg.mask_rate, _tower_role(enc_cfg, "query")
        )
        loss_d, acc_d, grads_d = _mlm_step(
            params_d, enc_cfg, d_batch, rng, train_cfg.mask_rate, _tower_role(enc_cfg, "doc")
        )
        loss = 0.5 * (loss_q + loss_d)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        adam_step(combined, _combine_grads(grads_q, grads_d, enc_cfg.share_towers), state)
        record = {
            "step": step,
            "loss": loss,
            "acc": 0.5 * (acc_q + acc_d),
            "lr": state.learning_rate(),
        }
        history.append(record)
        _emit(metrics_out, record)
    params_q.pop("mlm/bias", None)
    params_d.pop("mlm/bias", None)
    return params_q, params_d, history


def _copy_params(params: Params) -> Params:
    return {k: a.copy() for k, a in params.items()}


def recall_at_k(
    params_q: Params,
    params_d: Params,
    enc_cfg: EncoderConfig,
    queries: Sequence[TokenSeq],
    gold_ids: Sequence[int],
    candidates: Sequence[Tuple[int, TokenSeq]],
    k: int = 10,
    batch_size: int = 256,
) -> float:
    """Fraction of queries whose gold candidate lands in the dense top-k."""
    index = retrieval.build_dense_index(
        params_d,
        enc_cfg,
        [seq for _, seq in candidates],
        candidate_ids=[cid for cid, _ in candidates],
        batch_size=batch_size,
        tower=_tower_role(enc_cfg, "doc"),
    )
    hits = 0
    for start in range(0, len(queries), batch_size):
        chunk = queries[start : start + batch_size]
        embs = encode(params_q, enc_cfg, chunk, _tower_role(enc_cfg, "query"))
        for row, gold in zip(embs, gold_ids[start : start + len(chunk)]):
            ranked = retrieval.dense_topk(index, row, k)
            if gold in ranked.ids:
                hits += 1
    return hits / len(queries)


def finetune(
    params_q: Params,
    params_d: Params,
    enc_cfg: EncoderConfig,
    train_cfg: TrainRunConfig,
    train_pairs: Sequence[PretrainPair],
    val_queries: Sequence[TokenSeq],
    val_gold_ids: Sequence[int],
    candidates: Sequence[Tuple[int, TokenSeq]],
    metrics_out=None,
) -> Tuple[Params, Params, List[dict]]:
    """Fine-tune on downstream pairs, returning the checkpoint with the best
    validation recall@10 (the starting parameters count as a candidate)."""
    if not train_pairs:
        raise ValueError("empty fine-tuning set")
    params_q = _copy_params(params_q)
    params_d = params_q if enc_cfg.share_towers else _copy_params(params_d)
    combined = _combine(params_q, params_d, enc_cfg.share_towers)
    state = OptimizerState.for_params(combined, train_cfg)
    rng = subrng(train_cfg.seed, "finetune")

    def evaluate() -> float:
        if not val_queries:
            return 0.0
        return recall_at_k(params_q, params_d, enc_cfg, val_queries, val_gold_ids, candidates)

    best_recall = evaluate()
    best_q, best_d = _copy_params(params_q), _copy_params(params_d)
    stale = 0
    history: List[dict] = [{"step": 0, "loss": None, "acc": None, "val_recall": best_recall}]
    order = rng.permutation(len(train_pairs))
    cursor = 0
    for step in range(1, train_cfg.total_steps + 1):
        take: List[PretrainPair] = []
        while len(take) < train_cfg.batch_size:
            if cursor >= len(order):
                order = rng.permutation(len(train_pairs))
                cursor = 0
            take.append(train_pairs[order[cursor]])
            cursor += 1
        q_embs, q_cache = encode_with_cache(
            params_q, enc_cfg, [p.query for p in take], _tower_role(enc_cfg, "query")
        )
        d_embs, d_cache = encode_with_cache(
            params_d, enc_cfg, [p.doc for p in take], _tower_role(enc_cfg, "doc")
        )
        out = in_batch_softmax_loss(q_embs, d_embs)
        if not np.isfinite(out.loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        grads_q = backward_from_cache(params_q, enc_cfg, q_cache, out.grad_q)
        grads_d = backward_from_cache(params_d, enc_cfg, d_cache, out.grad_d)
        adam_step(combined, _combine_grads(grads_q, grads_d, enc_cfg.share_towers), state)
        record = {
            "step": step,
            "loss": out.loss,
            "acc": out.in_batch_accuracy,
            "lr": state.learning_rate(),
        }
        if step % train_cfg.eval_every == 0 or step == train_cfg.total_steps:
            recall = evaluate()
            record["val_recall"] = recall
            if recall > best_recall:
                best_recall = recall
                best_q, best_d = _copy_params(params_q), _copy_params(params_d)
                stale = 0
            else:
                stale += 1
            history.append(record)
            _emit(metrics_out, record)
            if stale > train_cfg.patience:
                break
        else:
            history.append(record)
            _emit(metrics_out, record)
    if enc_cfg.share_towers:
        best_d = best_q
    return best_q, best_d, history

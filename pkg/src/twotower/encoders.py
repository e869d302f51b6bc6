"""Two-tower encoders: a bag-of-words MLP and a small pre-LN Transformer.

Forward and backward passes are written directly in numpy so gradients are
exact and checkable against finite differences. Parameters are plain dicts
of named arrays; a tower is one such dict.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from . import util
from .corpus import NUM_SPECIALS, PAD_ID, TokenSeq

ARCH_BOW_MLP = "bow_mlp"
ARCH_TRANSFORMER = "transformer"

CHECKPOINT_FORMAT = "twotower-checkpoint-v1"

Params = Dict[str, np.ndarray]
Batch = Sequence[Union[TokenSeq, Sequence[int]]]

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    arch: str = ARCH_TRANSFORMER
    num_layers: int = 2
    hidden_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 256
    emb_dim: int = 32
    vocab_size: int = 0
    query_max_len: int = 16
    doc_max_len: int = 48
    share_towers: bool = False
    ln_epsilon: float = 1e-12
    dtype: str = "float64"

    def __post_init__(self):
        if self.arch not in (ARCH_BOW_MLP, ARCH_TRANSFORMER):
            raise EncoderError(f"unknown arch: {self.arch!r}")
        if self.hidden_dim % self.num_heads != 0:
            raise EncoderError("hidden_dim must be divisible by num_heads")
        if self.emb_dim < 1:
            raise EncoderError("emb_dim must be >= 1")
        if self.query_max_len < 2 or self.doc_max_len < 2:
            raise EncoderError("max lengths must be >= 2")
        if self.vocab_size < NUM_SPECIALS:
            raise EncoderError("vocab_size must cover the special tokens")

    def max_len(self, tower: str) -> int:
        if tower == "query":
            return self.query_max_len
        if tower == "doc":
            return self.doc_max_len
        if tower == "shared":
            return max(self.query_max_len, self.doc_max_len)
        raise EncoderError(f"unknown tower: {tower!r}")

    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) with redraws outside +/- 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out.astype(dtype)


def init_params(config: EncoderConfig, rng: np.random.Generator, tower: str = "doc") -> Params:
    """Fresh tower parameters: truncated-normal weights, zero biases,
    unit LayerNorm gains."""
    dt = config.np_dtype()
    h, k, v = config.hidden_dim, config.emb_dim, config.vocab_size
    params: Params = {"emb/token": _truncated_normal(rng, (v, h), 0.02, dt)}
    if config.arch == ARCH_BOW_MLP:
        params["mlp/w1"] = _truncated_normal(rng, (h, h), 0.02, dt)
        params["mlp/b1"] = np.zeros(h, dtype=dt)
        params["mlp/w2"] = _truncated_normal(rng, (h, k), 0.02, dt)
        params["mlp/b2"] = np.zeros(k, dtype=dt)
        return params
    length = config.max_len(tower)
    params["emb/pos"] = _truncated_normal(rng, (length, h), 0.02, dt)
    for i in range(config.num_layers):
        p = f"layer{i}"
        params[f"{p}/ln1/gain"] = np.ones(h, dtype=dt)
        params[f"{p}/ln1/bias"] = np.zeros(h, dtype=dt)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}/attn/{name}"] = _truncated_normal(rng, (h, h), 0.02, dt)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}/attn/{name}"] = np.zeros(h, dtype=dt)
        params[f"{p}/ln2/gain"] = np.ones(h, dtype=dt)
        params[f"{p}/ln2/bias"] = np.zeros(h, dtype=dt)
        params[f"{p}/ffn/w1"] = _truncated_normal(rng, (h, config.ff_dim), 0.02, dt)
        params[f"{p}/ffn/b1"] = np.zeros(config.ff_dim, dtype=dt)
        params[f"{p}/ffn/w2"] = _truncated_normal(rng, (config.ff_dim, h), 0.02, dt)
        params[f"{p}/ffn/b2"] = np.zeros(h, dtype=dt)
    params["final_ln/gain"] = np.ones(h, dtype=dt)
    params["final_ln/bias"] = np.zeros(h, dtype=dt)
    params["out/w"] = _truncated_normal(rng, (h, k), 0.02, dt)
    params["out/b"] = np.zeros(k, dtype=dt)
    return params


def _pad_batch(batch: Batch, max_len: int) -> Tuple[np.ndarray, np.ndarray]:
    rows = [seq.ids if isinstance(seq, TokenSeq) else list(seq) for seq in batch]
    if not rows:
        raise EncoderError("empty batch")
    for row in rows:
        if len(row) > max_len:
            raise EncoderError(f"sequence of length {len(row)} exceeds max_len {max_len}")
        if not row:
            raise EncoderError("empty sequence in batch")
    width = max(len(row) for row in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
    # PAD is masked wherever it occurs, so explicitly padded inputs encode
    # identically to their unpadded form.
    mask = ids != PAD_ID
    if not mask.any(axis=1).all():
        raise EncoderError("a sequence consists solely of PAD tokens")
    return ids, mask


def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u * _INV_SQRT_2))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u * _INV_SQRT_2)) + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI


def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    return xhat * gain + bias, (xhat, ivar, gain)


def _layernorm_backward(dy: np.ndarray, cache):
    xhat, ivar, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = ivar * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    b, l, h = x.shape
    return x.reshape(b, l, num_heads, h // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, nh, l, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, l, nh * dh)


def _forward_body(params: Params, config: EncoderConfig, ids: np.ndarray, mask: np.ndarray):
    """Run the transformer body through the final LayerNorm.

    Returns hidden states [B, L, h] and a cache for the backward pass.
    """
    eps = config.ln_epsilon
    nh = config.num_heads
    scale = 1.0 / math.sqrt(config.hidden_dim // nh)
    x = params["emb/token"][ids] + params["emb/pos"][: ids.shape[1]]
    key_mask = mask[:, None, None, :]
    layers = []
    for i in range(config.num_layers):
        p = f"layer{i}"
        xn1, ln1_cache = _layernorm(x, params[f"{p}/ln1/gain"], params[f"{p}/ln1/bias"], eps)
        q = xn1 @ params[f"{p}/attn/wq"] + params[f"{p}/attn/bq"]
        k = xn1 @ params[f"{p}/attn/wk"] + params[f"{p}/attn/bk"]
        v = xn1 @ params[f"{p}/attn/wv"] + params[f"{p}/attn/bv"]
        qh, kh, vh = _split_heads(q, nh), _split_heads(k, nh), _split_heads(v, nh)
        scores = np.where(key_mask, (qh @ kh.transpose(0, 1, 3, 2)) * scale, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        expd = np.exp(scores)
        probs = expd / expd.sum(axis=-1, keepdims=True)
        ctx = _merge_heads(probs @ vh)
        attn = ctx @ params[f"{p}/attn/wo"] + params[f"{p}/attn/bo"]
        a = x + attn
        xn2, ln2_cache = _layernorm(a, params[f"{p}/ln2/gain"], params[f"{p}/ln2/bias"], eps)
        u = xn2 @ params[f"{p}/ffn/w1"] + params[f"{p}/ffn/b1"]
        gu = gelu(u)
        x_next = a + gu @ params[f"{p}/ffn/w2"] + params[f"{p}/ffn/b2"]
        layers.append((xn1, ln1_cache, qh, kh, vh, probs, ctx, xn2, ln2_cache, u, gu))
        x = x_next
    hidden, final_cache = _layernorm(x, params["final_ln/gain"], params["final_ln/bias"], eps)
    cache = {
        "ids": ids,
        "mask": mask,
        "layers": layers,
        "final_cache": final_cache,
        "scale": scale,
    }
    return hidden, cache


def _backward_body(params: Params, config: EncoderConfig, cache, d_hidden: np.ndarray) -> Params:
    """Gradients of sum(d_hidden * hidden) w.r.t. the body parameters."""
    nh = config.num_heads
    scale = cache["scale"]
    ids = cache["ids"]
    grads: Params = {name: np.zeros_like(arr) for name, arr in params.items()}

    dx, dg, db = _layernorm_backward(d_hidden, cache["final_cache"])
    grads["final_ln/gain"] += dg
    grads["final_ln/bias"] += db

    for i in reversed(range(config.num_layers)):
        p = f"layer{i}"
        xn1, ln1_cache, qh, kh, vh, probs, ctx, xn2, ln2_cache, u, gu = cache["layers"][i]
        # ffn sublayer: out = a + gelu(xn2 @ w1 + b1) @ w2 + b2
        da = dx.copy()
        df = dx
        grads[f"{p}/ffn/w2"] += np.einsum("blf,blh->fh", gu, df)
        grads[f"{p}/ffn/b2"] += df.sum(axis=(0, 1))
        du = (df @ params[f"{p}/ffn/w2"].T) * gelu_grad(u)
        grads[f"{p}/ffn/w1"] += np.einsum("blh,blf->hf", xn2, du)
        grads[f"{p}/ffn/b1"] += du.sum(axis=(0, 1))
        dxn2 = du @ params[f"{p}/ffn/w1"].T
        dx2, dg, db = _layernorm_backward(dxn2, ln2_cache)
        grads[f"{p}/ln2/gain"] += dg
        grads[f"{p}/ln2/bias"] += db
        da += dx2
        # attention sublayer: a = x + (merge(P @ V) @ wo + bo)
        dattn = da
        grads[f"{p}/attn/wo"] += np.einsum("blh,blo->ho", ctx, dattn)
        grads[f"{p}/attn/bo"] += dattn.sum(axis=(0, 1))
        dctx = _split_heads(dattn @ params[f"{p}/attn/wo"].T, nh)
        dprobs = dctx @ vh.transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dqh = (dscores @ kh) * scale
        dkh = (dscores.transpose(0, 1, 3, 2) @ qh) * scale
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        dxn1 = (
            dq @ params[f"{p}/attn/wq"].T
            + dk @ params[f"{p}/attn/wk"].T
            + dv @ params[f"{p}/attn/wv"].T
        )
        for name, grad in (("wq", dq), ("wk", dk), ("wv", dv)):
            grads[f"{p}/attn/{name}"] += np.einsum("blh,blo->ho", xn1, grad)
        grads[f"{p}/attn/bq"] += dq.sum(axis=(0, 1))
        grads[f"{p}/attn/bk"] += dk.sum(axis=(0, 1))
        grads[f"{p}/attn/bv"] += dv.sum(axis=(0, 1))
        dx1, dg, db = _layernorm_backward(dxn1, ln1_cache)
        grads[f"{p}/ln1/gain"] += dg
        grads[f"{p}/ln1/bias"] += db
        dx = da + dx1

    flat_ids = ids.reshape(-1)
    np.add.at(grads["emb/token"], flat_ids, dx.reshape(-1, dx.shape[-1]))
    grads["emb/pos"][: ids.shape[1]] += dx.sum(axis=0)
    return grads


def _forward_bow(params: Params, ids: np.ndarray, mask: np.ndarray):
    emb = params["emb/token"][ids] * mask[..., None]
    counts = mask.sum(axis=1).astype(emb.dtype)
    pooled = emb.sum(axis=1) / counts[:, None]
    pre = pooled @ params["mlp/w1"] + params["mlp/b1"]
    act = np.tanh(pre)
    out = act @ params["mlp/w2"] + params["mlp/b2"]
    return out, {"ids": ids, "mask": mask, "counts": counts, "pooled": pooled, "act": act}


def _backward_bow(params: Params, cache, grad_out: np.ndarray) -> Params:
    grads: Params = {name: np.zeros_like(arr) for name, arr in params.items()}
    act, pooled, counts = cache["act"], cache["pooled"], cache["counts"]
    grads["mlp/w2"] += act.T @ grad_out
    grads["mlp/b2"] += grad_out.sum(axis=0)
    dact = grad_out @ params["mlp/w2"].T
    dpre = dact * (1.0 - act * act)
    grads["mlp/w1"] += pooled.T @ dpre
    grads["mlp/b1"] += dpre.sum(axis=0)
    dpooled = dpre @ params["mlp/w1"].T
    ids, mask = cache["ids"], cache["mask"]
    demb = (dpooled / counts[:, None])[:, None, :] * mask[..., None]
    np.add.at(grads["emb/token"], ids.reshape(-1), demb.reshape(-1, demb.shape[-1]))
    return grads


def encode_with_cache(params: Params, config: EncoderConfig, batch: Batch, tower: str = "doc"):
    """Forward pass returning (embeddings [B, k], cache)."""
    ids, mask = _pad_batch(batch, config.max_len(tower))
    if config.arch == ARCH_BOW_MLP:
        return _forward_bow(params, ids, mask)
    hidden, cache = _forward_body(params, config, ids, mask)
    cache["cls"] = hidden[:, 0, :]
    out = cache["cls"] @ params["out/w"] + params["out/b"]
    return out, cache


def encode(params: Params, config: EncoderConfig, batch: Batch, tower: str = "doc") -> np.ndarray:
    out, _ = encode_with_cache(params, config, batch, tower)
    return out


def backward_from_cache(params: Params, config: EncoderConfig, cache, grad_out: np.ndarray) -> Params:
    """Exact gradients of sum(grad_out * embeddings) w.r.t. every parameter."""
    if config.arch == ARCH_BOW_MLP:
        return _backward_bow(params, cache, grad_out)
    if grad_out.shape != (cache["ids"].shape[0], config.emb_dim):
        raise EncoderError(f"grad_out shape {grad_out.shape} does not match batch")
    d_hidden = np.zeros(cache["ids"].shape + (config.hidden_dim,), dtype=grad_out.dtype)
    d_hidden[:, 0, :] = grad_out @ params["out/w"].T
    grads = _backward_body(params, config, cache, d_hidden)
    grads["out/w"] += cache["cls"].T @ grad_out
    grads["out/b"] += grad_out.sum(axis=0)
    return grads


def backward(
    params: Params, config: EncoderConfig, batch: Batch, grad_out: np.ndarray, tower: str = "doc"
) -> Params:
    """Recompute the forward pass and return parameter gradients."""
    _, cache = encode_with_cache(params, config, batch, tower)
    return backward_from_cache(params, config, cache, grad_out)


def hidden_states(params: Params, config: EncoderConfig, batch: Batch, tower: str = "doc"):
    """Per-position hidden states after the final LayerNorm (transformer only)."""
    if config.arch != ARCH_TRANSFORMER:
        raise EncoderError("per-position hidden states require the transformer arch")
    ids, mask = _pad_batch(batch, config.max_len(tower))
    return _forward_body(params, config, ids, mask)


def hidden_backward(params: Params, config: EncoderConfig, cache, d_hidden: np.ndarray) -> Params:
    return _backward_body(params, config, cache, d_hidden)


def score(q_emb: np.ndarray, d_emb: np.ndarray) -> float:
    """Inner product of one query and one doc embedding."""
    q = np.asarray(q_emb)
    d = np.asarray(d_emb)
    if q.shape != d.shape or q.ndim != 1:
        raise EncoderError(f"dimension mismatch: {q.shape} vs {d.shape}")
    return float(q @ d)


def save_checkpoint(
    prefix: str,
    query_params: Params,
    doc_params: Params,
    config: EncoderConfig,
    extra_meta: Optional[dict] = None,
) -> str:
    """Write both towers (one tensor set when shared) and return the fingerprint."""
    tensors: Params = {}
    if config.share_towers:
        if query_params is not doc_params:
            raise EncoderError("share_towers checkpoints require a single shared tower")
        for name, arr in query_params.items():
            tensors[f"tower/{name}"] = arr
    else:
        for name, arr in query_params.items():
            tensors[f"query/{name}"] = arr
        for name, arr in doc_params.items():
            tensors[f"doc/{name}"] = arr
    meta = {"format": CHECKPOINT_FORMAT, "config": config.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    util.save_tensors(prefix, tensors, meta)
    return util.tensor_fingerprint(prefix)


def load_checkpoint(prefix: str) -> Tuple[Params, Params, EncoderConfig, dict]:
    tensors, meta = util.load_tensors(prefix)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise EncoderError(f"not a checkpoint: {prefix}")
    config = EncoderConfig.from_dict(meta["config"])
    if config.share_towers:
        tower = {n[len("tower/") :]: a for n, a in tensors.items() if n.startswith("tower/")}
        return tower, tower, config, meta
    query = {n[len("query/") :]: a for n, a in tensors.items() if n.startswith("query/")}
    doc = {n[len("doc/") :]: a for n, a in tensors.items() if n.startswith("doc/")}
    return query, doc, config, meta

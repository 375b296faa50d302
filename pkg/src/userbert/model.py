"""Hierarchical user model: behavior encoder, self-attention context encoder,
attentive-pooling aggregator and dot-product matchers.

All encoder functions are batched over sequences: ``ids`` is (B, L) and
``valid_len`` is (B,). Positions ``>= valid_len`` are padding and never leak
into any output.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk

PAD_ID = 0
MASK_ID = 1
N_SPECIAL = 2

PARAM_NAMES = (
    "id_embedding",
    "pos_embedding",
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_out",
    "pool_proj",
    "pool_query",
)
ENCODER_BODY = ("pos_embedding", "attn_q", "attn_k", "attn_v", "attn_out", "pool_proj", "pool_query")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    hidden_dim: int = 32
    query_dim: int = 32
    heads: int = 2
    max_len: int = 64
    pooling: str = "attention"

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise nk.ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.pooling not in ("attention", "mean"):
            raise nk.ConfigError(f"unknown pooling mode {self.pooling!r}")
        for name in ("vocab_size", "hidden_dim", "query_dim", "heads", "max_len"):
            if getattr(self, name) <= 0:
                raise nk.ConfigError(f"{name} must be positive")

    @property
    def n_rows(self) -> int:
        return self.vocab_size + N_SPECIAL


@dataclass
class ModelParams:
    dims: ModelDims
    groups: dict[str, nk.ParamGroup] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.groups[name].value

    def values(self) -> dict[str, np.ndarray]:
        return {k: g.value for k, g in self.groups.items()}

    def snapshot(self) -> "ModelParams":
        """Deep copy of the values only (no optimizer state)."""
        return ModelParams(
            self.dims, {k: nk.ParamGroup(k, g.value.copy()) for k, g in self.groups.items()}
        )

    def clone(self) -> "ModelParams":
        return copy.deepcopy(self)

    def with_values(self, values: dict[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.dims, {k: nk.ParamGroup(k, values[k]) for k in self.groups})


def init_params(dims: ModelDims, rng: np.random.Generator, scale: float = 0.05) -> ModelParams:
    """Uniform(-scale, scale) init for every array; the PAD row starts (and stays) zero."""
    d, q = dims.hidden_dim, dims.query_dim
    shapes = {
        "id_embedding": (dims.n_rows, d),
        "pos_embedding": (dims.max_len, d),
        "attn_q": (d, d),
        "attn_k": (d, d),
        "attn_v": (d, d),
        "attn_out": (d, d),
        "pool_proj": (d, q),
        "pool_query": (q,),
    }
    groups = {}
    for name in PARAM_NAMES:
        v = rng.uniform(-scale, scale, size=shapes[name])
        if name == "id_embedding":
            v[PAD_ID] = 0.0
        groups[name] = nk.ParamGroup(name, v)
    return ModelParams(dims, groups)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _valid_mask(valid_len: np.ndarray, L: int) -> np.ndarray:
    return np.arange(L)[None, :] < valid_len[:, None]


def _check_ids(ids: np.ndarray, n_rows: int) -> None:
    bad = (ids < 0) | (ids >= n_rows)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"behavior id {int(ids[idx])} at index {idx} outside vocabulary [0, {n_rows})")


@dataclass
class EncodeCache:
    ids: np.ndarray
    mask: np.ndarray
    emb: np.ndarray
    qkv: np.ndarray
    attn: np.ndarray
    ctx_heads: np.ndarray
    hidden: np.ndarray
    pool_t: np.ndarray | None
    pool_alpha: np.ndarray | None
    drop_emb: np.ndarray | None = None
    drop_ctx: np.ndarray | None = None


def _split_heads(x: np.ndarray, h: int) -> np.ndarray:
    B, L, d = x.shape
    return x.reshape(B, L, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def _dropout_mask(rng, shape, rate):
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _qkv_weight(values) -> np.ndarray:
    return np.concatenate([values["attn_q"], values["attn_k"], values["attn_v"]], axis=1)


def encode_forward(
    values: dict[str, np.ndarray],
    dims: ModelDims,
    ids: np.ndarray,
    valid_len: np.ndarray,
    *,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, EncodeCache]:
    """Encode a batch of sequences.

    Returns ``(hidden, user, cache)`` with hidden (B, L, d) and user (B, d).
    The batch is trimmed to its longest valid length; positions beyond that
    are padding anyway.
    """
    ids = np.asarray(ids)
    valid_len = np.asarray(valid_len)
    if ids.ndim != 2 or valid_len.shape != (ids.shape[0],):
        raise nk.ShapeError("encode", "ids", ids.shape, "valid_len", valid_len.shape)
    if (valid_len < 1).any():
        raise nk.ConfigError("every sequence needs valid_len >= 1")
    L = int(valid_len.max())
    if L > dims.max_len or L > ids.shape[1]:
        raise nk.ConfigError(f"valid_len {L} exceeds max_len {min(dims.max_len, ids.shape[1])}")
    mask = _valid_mask(valid_len, L)
    ids = np.where(mask, ids[:, :L], PAD_ID)
    _check_ids(ids, dims.n_rows)
    B, d, h = len(ids), dims.hidden_dim, dims.heads

    emb = values["id_embedding"][ids]
    emb += values["pos_embedding"][:L]
    emb[~mask] = 0.0
    drop_emb = drop_ctx = None
    if dropout > 0.0 and rng is not None:
        drop_emb = _dropout_mask(rng, emb.shape, dropout)
        emb *= drop_emb

    qkv = (emb.reshape(B * L, d) @ _qkv_weight(values)).reshape(B, L, 3, h, d // h).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = q @ k.transpose(0, 1, 3, 2)
    scores *= 1.0 / math.sqrt(d // h)
    attn = nk.masked_softmax(scores, mask[:, None, None, :], inplace=True)
    ctx_heads = attn @ v
    ctx = _merge_heads(ctx_heads) @ values["attn_out"]
    if drop_emb is not None:
        drop_ctx = _dropout_mask(rng, ctx.shape, dropout)
        ctx *= drop_ctx
    ctx += emb
    ctx[~mask] = 0.0
    hidden = ctx
    nk.check_finite("context_encoder", hidden)

    if dims.pooling == "mean":
        user = nk.masked_mean(hidden, mask)
        pool_t = pool_alpha = None
    else:
        pool_t = np.tanh(hidden @ values["pool_proj"])
        pool_alpha = nk.masked_softmax(pool_t @ values["pool_query"], mask, inplace=True)
        user = np.einsum("bl,bld->bd", pool_alpha, hidden)
    nk.check_finite("aggregator", user)
    cache = EncodeCache(ids, mask, emb, qkv, attn, ctx_heads, hidden, pool_t, pool_alpha, drop_emb, drop_ctx)
    return hidden, user, cache


def encode_backward(
    values: dict[str, np.ndarray],
    dims: ModelDims,
    cache: EncodeCache,
    d_hidden: np.ndarray | None,
    d_user: np.ndarray | None,
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate encoder gradients into ``grads`` (arrays shaped like the params)."""
    c = cache
    B, L, d = c.hidden.shape
    h = dims.heads
    dh_total = np.zeros((B, L, d)) if d_hidden is None else d_hidden.copy()

    if d_user is not None:
        if dims.pooling == "mean":
            dh_total += nk.masked_mean_backward(d_user, c.mask)
        else:
            alpha, t = c.pool_alpha, c.pool_t
            d_alpha = np.einsum("bd,bld->bl", d_user, c.hidden)
            dh_total += alpha[..., None] * d_user[:, None, :]
            ds = nk.softmax_backward(d_alpha, alpha)
            grads["pool_query"] += np.einsum("bl,blq->q", ds, t)
            dz = nk.tanh_backward(ds[..., None] * values["pool_query"], t)
            dh_from_pool, dP = nk.matmul_backward(dz, c.hidden, values["pool_proj"])
            grads["pool_proj"] += dP
            dh_total += dh_from_pool

    dh_total[~c.mask] = 0.0
    d_ctx = dh_total if c.drop_ctx is None else dh_total * c.drop_ctx

    merged = _merge_heads(c.ctx_heads)
    d_merged, dWo = nk.matmul_backward(d_ctx, merged, values["attn_out"])
    grads["attn_out"] += dWo
    d_ctx_heads = _split_heads(d_merged, h)
    q, k, v = c.qkv[0], c.qkv[1], c.qkv[2]
    d_attn = d_ctx_heads @ v.transpose(0, 1, 3, 2)
    d_qkv = np.empty((B, L, 3, h, d // h))
    d_qkv[:, :, 2] = (c.attn.transpose(0, 1, 3, 2) @ d_ctx_heads).transpose(0, 2, 1, 3)
    d_scores = nk.softmax_backward(d_attn, c.attn)
    d_scores *= 1.0 / math.sqrt(d // h)
    d_qkv[:, :, 0] = (d_scores @ k).transpose(0, 2, 1, 3)
    d_qkv[:, :, 1] = (d_scores.transpose(0, 1, 3, 2) @ q).transpose(0, 2, 1, 3)
    d_qkv = d_qkv.reshape(B * L, 3 * d)
    emb2 = c.emb.reshape(B * L, d)
    dW = emb2.T @ d_qkv
    grads["attn_q"] += dW[:, :d]
    grads["attn_k"] += dW[:, d : 2 * d]
    grads["attn_v"] += dW[:, 2 * d :]
    d_emb = (d_qkv @ _qkv_weight(values).T).reshape(B, L, d)
    d_emb += dh_total  # residual branch

    if c.drop_emb is not None:
        d_emb *= c.drop_emb
    d_emb[~c.mask] = 0.0
    grads["pos_embedding"][:L] += d_emb.sum(axis=0)
    grads["id_embedding"] += nk.embedding_backward(d_emb, c.ids, dims.n_rows)
    grads["id_embedding"][PAD_ID] = 0.0


def zero_grads(values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in values.items()}


# ---------------------------------------------------------------------------
# Single-sequence conveniences
# ---------------------------------------------------------------------------


def encode_behaviors(seq, params: ModelParams) -> np.ndarray:
    """Behavior embeddings (max_len, d): id row + position row, zero rows for padding."""
    ids = np.asarray(seq.ids)
    _check_ids(ids[: seq.valid_len], params.dims.n_rows)
    L = len(ids)
    mask = np.arange(L) < seq.valid_len
    emb = params["id_embedding"][np.where(mask, ids, PAD_ID)] + params["pos_embedding"][:L]
    return np.where(mask[:, None], emb, 0.0)


def encode_behavior_id(behavior_id, params: ModelParams) -> np.ndarray:
    """Position-free embedding of one behavior (or an array of them)."""
    b = np.asarray(behavior_id)
    if (b < N_SPECIAL).any() or (b >= params.dims.n_rows).any():
        raise nk.ConfigError(f"encode_behavior_id needs ids in [{N_SPECIAL}, {params.dims.n_rows}), got {b}")
    return params["id_embedding"][b].copy()


def context_encode(behavior_embs: np.ndarray, valid_len: int, params: ModelParams) -> np.ndarray:
    """Self-attention with residual over already-embedded behaviors (L, d)."""
    if valid_len < 1:
        raise nk.ConfigError("context_encode needs valid_len >= 1")
    v = params.values()
    L, d = behavior_embs.shape
    mask = (np.arange(L) < valid_len)[None]
    x = np.where(mask[..., None], behavior_embs[None], 0.0)
    h = params.dims.heads
    q = _split_heads(x @ v["attn_q"], h)
    k = _split_heads(x @ v["attn_k"], h)
    vv = _split_heads(x @ v["attn_v"], h)
    attn = nk.masked_softmax((q @ k.transpose(0, 1, 3, 2)) / math.sqrt(d // h), mask[:, None, None, :])
    ctx = _merge_heads(attn @ vv) @ v["attn_out"]
    return np.where(mask[..., None], ctx + x, 0.0)[0]


def aggregate(hidden: np.ndarray, valid_len: int, params: ModelParams) -> np.ndarray:
    L = hidden.shape[0]
    mask = np.arange(L) < valid_len
    if params.dims.pooling == "mean":
        return nk.masked_mean(hidden[None], mask[None])[0]
    t = np.tanh(hidden @ params["pool_proj"])
    alpha = nk.masked_softmax(t @ params["pool_query"], mask)
    return alpha @ np.where(mask[:, None], hidden, 0.0)


def encode_user(seq, params: ModelParams) -> np.ndarray:
    ids = np.asarray(seq.ids)[None]
    _, user, _ = encode_forward(params.values(), params.dims, ids, np.array([seq.valid_len]))
    return user[0]


def encode_users(ids: np.ndarray, valid_len: np.ndarray, params: ModelParams, chunk: int = 128) -> np.ndarray:
    """User embeddings for a (N, L) batch.

    Rows are processed in length-sorted chunks so each chunk is trimmed to
    little more than its own longest sequence; results come back in input order.
    """
    values = params.values()
    valid_len = np.asarray(valid_len)
    out = np.empty((len(ids), params.dims.hidden_dim))
    order = np.argsort(valid_len, kind="stable")
    for s in range(0, len(ids), chunk):
        rows = order[s : s + chunk]
        _, u, _ = encode_forward(values, params.dims, ids[rows], valid_len[rows])
        out[rows] = u
    return out


def match(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise nk.ShapeError("match", "a", a.shape, "b", b.shape)
    return float(a @ b)

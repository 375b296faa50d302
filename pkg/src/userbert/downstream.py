"""Fine-tuning on click labels and the ranking metrics used to evaluate it.

The fine-tune head is the bare dot-product matcher: a user's window is
encoded, each candidate is looked up in the ID table, and the score is their
dot product trained with binary cross-entropy.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .data import LabeledSet
from .model import ENCODER_BODY, ModelParams, encode_backward, encode_forward, zero_grads
from .pretrain import Adam


class UndefinedMetricError(ValueError):
    pass


@dataclass
class FinetuneConfig:
    """Fine-tuning hyperparameters.

    ``lr_finetune`` defaults to 3e-3 at desk scale; ``FinetuneConfig.published()``
    uses the published 1e-4.
    """

    lr_finetune: float = 3e-3
    steps: int = 500
    batch_size: int = 32
    label_fraction: float = 1.0
    freeze_encoder: bool = False
    seed: int = 0
    per_side: int = 5
    test_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def published(cls, **overrides) -> "FinetuneConfig":
        return cls(**{"lr_finetune": 1e-4, **overrides})

    def validate(self) -> None:
        if not 0.0 < self.label_fraction <= 1.0:
            raise nk.ConfigError(f"label_fraction must be in (0,1] (got {self.label_fraction})")
        if not 0.0 < self.test_fraction < 1.0:
            raise nk.ConfigError(f"test_fraction must be in (0,1) (got {self.test_fraction})")
        if self.lr_finetune < 0:
            raise nk.ConfigError("lr_finetune must be >= 0")
        if self.steps < 0 or self.batch_size <= 0 or self.per_side <= 0:
            raise nk.ConfigError("steps must be >= 0, batch_size and per_side positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise nk.ConfigError(f"unknown FinetuneConfig fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def auc(scores, labels=None) -> float:
    """Mann-Whitney AUC with half credit for ties.

    Accepts either a list of ``(score, label)`` pairs or two parallel arrays.
    """
    if labels is None:
        pairs = np.asarray(scores, dtype=np.float64).reshape(-1, 2)
        scores, labels = pairs[:, 0], pairs[:, 1]
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative examples")
    # average ranks handle ties exactly: a tie contributes 0.5
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    starts = np.r_[0, np.nonzero(np.diff(sorted_s))[0] + 1]
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _queries(ranked_labels) -> list[np.ndarray]:
    arr = ranked_labels
    if isinstance(arr, np.ndarray) and arr.ndim == 1:
        return [arr.astype(np.float64)]
    if arr and np.ndim(arr[0]) == 0:
        return [np.asarray(arr, dtype=np.float64)]
    return [np.asarray(q, dtype=np.float64) for q in arr]


@dataclass
class RankingResult:
    value: float
    n_queries: int
    n_skipped: int


def ndcg_at_k(ranked_labels, k: int = 10, *, detail: bool = False):
    """Mean nDCG@k over queries (each a label list in ranked order).

    Queries without a relevant item are skipped and counted.
    """
    vals, skipped = [], 0
    for q in _queries(ranked_labels):
        if not (q > 0).any():
            skipped += 1
            continue
        disc = 1.0 / np.log2(np.arange(2, min(k, len(q)) + 2))
        dcg = float(q[:k] @ disc[: len(q[:k])])
        ideal = np.sort(q)[::-1][:k]
        idcg = float(ideal @ disc[: len(ideal)])
        vals.append(dcg / idcg)
    if not vals:
        raise UndefinedMetricError("nDCG needs at least one query with a relevant item")
    res = RankingResult(float(np.mean(vals)), len(vals), skipped)
    return res if detail else res.value


def average_precision(ranked_labels, *, detail: bool = False):
    """Mean over queries of the mean precision at each relevant rank."""
    vals, skipped = [], 0
    for q in _queries(ranked_labels):
        rel = q > 0
        if not rel.any():
            skipped += 1
            continue
        prec = np.cumsum(rel) / np.arange(1, len(q) + 1)
        vals.append(float(prec[rel].mean()))
    if not vals:
        raise UndefinedMetricError("AP needs at least one query with a relevant item")
    res = RankingResult(float(np.mean(vals)), len(vals), skipped)
    return res if detail else res.value


# ---------------------------------------------------------------------------
# Scoring and fine-tuning
# ---------------------------------------------------------------------------


def score_batch(values: dict, dims, ids, valid_len, candidates) -> tuple[np.ndarray, tuple]:
    _, user, cache = encode_forward(values, dims, ids, valid_len)
    cand = values["id_embedding"][candidates]
    return np.einsum("bd,bcd->bc", user, cand), (user, cand, cache)


def score(params: ModelParams, data: LabeledSet, chunk: int = 256) -> np.ndarray:
    """Scores (n_users, n_candidates) for every candidate of every user."""
    values = params.values()
    out = np.empty(data.candidates.shape)
    for s in range(0, len(data.user_ids), chunk):
        sl = slice(s, s + chunk)
        out[sl], _ = score_batch(values, params.dims, data.ids[sl], data.valid_len[sl], data.candidates[sl])
    return out


def finetune_loss(params_values: dict, dims, ids, valid_len, candidates, labels) -> tuple[float, dict]:
    """BCE of sigmoid(dot) over a batch and its gradient."""
    logits, (user, cand, cache) = score_batch(params_values, dims, ids, valid_len, candidates)
    loss, sig = nk.bce_with_logits(logits, labels)
    dlogits = nk.bce_backward(sig, labels)
    grads = zero_grads(params_values)
    d_user = np.einsum("bc,bcd->bd", dlogits, cand)
    grads["id_embedding"] += nk.embedding_backward(dlogits[..., None] * user[:, None, :], candidates, dims.n_rows)
    encode_backward(params_values, dims, cache, None, d_user, grads)
    return loss, grads


def finetune(params: ModelParams, data: LabeledSet, cfg: FinetuneConfig) -> tuple[ModelParams, list[float]]:
    """Fine-tune a copy of ``params`` on ``data``; returns (params, per-step losses)."""
    cfg.validate()
    if len(data.user_ids) == 0:
        raise nk.ConfigError("fine-tuning needs a non-empty labeled set")
    params = params.clone()
    for g in params.groups.values():
        # fresh optimizer state; pre-training moments do not carry over
        g.adam_m[...] = 0.0
        g.adam_v[...] = 0.0
        g.step_count = 0
        g.zero_grad()
    for name in ENCODER_BODY:
        params.groups[name].trainable = not cfg.freeze_encoder
    rng = nk.make_rng(cfg.seed, "finetune")
    opt = Adam(cfg.lr_finetune, cfg.beta1, cfg.beta2, cfg.eps) if cfg.lr_finetune > 0 else None
    n = len(data.user_ids)
    bs = min(cfg.batch_size, n)
    losses = []
    for _ in range(cfg.steps):
        rows = rng.choice(n, size=bs, replace=False)
        values = params.values()
        loss, grads = finetune_loss(values, params.dims, data.ids[rows], data.valid_len[rows],
                                    data.candidates[rows], data.labels[rows])
        losses.append(loss)
        if opt is None:
            continue
        for name, g in grads.items():
            params.groups[name].grad += g
        opt.step(params)
    for name in ENCODER_BODY:
        params.groups[name].trainable = True
    return params, losses


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    auc: float
    ndcg_at_10: float
    ap: float
    n_examples: int
    n_queries: int = 0
    n_skipped: int = 0
    config_fingerprint: str = ""
    checkpoint_hash: str = ""

    def validate(self) -> None:
        for name in ("auc", "ndcg_at_10", "ap"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))


def evaluate(params: ModelParams, data: LabeledSet, *, config_fingerprint: str = "",
             checkpoint_hash: str = "") -> EvalReport:
    """AUC over all (user, candidate) pairs; nDCG@10 and AP with one query per user."""
    s = score(params, data)
    order = np.argsort(-s, axis=1, kind="stable")
    ranked = np.take_along_axis(data.labels, order, axis=1)
    nd = ndcg_at_k(list(ranked), 10, detail=True)
    ap = average_precision(list(ranked), detail=True)
    rep = EvalReport(auc(s.ravel(), data.labels.ravel()), nd.value, ap.value, int(data.labels.size),
                     nd.n_queries, nd.n_skipped, config_fingerprint, checkpoint_hash)
    rep.validate()
    return rep


def split_users(n_users: int, test_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (train_rows, test_rows), each sorted. Depends only on ``seed``."""
    if not 0.0 < test_fraction < 1.0:
        raise nk.ConfigError("test_fraction must be in (0,1)")
    perm = nk.make_rng(seed, "user-split").permutation(n_users)
    n_test = max(1, int(round(test_fraction * n_users)))
    if n_test >= n_users:
        raise nk.ConfigError(f"cannot hold out {n_test} of {n_users} users")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def label_subset(n_rows: int, fraction: float, seed: int) -> np.ndarray:
    """Rows of the labeled training users kept at ``fraction`` (at least one)."""
    if not 0.0 < fraction <= 1.0:
        raise nk.ConfigError("label_fraction must be in (0,1]")
    k = max(1, math.ceil(fraction * n_rows - 1e-9))
    return np.sort(nk.make_rng(seed, "label-subset").permutation(n_rows)[:k])


def params_hash(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.values()):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]

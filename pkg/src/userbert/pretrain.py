"""Masked behavior prediction (MBP), behavior sequence matching (BSM) and the
training loop that ties the samplers, the model and Adam together."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import numkit as nk
from .data import (
    BehaviorLog,
    BehaviorSequence,
    MaskedInstance,
    SplitInfeasible,
    mask_batch,
    split_at,
    timestamp_boundary,
)
from .model import ModelDims, ModelParams, encode_backward, encode_forward, init_params, zero_grads
from .sampling import (
    BehaviorPool,
    SamplingMode,
    SequencePool,
    refresh_behavior_pool,
    refresh_sequence_pool,
    select_behavior_negs_batch,
    select_sequence_negs_batch,
)

log = logging.getLogger(__name__)

TASKS = ("mbp+bsm", "mbp", "bsm")


@dataclass
class TrainConfig:
    """Pre-training hyperparameters.

    Defaults are desk scale; ``TrainConfig.published()`` gives the published
    settings (hidden 256, query 200, dropout 0.2, lr 1e-5, 100 behaviors).
    """

    vocab_size: int = 1000
    hidden_dim: int = 32
    query_dim: int = 32
    heads: int = 2
    max_len: int = 64
    pooling: str = "attention"
    K: int = 4
    P: int = 4
    m: int = 1000
    u: int = 100
    interval: int = 50
    lr_pretrain: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    sampling_mode: str = "medium_hard"
    tasks: str = "mbp+bsm"
    mask_rate: float = 0.1
    boundary_fraction: float = 0.5
    dropout: float = 0.0
    init_scale: float = 0.05

    @classmethod
    def published(cls, **overrides) -> "TrainConfig":
        base = dict(hidden_dim=256, query_dim=200, max_len=100, dropout=0.2, lr_pretrain=1e-5)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        for name in ("vocab_size", "hidden_dim", "query_dim", "heads", "max_len", "K", "P", "m", "u",
                     "interval", "batch_size", "init_scale"):
            if getattr(self, name) <= 0:
                raise nk.ConfigError(f"TrainConfig.{name} must be positive (got {getattr(self, name)})")
        if self.steps < 0:
            raise nk.ConfigError("TrainConfig.steps must be >= 0")
        if not self.lr_pretrain > 0:
            raise nk.ConfigError("TrainConfig.lr_pretrain must be positive")
        if self.K > self.m - 1:
            raise nk.ConfigError(f"TrainConfig needs K <= m-1 (K={self.K}, m={self.m})")
        if self.P > self.u - 1:
            raise nk.ConfigError(f"TrainConfig needs P <= u-1 (P={self.P}, u={self.u})")
        if self.m > self.vocab_size:
            raise nk.ConfigError(f"TrainConfig.m={self.m} exceeds vocab_size={self.vocab_size}")
        if self.sampling_mode not in {m.value for m in SamplingMode}:
            raise nk.ConfigError(f"TrainConfig.sampling_mode must be one of {[m.value for m in SamplingMode]}")
        if self.tasks not in TASKS:
            raise nk.ConfigError(f"TrainConfig.tasks must be one of {TASKS}")
        if not 0.0 < self.mask_rate <= 1.0 or not 0.0 < self.boundary_fraction < 1.0:
            raise nk.ConfigError("mask_rate must be in (0,1], boundary_fraction in (0,1)")
        if not 0.0 <= self.dropout < 1.0:
            raise nk.ConfigError("dropout must be in [0,1)")
        self.dims()

    def dims(self) -> ModelDims:
        return ModelDims(self.vocab_size, self.hidden_dim, self.query_dim, self.heads, self.max_len, self.pooling)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise nk.ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass
class PretrainCorpus:
    """Array view of the logs used for pre-training.

    ``full_*`` hold each user's most recent window (MBP input). ``a_*`` and
    ``b_*`` hold the two periods of every BSM-eligible user, split at one
    corpus-wide timestamp boundary so that any first-period sequence ends
    before any second-period one starts.
    """

    user_ids: list[str]
    full_ids: np.ndarray
    full_len: np.ndarray
    boundary: int
    bsm_keys: np.ndarray
    a_ids: np.ndarray
    a_len: np.ndarray
    b_ids: np.ndarray
    b_len: np.ndarray
    a_ts: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    b_ts: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    @classmethod
    def build(cls, logs: Iterable[BehaviorLog], max_len: int, boundary_fraction: float = 0.5) -> "PretrainCorpus":
        logs = [lg for lg in logs if len(lg) >= 2]
        if not logs:
            raise nk.ConfigError("pre-training corpus has no user with >= 2 events")
        n = len(logs)
        full_ids = np.zeros((n, max_len), dtype=np.int64)
        full_len = np.zeros(n, dtype=np.int64)
        for i, lg in enumerate(logs):
            s = BehaviorSequence.from_events(lg.behavior_ids, lg.timestamps, max_len)
            full_ids[i], full_len[i] = s.ids, s.valid_len
        all_ts = np.concatenate([lg.timestamps for lg in logs])
        boundary = timestamp_boundary(all_ts, boundary_fraction)
        if boundary >= all_ts.max():
            boundary = int(all_ts[all_ts < all_ts.max()].max()) if (all_ts < all_ts.max()).any() else boundary
        keys, a_rows, b_rows = [], [], []
        for i, lg in enumerate(logs):
            try:
                pair = split_at(lg, boundary, max_len)
            except SplitInfeasible:
                continue
            keys.append(i)
            a_rows.append(pair.seq_a)
            b_rows.append(pair.seq_b)

        def stack(seqs):
            if not seqs:
                empty = np.zeros((0, max_len), dtype=np.int64)
                return empty, np.zeros(0, dtype=np.int64), empty.copy()
            return (np.stack([s.ids for s in seqs]), np.array([s.valid_len for s in seqs]),
                    np.stack([s.timestamps for s in seqs]))

        a_ids, a_len, a_ts = stack(a_rows)
        b_ids, b_len, b_ts = stack(b_rows)
        return cls([lg.user_id for lg in logs], full_ids, full_len, boundary,
                   np.asarray(keys, dtype=np.int64), a_ids, a_len, b_ids, b_len, a_ts, b_ts)

    def __len__(self):
        return len(self.user_ids)

    def window(self, i: int) -> BehaviorSequence:
        return BehaviorSequence(self.full_ids[i], np.zeros_like(self.full_ids[i]), int(self.full_len[i]))


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class MbpBatch:
    ids: np.ndarray
    valid_len: np.ndarray
    slot_row: np.ndarray
    slot_pos: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray
    neg_scores: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def n_slots(self) -> int:
        return len(self.labels)

    @property
    def true_ids(self) -> np.ndarray:
        return self.candidates[np.arange(self.n_slots), self.labels]

    @property
    def instances(self) -> list[MaskedInstance]:
        out = []
        for r in range(len(self.ids)):
            s = self.slot_row == r
            seq = BehaviorSequence(self.ids[r], np.zeros_like(self.ids[r]), int(self.valid_len[r]))
            out.append(MaskedInstance(seq, self.slot_pos[s], self.true_ids[s]))
        return out

    @classmethod
    def from_slots(cls, ids, valid_len, slot_row, slot_pos, true_ids, neg_ids, labels,
                   neg_scores=None) -> "MbpBatch":
        """Place each slot's positive at ``labels[slot]`` among its K negatives."""
        if len(ids) == 0:
            raise nk.ConfigError("MBP batch is empty")
        cands = _place_positive(np.asarray(true_ids), neg_ids, labels)
        return cls(ids, np.asarray(valid_len), np.asarray(slot_row), np.asarray(slot_pos), cands,
                   np.asarray(labels), neg_scores)

    @classmethod
    def assemble(cls, instances: list[MaskedInstance], neg_ids: np.ndarray, labels: np.ndarray,
                 neg_scores: np.ndarray | None = None) -> "MbpBatch":
        if not instances:
            raise nk.ConfigError("MBP batch is empty")
        ids = np.stack([inst.seq.ids for inst in instances])
        lens = np.array([inst.seq.valid_len for inst in instances])
        rows = np.concatenate([np.full(len(inst.masked_positions), r) for r, inst in enumerate(instances)])
        pos = np.concatenate([inst.masked_positions for inst in instances])
        targets = np.concatenate([inst.masked_true_ids for inst in instances])
        return cls.from_slots(ids, lens, rows, pos, targets, neg_ids, labels, neg_scores)


def _place_positive(positives: np.ndarray, negatives: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n, k = negatives.shape[:2]
    is_pos = np.arange(k + 1)[None, :] == np.asarray(labels)[:, None]
    out = np.empty((n, k + 1) + negatives.shape[2:], dtype=negatives.dtype)
    out[is_pos] = positives
    out[~is_pos] = negatives.reshape((n * k,) + negatives.shape[2:])
    return out


@dataclass
class BsmBatch:
    a_keys: np.ndarray
    a_ids: np.ndarray
    a_len: np.ndarray
    cand_ids: np.ndarray
    cand_len: np.ndarray
    labels: np.ndarray
    neg_keys: np.ndarray = field(default=None)  # type: ignore[assignment]
    neg_scores: np.ndarray = field(default=None)  # type: ignore[assignment]

    @property
    def n_pairs(self) -> int:
        return len(self.labels)

    @classmethod
    def assemble(cls, a_keys, a_ids, a_len, pos_ids, pos_len, neg_ids, neg_len, labels,
                 neg_keys=None, neg_scores=None) -> "BsmBatch":
        if len(a_ids) == 0:
            raise nk.ConfigError("BSM batch is empty")
        if neg_ids.shape[1] < 1:
            raise nk.ConfigError("BSM needs P >= 1 negatives per pair")
        cand_ids = _place_positive(pos_ids, neg_ids, labels)
        cand_len = _place_positive(pos_len, neg_len, labels)
        return cls(np.asarray(a_keys), a_ids, a_len, cand_ids, cand_len, np.asarray(labels), neg_keys, neg_scores)


def build_mbp_batch(corpus: PretrainCorpus, cfg: TrainConfig, pool: BehaviorPool, id_embedding: np.ndarray,
                    rng: np.random.Generator) -> MbpBatch:
    if cfg.batch_size > len(corpus):
        raise nk.ConfigError(f"batch_size {cfg.batch_size} exceeds {len(corpus)} pre-training users")
    users = rng.choice(len(corpus), size=cfg.batch_size, replace=False)
    ids, rows, pos, targets = mask_batch(corpus.full_ids[users], corpus.full_len[users], rng, cfg.mask_rate)
    negs, scores = select_behavior_negs_batch(targets, pool, id_embedding, cfg.K, rng)
    labels = rng.integers(0, cfg.K + 1, size=len(targets))
    return MbpBatch.from_slots(ids, corpus.full_len[users], rows, pos, targets, negs, labels, scores)


def draw_bsm_rows(corpus: PretrainCorpus, cfg: TrainConfig, rng: np.random.Generator, n_steps: int = 1) -> np.ndarray:
    """Rows into ``corpus.bsm_keys`` for ``n_steps`` future BSM batches, shape (n_steps, batch)."""
    n = len(corpus.bsm_keys)
    if cfg.batch_size > n:
        raise nk.ConfigError(f"batch_size {cfg.batch_size} exceeds {n} BSM-eligible users")
    return np.stack([rng.choice(n, size=cfg.batch_size, replace=False) for _ in range(n_steps)])


def build_bsm_batch(corpus: PretrainCorpus, cfg: TrainConfig, pool: SequencePool,
                    rng: np.random.Generator, rows: np.ndarray | None = None) -> BsmBatch:
    if rows is None:
        rows = draw_bsm_rows(corpus, cfg, rng)[0]
    keys = corpus.bsm_keys[rows]
    a_ids, a_len = corpus.a_ids[rows], corpus.a_len[rows]
    target_emb = pool.embed_targets(keys, a_ids, a_len)
    sel, scores = select_sequence_negs_batch(keys, target_emb, pool, cfg.P, rng)
    labels = rng.integers(0, cfg.P + 1, size=len(rows))
    return BsmBatch.assemble(keys, a_ids, a_len, corpus.b_ids[rows], corpus.b_len[rows],
                             pool.ids[sel], pool.valid_len[sel], labels, pool.keys[sel], scores)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray] | None
    accuracy: float


def mbp_forward_backward(batch: MbpBatch, values: dict[str, np.ndarray], dims: ModelDims, *,
                         need_grad: bool = True, dropout: float = 0.0,
                         rng: np.random.Generator | None = None) -> LossResult:
    """Cross-entropy of each masked slot's hidden vector against its K+1 candidates."""
    if batch.n_slots == 0:
        raise nk.ConfigError("MBP batch has no masked slots")
    hidden, _, cache = encode_forward(values, dims, batch.ids, batch.valid_len, dropout=dropout, rng=rng)
    h = hidden[batch.slot_row, batch.slot_pos]
    cand = values["id_embedding"][batch.candidates]
    logits = np.einsum("nd,nkd->nk", h, cand)
    loss, probs = nk.cross_entropy(logits, batch.labels)
    acc = float((logits.argmax(axis=1) == batch.labels).mean())
    if not need_grad:
        return LossResult(loss, None, acc)
    grads = zero_grads(values)
    dlogits = nk.cross_entropy_backward(probs, batch.labels)
    dh = np.einsum("nk,nkd->nd", dlogits, cand)
    grads["id_embedding"] += nk.embedding_backward(dlogits[..., None] * h[:, None, :], batch.candidates,
                                                    dims.n_rows)
    d_hidden = np.zeros_like(hidden)
    np.add.at(d_hidden, (batch.slot_row, batch.slot_pos), dh)
    encode_backward(values, dims, cache, d_hidden, None, grads)
    return LossResult(loss, grads, acc)


def bsm_forward_backward(batch: BsmBatch, values: dict[str, np.ndarray], dims: ModelDims, *,
                         need_grad: bool = True, dropout: float = 0.0,
                         rng: np.random.Generator | None = None) -> LossResult:
    """Re-encode target and candidates with the current values; softmax over P+1 dot products."""
    B, C = batch.cand_len.shape
    if C < 2:
        raise nk.ConfigError("BSM needs P >= 1 negatives per pair")
    ids = np.concatenate([batch.a_ids, batch.cand_ids.reshape(B * C, -1)])
    lens = np.concatenate([batch.a_len, batch.cand_len.reshape(-1)])
    _, users, cache = encode_forward(values, dims, ids, lens, dropout=dropout, rng=rng)
    r_a = users[:B]
    r_c = users[B:].reshape(B, C, -1)
    logits = np.einsum("bd,bcd->bc", r_a, r_c)
    loss, probs = nk.cross_entropy(logits, batch.labels)
    acc = float((logits.argmax(axis=1) == batch.labels).mean())
    if not need_grad:
        return LossResult(loss, None, acc)
    grads = zero_grads(values)
    dlogits = nk.cross_entropy_backward(probs, batch.labels)
    d_users = np.concatenate([
        np.einsum("bc,bcd->bd", dlogits, r_c),
        (dlogits[..., None] * r_a[:, None, :]).reshape(B * C, -1),
    ])
    encode_backward(values, dims, cache, None, d_users, grads)
    return LossResult(loss, grads, acc)


def mbp_loss(batch: MbpBatch, params: ModelParams) -> float:
    return mbp_forward_backward(batch, params.values(), params.dims, need_grad=False).loss


def bsm_loss(batch: BsmBatch, params: ModelParams) -> float:
    return bsm_forward_backward(batch, params.values(), params.dims, need_grad=False).loss


def joint_loss_fn(mbp: MbpBatch | None, bsm: BsmBatch | None, dims: ModelDims) -> nk.LossFn:
    """``values -> (loss, grads)`` closure over fixed batches, for gradient checks."""

    def fn(values):
        total, grads = 0.0, zero_grads(values)
        for batch, f in ((mbp, mbp_forward_backward), (bsm, bsm_forward_backward)):
            if batch is not None:
                r = f(batch, values, dims)
                total += r.loss
                for k in grads:
                    grads[k] += r.grads[k]
        return total, grads

    return fn


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise nk.ConfigError(f"learning rate must be positive, got {lr}")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, params: ModelParams) -> None:
        nk.adam_step(params.groups, self.lr, self.beta1, self.beta2, self.eps)


@dataclass
class StepLosses:
    loss_total: float
    loss_mbp: float | None
    loss_bsm: float | None
    mbp_acc: float | None
    bsm_acc: float | None


def joint_step(mbp: MbpBatch | None, bsm: BsmBatch | None, params: ModelParams, opt: Adam, *,
               dropout: float = 0.0, rng: np.random.Generator | None = None) -> StepLosses:
    """One optimizer step on L_mbp + L_bsm.

    Each task's gradient is computed in isolation and then added to the
    (zeroed) accumulators, so the applied gradient is exactly g_mbp + g_bsm.
    Passing ``None`` for a batch trains on the other task alone; an empty
    batch object is an error.
    """
    if mbp is None and bsm is None:
        raise nk.ConfigError("joint_step needs at least one task batch")
    values = params.values()
    results = {}
    for name, batch, f in (("mbp", mbp, mbp_forward_backward), ("bsm", bsm, bsm_forward_backward)):
        if batch is None:
            continue
        r = f(batch, values, params.dims, dropout=dropout, rng=rng)
        for k, g in r.grads.items():
            nk.check_finite(f"grad:{k}", g)
            params.groups[k].grad += g
        results[name] = r
    l_mbp = results["mbp"].loss if "mbp" in results else None
    l_bsm = results["bsm"].loss if "bsm" in results else None
    if l_mbp is not None and l_bsm is not None:
        total = l_mbp + l_bsm
    else:
        total = l_mbp if l_mbp is not None else l_bsm
    opt.step(params)
    return StepLosses(
        total, l_mbp, l_bsm,
        results["mbp"].accuracy if "mbp" in results else None,
        results["bsm"].accuracy if "bsm" in results else None,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    params: ModelParams
    init_params: ModelParams
    metrics: list[dict]
    timing: dict
    corpus: PretrainCorpus


def _timing_summary(acc: dict, steps: int) -> dict:
    n = max(steps, 1)
    out = {k: v / n for k, v in acc.items()}
    out["sample_time"] = out["behavior_sample_time"] + out["sequence_sample_time"]
    return out


def run_pretraining(
    corpus: PretrainCorpus | list[BehaviorLog],
    cfg: TrainConfig,
    *,
    init: ModelParams | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """Pre-train from a fresh (seeded) init for ``cfg.steps`` steps.

    Per step: new behavior pool; sequence pool rebuilt if due; MBP and BSM
    batches from independently drawn users; one Adam step on the summed loss.
    When the sequence pool is rebuilt, the BSM target users for every step
    until the next rebuild are drawn too and embedded with the same snapshot.
    ``on_step`` receives each metrics record as it is produced.
    """
    cfg.validate()
    if not isinstance(corpus, PretrainCorpus):
        corpus = PretrainCorpus.build(corpus, cfg.max_len, cfg.boundary_fraction)
    dims = cfg.dims()
    params = init if init is not None else init_params(dims, nk.make_rng(cfg.seed, "init"), cfg.init_scale)
    start = params.clone()
    rng = nk.make_rng(cfg.seed, "train")
    drop_rng = nk.make_rng(cfg.seed, "dropout") if cfg.dropout > 0 else None
    opt = Adam(cfg.lr_pretrain, cfg.beta1, cfg.beta2, cfg.eps)
    mode = SamplingMode(cfg.sampling_mode)
    use_mbp = cfg.tasks in ("mbp+bsm", "mbp")
    use_bsm = cfg.tasks in ("mbp+bsm", "bsm")
    if use_bsm and mode is not SamplingMode.GLOBAL_HARDEST and len(corpus.bsm_keys) < cfg.u:
        raise nk.ConfigError(f"only {len(corpus.bsm_keys)} BSM-eligible users for a pool of u={cfg.u}")

    seq_pool: SequencePool | None = None
    metrics = []
    clock = {"behavior_sample_time": 0.0, "sequence_sample_time": 0.0, "step_time": 0.0}
    for step in range(1, cfg.steps + 1):
        try:
            t0 = time.perf_counter()
            mbp = bsm = None
            if use_mbp:
                pool = refresh_behavior_pool(rng, cfg.vocab_size, cfg.m, mode)
                mbp = build_mbp_batch(corpus, cfg, pool, params["id_embedding"], rng)
            t1 = time.perf_counter()
            refreshed = False
            if use_bsm:
                if seq_pool is None or seq_pool.due(step):
                    seq_pool = refresh_sequence_pool(
                        step, corpus.bsm_keys, [corpus.user_ids[k] for k in corpus.bsm_keys],
                        corpus.b_ids, corpus.b_len, params, cfg.u, rng, cfg.interval, mode,
                    )
                    refreshed = True
                    schedule = draw_bsm_rows(corpus, cfg, rng, min(cfg.interval, cfg.steps - step + 1))
                    uniq = np.unique(schedule)
                    seq_pool.prime_targets(corpus.bsm_keys[uniq], corpus.a_ids[uniq], corpus.a_len[uniq])
                bsm = build_bsm_batch(corpus, cfg, seq_pool, rng, schedule[step - seq_pool.snapshot_step])
            t2 = time.perf_counter()
            res = joint_step(mbp, bsm, params, opt, dropout=cfg.dropout, rng=drop_rng)
            t3 = time.perf_counter()
        except Exception as exc:
            raise RuntimeError(f"pre-training aborted at step {step}: {exc}") from exc
        clock["behavior_sample_time"] += t1 - t0
        clock["sequence_sample_time"] += t2 - t1
        clock["step_time"] += t3 - t0
        rec = {
            "step": step,
            "loss_total": res.loss_total,
            "loss_mbp": res.loss_mbp,
            "loss_bsm": res.loss_bsm,
            "mbp_acc": res.mbp_acc,
            "bsm_acc": res.bsm_acc,
            "pool_refresh": refreshed,
            "mbp_neg_sim": None if mbp is None else float(mbp.neg_scores.mean()),
            "bsm_neg_sim": None if bsm is None else float(bsm.neg_scores.mean()),
        }
        metrics.append(rec)
        if on_step is not None:
            on_step(rec)
    return PretrainResult(params, start, metrics, _timing_summary(clock, cfg.steps), corpus)

"""Negative sampling for contrastive pre-training.

Behaviors: a candidate pool of ``m`` ids is re-drawn every step and the ``K``
candidates most cosine-similar to the masked behavior are taken as negatives
(medium-hard). Sequences: a pool of ``u`` other-user sequences is embedded
with a frozen parameter snapshot and only rebuilt every ``interval`` steps.

``random`` and ``global_hardest`` modes exist for ablation. ``global_hardest``
uses the whole vocabulary / every eligible user as the pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import numkit as nk
from .model import N_SPECIAL, ModelParams, encode_users


class SamplingMode(str, Enum):
    RANDOM = "random"
    MEDIUM_HARD = "medium_hard"
    GLOBAL_HARDEST = "global_hardest"


class PoolExhausted(RuntimeError):
    pass


@dataclass
class BehaviorPool:
    candidate_ids: np.ndarray
    mode: SamplingMode


@dataclass
class NegSet:
    ids: np.ndarray
    similarity_scores: np.ndarray


def refresh_behavior_pool(
    rng: np.random.Generator, vocab_size: int, m: int, mode: SamplingMode | str = SamplingMode.MEDIUM_HARD
) -> BehaviorPool:
    """Draw ``m`` ids uniformly with replacement from the real vocabulary.

    In ``global_hardest`` mode the pool is the full vocabulary and no random
    numbers are consumed.
    """
    mode = SamplingMode(mode)
    if mode is SamplingMode.GLOBAL_HARDEST:
        return BehaviorPool(np.arange(N_SPECIAL, vocab_size + N_SPECIAL), mode)
    if m < 2:
        raise nk.ConfigError(f"behavior pool size m={m} must be >= 2")
    if m > vocab_size:
        raise nk.ConfigError(f"behavior pool size m={m} exceeds vocabulary size {vocab_size}")
    return BehaviorPool(rng.integers(N_SPECIAL, vocab_size + N_SPECIAL, size=m), mode)


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row, best first.

    Ties go to the smaller column index, so callers order columns by
    ascending key. Entries set to -inf are treated as unavailable.
    """
    n, c = scores.shape
    avail = np.isfinite(scores).sum(axis=1)
    if (avail < k).any():
        row = int(np.argmax(avail < k))
        raise PoolExhausted(f"row {row}: only {int(avail[row])} eligible candidates for k={k}")
    if k <= 16:
        # repeated argmax: first maximum wins, which is the smaller column
        work = scores.copy()
        sel = np.empty((n, k), dtype=np.int64)
        rows = np.arange(n)
        for j in range(k):
            sel[:, j] = work.argmax(axis=1)
            work[rows, sel[:, j]] = -np.inf
        return sel
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _random_excluding(rng, n_rows: int, low: int, high: int, exclude: np.ndarray, k: int) -> np.ndarray:
    """Per row, ``k`` distinct integers in [low, high) other than ``exclude[row]``."""
    span = high - low - 1
    if span < k:
        raise PoolExhausted(f"cannot draw {k} distinct values from {span}")
    out = np.empty((n_rows, k), dtype=np.int64)
    for r in range(n_rows):
        draw = low + rng.choice(span, size=k, replace=False)
        out[r] = draw + (draw >= exclude[r])
    return out


def select_behavior_negs_batch(
    target_ids: np.ndarray,
    pool: BehaviorPool,
    id_embedding: np.ndarray,
    K: int,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised negative selection for many masked targets.

    Returns ``(neg_ids, scores)`` both (n, K), scores being the cosine between
    the target's and each negative's position-free embedding.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    tgt = id_embedding[target_ids]
    if pool.mode is SamplingMode.RANDOM:
        if rng is None:
            raise nk.ConfigError("random mode needs an rng")
        n_rows = id_embedding.shape[0]
        negs = _random_excluding(rng, len(target_ids), N_SPECIAL, n_rows, target_ids, K)
        return negs, nk.cosine(tgt[:, None, :], id_embedding[negs])
    cand = np.unique(pool.candidate_ids)
    sims = nk.cosine_matrix(tgt, id_embedding[cand])
    sims[cand[None, :] == target_ids[:, None]] = -np.inf
    sel = top_k(sims, K)
    return cand[sel], np.take_along_axis(sims, sel, axis=1)


def select_behavior_negs(
    target_id: int, pool: BehaviorPool, params: ModelParams, K: int, rng: np.random.Generator | None = None
) -> NegSet:
    ids, scores = select_behavior_negs_batch(np.array([target_id]), pool, params["id_embedding"], K, rng)
    return NegSet(ids[0], scores[0])


# ---------------------------------------------------------------------------
# Sequence pool
# ---------------------------------------------------------------------------


@dataclass
class SequencePool:
    """Cached other-user sequences, frozen between refreshes.

    ``keys`` are corpus user indices in ascending order, so ties in similarity
    resolve to the smaller user.
    """

    keys: np.ndarray
    user_ids: list[str]
    ids: np.ndarray
    valid_len: np.ndarray
    cached_embedding: np.ndarray
    snapshot: ModelParams
    snapshot_step: int
    interval: int
    mode: SamplingMode
    _target_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.keys)

    def due(self, step: int) -> bool:
        return step >= self.snapshot_step + self.interval

    def prime_targets(self, keys: np.ndarray, ids: np.ndarray, valid_len: np.ndarray) -> None:
        """Embed target sequences under the snapshot ahead of use (one batched pass)."""
        keys = np.asarray(keys)
        missing = [i for i, k in enumerate(keys.tolist()) if k not in self._target_cache]
        if missing:
            miss = np.asarray(missing)
            emb = encode_users(ids[miss], valid_len[miss], self.snapshot)
            for i, e in zip(missing, emb):
                self._target_cache[int(keys[i])] = e

    def embed_targets(self, keys: np.ndarray, ids: np.ndarray, valid_len: np.ndarray) -> np.ndarray:
        """Target embeddings under the pool's snapshot.

        A user's target sequence is fixed, and so is the snapshot until the
        next refresh, so results are memoised per user key.
        """
        self.prime_targets(keys, ids, valid_len)
        return np.stack([self._target_cache[k] for k in np.asarray(keys).tolist()])


def refresh_sequence_pool(
    step: int,
    candidate_keys: np.ndarray,
    candidate_user_ids: list[str],
    candidate_ids: np.ndarray,
    candidate_len: np.ndarray,
    params: ModelParams,
    u: int,
    rng: np.random.Generator,
    interval: int = 50,
    mode: SamplingMode | str = SamplingMode.MEDIUM_HARD,
) -> SequencePool:
    """Build a new pool from the eligible second-period sequences.

    ``candidate_*`` describe every user that can serve as a negative; the
    caller has already cropped their sequences to the negative time period.
    ``u`` users are drawn without replacement (all of them in
    ``global_hardest`` mode or when ``u`` covers everyone) and embedded with
    a deep copy of ``params``.
    """
    mode = SamplingMode(mode)
    if interval < 1:
        raise nk.ConfigError("sequence pool interval must be >= 1")
    n = len(candidate_keys)
    if mode is SamplingMode.GLOBAL_HARDEST or u >= n:
        if mode is not SamplingMode.GLOBAL_HARDEST and u > n:
            raise nk.ConfigError(f"sequence pool size u={u} exceeds the {n} eligible users")
        rows = np.arange(n)
    else:
        rows = np.sort(rng.choice(n, size=u, replace=False))
    snap = params.snapshot()
    keys = np.asarray(candidate_keys)[rows]
    order = np.argsort(keys, kind="stable")
    rows, keys = rows[order], keys[order]
    ids, lens = candidate_ids[rows], candidate_len[rows]
    emb = encode_users(ids, lens, snap)
    return SequencePool(
        keys, [candidate_user_ids[r] for r in rows], ids, lens, emb, snap, step, interval, mode
    )


def select_sequence_negs_batch(
    target_keys: np.ndarray,
    target_emb: np.ndarray,
    pool: SequencePool,
    P: int,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pool row indices (n, P) of the selected negatives and their cosines.

    ``target_emb`` must come from ``pool.embed_targets`` so both sides share
    the snapshot. Entries belonging to the target's own user are excluded.
    """
    sims = nk.cosine_matrix(target_emb, pool.cached_embedding)
    same = pool.keys[None, :] == np.asarray(target_keys)[:, None]
    if pool.mode is SamplingMode.RANDOM:
        if rng is None:
            raise nk.ConfigError("random mode needs an rng")
        eligible = (~same).sum(axis=1)
        if (eligible < P).any():
            raise PoolExhausted(f"fewer than P={P} entries from other users in the sequence pool")
        # random keys with same-user entries pushed to the end
        noise = rng.random(sims.shape)
        noise[same] = -np.inf
        sel = top_k(noise, P)
    else:
        sims[same] = -np.inf
        sel = top_k(sims, P)
    return sel, np.take_along_axis(sims, sel, axis=1)


def select_sequence_negs(
    target_key: int, target_seq, pool: SequencePool, P: int, rng: np.random.Generator | None = None
) -> NegSet:
    emb = pool.embed_targets(np.array([target_key]), target_seq.ids[None], np.array([target_seq.valid_len]))
    sel, scores = select_sequence_negs_batch(np.array([target_key]), emb, pool, P, rng)
    return NegSet(pool.keys[sel[0]], scores[0])

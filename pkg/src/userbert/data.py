"""Behavior logs: file IO, fixed-length windows, masking, time-disjoint splits,
a latent-topic synthetic generator and downstream click labels.

Behavior ids are vocabulary row indices: 0 is PAD, 1 is MASK, real behaviors
occupy ``[2, vocab_size + 2)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .model import MASK_ID, N_SPECIAL, PAD_ID
from .numkit import ConfigError, make_rng

log = logging.getLogger(__name__)

LOG_HEADER = "# userbert-log v1"
TRUTH_HEADER = "# userbert-truth v1"


class LogFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


class SplitInfeasible(ValueError):
    pass


@dataclass
class BehaviorLog:
    user_id: str
    behavior_ids: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.behavior_ids = np.asarray(self.behavior_ids, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.behavior_ids.shape != self.timestamps.shape:
            raise ValueError("behavior_ids and timestamps differ in length")

    def __len__(self):
        return len(self.behavior_ids)

    @property
    def events(self) -> list[tuple[int, int]]:
        return list(zip(self.behavior_ids.tolist(), self.timestamps.tolist()))

    def __eq__(self, other):
        return (
            isinstance(other, BehaviorLog)
            and self.user_id == other.user_id
            and np.array_equal(self.behavior_ids, other.behavior_ids)
            and np.array_equal(self.timestamps, other.timestamps)
        )


@dataclass
class BehaviorSequence:
    ids: np.ndarray
    timestamps: np.ndarray
    valid_len: int

    @classmethod
    def from_events(cls, behavior_ids, timestamps, max_len: int) -> "BehaviorSequence":
        """Window of the most recent ``max_len`` events, right-padded with PAD."""
        b = np.asarray(behavior_ids, dtype=np.int64)[-max_len:]
        t = np.asarray(timestamps, dtype=np.int64)[-max_len:]
        n = len(b)
        if n == 0:
            raise ValueError("cannot build a sequence from zero events")
        ids = np.full(max_len, PAD_ID, dtype=np.int64)
        ts = np.zeros(max_len, dtype=np.int64)
        ids[:n] = b
        ts[:n] = t
        return cls(ids, ts, n)

    @property
    def max_len(self) -> int:
        return len(self.ids)


@dataclass
class MaskedInstance:
    seq: BehaviorSequence
    masked_positions: np.ndarray
    masked_true_ids: np.ndarray


@dataclass
class SequencePair:
    seq_a: BehaviorSequence
    seq_b: BehaviorSequence
    same_user: bool = True


@dataclass
class SynthConfig:
    n_users: int = 2000
    vocab_size: int = 1000
    n_topics: int = 8
    interests_per_user: int = 2
    events_per_user: int = 60
    behavior_noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_users", "vocab_size", "n_topics", "interests_per_user", "events_per_user"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"SynthConfig.{name} must be positive (got {getattr(self, name)})")
        if self.interests_per_user > self.n_topics:
            raise ConfigError("SynthConfig.interests_per_user must be <= n_topics")
        if self.vocab_size % self.n_topics:
            raise ConfigError("SynthConfig.vocab_size must be divisible by n_topics")
        if not 0.0 <= self.behavior_noise <= 1.0:
            raise ConfigError("SynthConfig.behavior_noise must lie in [0, 1]")


@dataclass(frozen=True)
class TopicLayout:
    vocab_size: int
    n_topics: int

    @property
    def slice_size(self) -> int:
        return self.vocab_size // self.n_topics

    def topic_slice(self, topic: int) -> np.ndarray:
        s = self.slice_size
        return np.arange(N_SPECIAL + topic * s, N_SPECIAL + (topic + 1) * s)

    def topic_of(self, behavior_id):
        return (np.asarray(behavior_id) - N_SPECIAL) // self.slice_size


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


def load_logs(path, vocab_size: int | None = None, max_behaviors: int = 100) -> list[BehaviorLog]:
    """Parse a ``user<TAB>timestamp<TAB>behavior`` file into per-user logs.

    Users keep their first-appearance order; events are sorted by timestamp
    (stable, so same-time events keep file order) and only the most recent
    ``max_behaviors`` survive.
    """
    per_user: dict[str, list[tuple[int, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise LogFormatError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            user, ts_s, b_s = parts
            try:
                ts, b = int(ts_s), int(b_s)
            except ValueError:
                raise LogFormatError(path, lineno, "timestamp and behavior_id must be integers") from None
            if b < N_SPECIAL:
                raise LogFormatError(path, lineno, f"behavior id {b} is reserved (ids start at {N_SPECIAL})")
            if vocab_size is not None and b >= vocab_size + N_SPECIAL:
                raise LogFormatError(path, lineno, f"unknown behavior id {b} (vocab_size={vocab_size})")
            per_user.setdefault(user, []).append((ts, b))
    logs = []
    for user, ev in per_user.items():
        ev.sort(key=lambda e: e[0])
        ev = ev[-max_behaviors:]
        logs.append(BehaviorLog(user, [b for _, b in ev], [t for t, _ in ev]))
    return logs


def save_logs(logs: Iterable[BehaviorLog], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LOG_HEADER + "\n")
        for lg in logs:
            for b, t in zip(lg.behavior_ids.tolist(), lg.timestamps.tolist()):
                fh.write(f"{lg.user_id}\t{t}\t{b}\n")


def save_truth(truth: dict[str, list[int]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRUTH_HEADER + "\n")
        for user, topics in truth.items():
            fh.write(f"{user}\t{','.join(str(t) for t in topics)}\n")


def load_truth(path) -> dict[str, list[int]]:
    truth = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise LogFormatError(path, lineno, "expected user_id<TAB>topic,topic,...")
            try:
                truth[parts[0]] = [int(t) for t in parts[1].split(",") if t]
            except ValueError:
                raise LogFormatError(path, lineno, "topics must be integers") from None
    return truth


def infer_vocab_size(logs: Iterable[BehaviorLog]) -> int:
    return max(int(lg.behavior_ids.max()) for lg in logs if len(lg)) - N_SPECIAL + 1


# ---------------------------------------------------------------------------
# Masking and splitting
# ---------------------------------------------------------------------------


def mask_count(valid_len: int, mask_rate: float = 0.1) -> int:
    # tiny slack so e.g. 0.1 * 30 never floors to 2 through rounding
    return max(1, math.floor(mask_rate * valid_len + 1e-9))


def mask_sequence(seq: BehaviorSequence, rng: np.random.Generator, mask_rate: float = 0.1) -> MaskedInstance:
    if seq.valid_len < 1:
        raise ValueError("mask_sequence needs valid_len >= 1")
    n = mask_count(seq.valid_len, mask_rate)
    pos = np.sort(rng.choice(seq.valid_len, size=n, replace=False))
    ids = seq.ids.copy()
    true_ids = ids[pos].copy()
    ids[pos] = MASK_ID
    return MaskedInstance(BehaviorSequence(ids, seq.timestamps.copy(), seq.valid_len), pos, true_ids)


def mask_batch(ids: np.ndarray, valid_len: np.ndarray, rng: np.random.Generator,
               mask_rate: float = 0.1) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Mask a (B, L) batch at once.

    Each row gets ``mask_count(valid_len)`` distinct positions drawn uniformly
    from its valid prefix. Returns ``(masked_ids, slot_row, slot_pos,
    true_ids)`` with slots ordered by row then position.
    """
    ids = np.asarray(ids)
    valid_len = np.asarray(valid_len)
    if (valid_len < 1).any():
        raise ValueError("mask_batch needs valid_len >= 1 on every row")
    b, width = ids.shape
    counts = np.maximum(1, np.floor(mask_rate * valid_len + 1e-9).astype(np.int64))
    keys = rng.random((b, width))
    keys[np.arange(width)[None, :] >= valid_len[:, None]] = np.inf
    rank = np.empty_like(keys, dtype=np.int64)
    np.put_along_axis(rank, np.argsort(keys, axis=1), np.arange(width)[None, :], axis=1)
    chosen = rank < counts[:, None]
    slot_row, slot_pos = np.nonzero(chosen)
    true_ids = ids[slot_row, slot_pos]
    masked = ids.copy()
    masked[slot_row, slot_pos] = MASK_ID
    return masked, slot_row, slot_pos, true_ids


def timestamp_boundary(timestamps: np.ndarray, fraction: float) -> int:
    """Timestamp at the ``fraction`` quantile (lower order statistic)."""
    ts = np.sort(np.asarray(timestamps))
    idx = min(max(math.ceil(fraction * len(ts)) - 1, 0), len(ts) - 1)
    return int(ts[idx])


def split_at(log: BehaviorLog, boundary: int, max_len: int) -> SequencePair:
    """Events with timestamp <= boundary form A, the rest B."""
    a = log.timestamps <= boundary
    if a.all() or not a.any():
        raise SplitInfeasible(f"user {log.user_id}: boundary {boundary} leaves one side empty")
    return SequencePair(
        BehaviorSequence.from_events(log.behavior_ids[a], log.timestamps[a], max_len),
        BehaviorSequence.from_events(log.behavior_ids[~a], log.timestamps[~a], max_len),
        True,
    )


def split_time_disjoint(log: BehaviorLog, boundary_fraction: float = 0.5, max_len: int = 100) -> SequencePair:
    """Split one user's log into two periods with max(t_A) < min(t_B).

    The boundary is the timestamp quantile at ``boundary_fraction``; events
    tied with it go to A. If that would leave B empty the boundary drops to
    the largest earlier timestamp.
    """
    ts = log.timestamps
    if len(ts) < 2 or ts.min() == ts.max():
        raise SplitInfeasible(f"user {log.user_id}: needs at least two distinct timestamps")
    t_star = timestamp_boundary(ts, boundary_fraction)
    if t_star >= ts.max():
        t_star = int(ts[ts < ts.max()].max())
    return split_at(log, t_star, max_len)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def generate_synthetic(cfg: SynthConfig) -> tuple[list[BehaviorLog], dict[str, list[int]]]:
    """Latent-interest logs: each user holds a fixed topic set for all time.

    Each event picks one of the user's topics uniformly and a behavior
    uniformly from that topic's slice, or with probability ``behavior_noise``
    a behavior uniform over the whole vocabulary. Timestamps run 1..events.
    """
    cfg.validate()
    layout = TopicLayout(cfg.vocab_size, cfg.n_topics)
    s = layout.slice_size
    width = len(str(cfg.n_users - 1))
    logs, truth = [], {}
    for i in range(cfg.n_users):
        uid = f"u{i:0{width}d}"
        rng = make_rng(cfg.seed, "synth", i)
        topics = np.sort(rng.choice(cfg.n_topics, size=cfg.interests_per_user, replace=False))
        n = cfg.events_per_user
        ev_topics = topics[rng.integers(0, len(topics), size=n)]
        in_topic = N_SPECIAL + ev_topics * s + rng.integers(0, s, size=n)
        noise = rng.random(n) < cfg.behavior_noise
        uniform = N_SPECIAL + rng.integers(0, cfg.vocab_size, size=n)
        ids = np.where(noise, uniform, in_topic)
        logs.append(BehaviorLog(uid, ids, np.arange(1, n + 1)))
        truth[uid] = topics.tolist()
    return logs, truth


# ---------------------------------------------------------------------------
# Downstream labels
# ---------------------------------------------------------------------------


@dataclass
class LabeledSet:
    """Per-user candidate lists with click labels (balanced positives/negatives).

    ``candidates`` and ``labels`` are (n_users, n_candidates); the window for
    user ``i`` is ``ids[i, :valid_len[i]]``.
    """

    user_ids: list[str]
    ids: np.ndarray
    valid_len: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray
    _windows: list[BehaviorSequence] = field(default=None, repr=False)  # type: ignore[assignment]

    def __len__(self):
        return int(self.labels.size)

    def __iter__(self) -> Iterator[tuple[BehaviorSequence, int, int]]:
        for i in range(len(self.user_ids)):
            seq = BehaviorSequence(self.ids[i], np.zeros_like(self.ids[i]), int(self.valid_len[i]))
            for c, y in zip(self.candidates[i].tolist(), self.labels[i].tolist()):
                yield seq, c, y

    def subset(self, rows) -> "LabeledSet":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledSet(
            [self.user_ids[r] for r in rows],
            self.ids[rows],
            self.valid_len[rows],
            self.candidates[rows],
            self.labels[rows],
        )


def make_downstream_labels(
    logs: list[BehaviorLog],
    truth: dict[str, list[int]],
    rng: np.random.Generator,
    *,
    vocab_size: int,
    n_topics: int,
    per_side: int = 5,
    max_len: int = 64,
) -> LabeledSet:
    """Click labels for every user in ``logs``.

    Positives: behaviors from the user's own topics that are absent from the
    observed window. Negatives: behaviors from topics the user does not hold.
    Exactly ``per_side`` of each per user, in shuffled order.
    """
    layout = TopicLayout(vocab_size, n_topics)
    n_users = len(logs)
    ids = np.zeros((n_users, max_len), dtype=np.int64)
    lens = np.zeros(n_users, dtype=np.int64)
    cands = np.zeros((n_users, 2 * per_side), dtype=np.int64)
    labels = np.zeros((n_users, 2 * per_side), dtype=np.float64)
    all_topics = np.arange(n_topics)
    for i, lg in enumerate(logs):
        seq = BehaviorSequence.from_events(lg.behavior_ids, lg.timestamps, max_len)
        ids[i], lens[i] = seq.ids, seq.valid_len
        topics = truth[lg.user_id]
        own = np.concatenate([layout.topic_slice(t) for t in topics])
        own = np.setdiff1d(own, seq.ids[: seq.valid_len])
        other = np.concatenate([layout.topic_slice(t) for t in np.setdiff1d(all_topics, topics)])
        if len(own) < per_side or len(other) < per_side:
            raise ConfigError(f"user {lg.user_id}: not enough unseen candidates for {per_side} per side")
        pos = rng.choice(own, size=per_side, replace=False)
        neg = rng.choice(other, size=per_side, replace=False)
        order = rng.permutation(2 * per_side)
        cands[i] = np.concatenate([pos, neg])[order]
        labels[i] = np.concatenate([np.ones(per_side), np.zeros(per_side)])[order]
    return LabeledSet([lg.user_id for lg in logs], ids, lens, cands, labels)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from userbert import numkit as nk
from userbert.data import (
    BehaviorLog,
    BehaviorSequence,
    LogFormatError,
    SplitInfeasible,
    SynthConfig,
    TopicLayout,
    generate_synthetic,
    load_logs,
    load_truth,
    make_downstream_labels,
    mask_batch,
    mask_count,
    mask_sequence,
    save_logs,
    save_truth,
    split_time_disjoint,
)
from userbert.model import MASK_ID, PAD_ID


def seq_of(n, max_len=40):
    return BehaviorSequence.from_events(np.arange(2, n + 2), np.arange(n), max_len)


# ---- file IO ---------------------------------------------------------------


def test_empty_file_gives_no_logs(tmp_path):
    p = tmp_path / "empty.tsv"
    p.write_text("")
    assert load_logs(p) == []


def test_truncation_keeps_most_recent(tmp_path):
    p = tmp_path / "long.tsv"
    p.write_text("".join(f"u\t{t}\t{t + 2}\n" for t in range(150)))
    (lg,) = load_logs(p, max_behaviors=100)
    assert len(lg) == 100
    np.testing.assert_array_equal(lg.timestamps, np.arange(50, 150))


def test_interleaved_users_sorted_independently(tmp_path):
    p = tmp_path / "two.tsv"
    p.write_text("a\t5\t10\nb\t3\t20\na\t1\t11\nb\t9\t21\na\t3\t12\nb\t1\t22\n")
    a, b = load_logs(p)
    assert (a.user_id, b.user_id) == ("a", "b")
    assert a.events == [(11, 1), (12, 3), (10, 5)]
    assert b.events == [(22, 1), (20, 3), (21, 9)]


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("# comment\na\t1\t5\na\tx\t5\n")
    with pytest.raises(LogFormatError) as err:
        load_logs(p)
    assert err.value.lineno == 3


def test_unknown_behavior_rejected(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("a\t1\t5\na\t2\t60\n")
    with pytest.raises(LogFormatError, match="unknown behavior"):
        load_logs(p, vocab_size=50)


def test_reserved_behavior_rejected(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("a\t1\t1\n")
    with pytest.raises(LogFormatError, match="reserved"):
        load_logs(p)


def test_save_load_round_trip(tmp_path):
    logs, truth = generate_synthetic(SynthConfig(n_users=30, vocab_size=80, n_topics=4, events_per_user=12))
    save_logs(logs, tmp_path / "l.tsv")
    save_truth(truth, tmp_path / "t.tsv")
    assert load_logs(tmp_path / "l.tsv", vocab_size=80) == logs
    assert load_truth(tmp_path / "t.tsv") == truth


# ---- masking ---------------------------------------------------------------


@pytest.mark.parametrize("n,expected", [(1, 1), (5, 1), (9, 1), (10, 1), (19, 1), (20, 2), (30, 3), (100, 10)])
def test_mask_count(n, expected):
    assert mask_count(n) == expected
    inst = mask_sequence(seq_of(n, 100), np.random.default_rng(n))
    assert len(inst.masked_positions) == expected


def test_mask_frequency_per_position():
    rng = np.random.default_rng(0)
    s = seq_of(20)
    hits = np.zeros(20)
    for _ in range(10_000):
        hits[mask_sequence(s, rng).masked_positions] += 1
    freq = hits / 10_000
    assert np.all(np.abs(freq - 0.10) <= 0.01)


def test_mask_batch_frequency_per_position():
    rng = np.random.default_rng(1)
    ids = np.tile(seq_of(20).ids, (10_000, 1))
    _, row, pos, _ = mask_batch(ids, np.full(10_000, 20), rng)
    freq = np.bincount(pos, minlength=20) / 10_000
    assert np.all(np.abs(freq - 0.10) <= 0.01)
    assert np.all(np.bincount(row) == 2)


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_mask_sequence_positions_valid(n, seed):
    s = seq_of(n)
    inst = mask_sequence(s, np.random.default_rng(seed))
    pos = inst.masked_positions
    assert len(set(pos.tolist())) == len(pos) == mask_count(n)
    assert (pos < n).all()
    assert (inst.seq.ids[pos] == MASK_ID).all()
    np.testing.assert_array_equal(inst.masked_true_ids, s.ids[pos])
    assert (inst.seq.ids[n:] == PAD_ID).all()
    untouched = np.setdiff1d(np.arange(40), pos)
    np.testing.assert_array_equal(inst.seq.ids[untouched], s.ids[untouched])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=8), st.integers(0, 2**32 - 1))
def test_mask_batch_positions_valid(lens, seed):
    lens = np.array(lens)
    ids = np.stack([seq_of(n, 30).ids for n in lens])
    masked, row, pos, true_ids = mask_batch(ids, lens, np.random.default_rng(seed))
    for r, n in enumerate(lens):
        p = pos[row == r]
        assert len(p) == mask_count(n) == len(set(p.tolist()))
        assert (p < n).all()
    np.testing.assert_array_equal(true_ids, ids[row, pos])
    assert (masked[row, pos] == MASK_ID).all()
    assert (masked == MASK_ID).sum() == len(pos)


# ---- time-disjoint split ---------------------------------------------------


def _log(ts):
    return BehaviorLog("x", np.arange(2, len(ts) + 2), ts)


def test_split_even():
    p = split_time_disjoint(_log([1, 2, 3, 4]), 0.5)
    assert p.seq_a.timestamps[: p.seq_a.valid_len].tolist() == [1, 2]
    assert p.seq_b.timestamps[: p.seq_b.valid_len].tolist() == [3, 4]
    assert p.same_user


def test_split_ties_go_to_a():
    p = split_time_disjoint(_log([1, 1, 1, 9]), 0.5)
    assert p.seq_a.timestamps[: p.seq_a.valid_len].tolist() == [1, 1, 1]
    assert p.seq_b.timestamps[: p.seq_b.valid_len].tolist() == [9]


def test_split_degenerate():
    with pytest.raises(SplitInfeasible):
        split_time_disjoint(_log([7, 7, 7]))


@settings(max_examples=500, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=2, max_size=30), st.floats(0.05, 0.95))
def test_split_disjoint_property(ts, frac):
    ts = sorted(ts)
    if ts[0] == ts[-1]:
        with pytest.raises(SplitInfeasible):
            split_time_disjoint(_log(ts), frac)
        return
    p = split_time_disjoint(_log(ts), frac, max_len=40)
    a = p.seq_a.timestamps[: p.seq_a.valid_len]
    b = p.seq_b.timestamps[: p.seq_b.valid_len]
    assert len(a) and len(b)
    assert a.max() < b.min()
    assert len(a) + len(b) == len(ts)


# ---- synthetic generator ---------------------------------------------------


def test_generator_reproducible():
    cfg = SynthConfig(n_users=50, seed=3)
    a, ta = generate_synthetic(cfg)
    b, tb = generate_synthetic(cfg)
    assert a == b and ta == tb


def test_generator_validates():
    with pytest.raises(nk.ConfigError, match="n_users"):
        generate_synthetic(SynthConfig(n_users=0))
    with pytest.raises(nk.ConfigError, match="interests_per_user"):
        generate_synthetic(SynthConfig(n_topics=2, interests_per_user=3))


def test_full_noise_is_uniform():
    cfg = SynthConfig(n_users=2000, vocab_size=200, n_topics=4, events_per_user=50, behavior_noise=1.0)
    logs, _ = generate_synthetic(cfg)
    ids = np.concatenate([lg.behavior_ids for lg in logs]) - 2
    assert len(ids) == 100_000
    counts = np.bincount(ids, minlength=200)
    assert stats.chisquare(counts).pvalue > 0.01


def test_no_noise_single_topic():
    cfg = SynthConfig(n_users=40, vocab_size=100, n_topics=5, interests_per_user=1, behavior_noise=0.0)
    logs, truth = generate_synthetic(cfg)
    layout = TopicLayout(100, 5)
    for lg in logs:
        assert set(layout.topic_of(lg.behavior_ids).tolist()) == set(truth[lg.user_id])


def test_default_in_topic_fraction():
    logs, truth = generate_synthetic(SynthConfig())
    layout = TopicLayout(1000, 8)
    inside = total = 0
    for lg in logs:
        inside += np.isin(layout.topic_of(lg.behavior_ids), truth[lg.user_id]).sum()
        total += len(lg)
    assert abs(inside / total - (0.9 + 0.1 * 2 / 8)) <= 0.01


def test_timestamps_strictly_increasing():
    logs, _ = generate_synthetic(SynthConfig(n_users=20, events_per_user=15))
    for lg in logs:
        np.testing.assert_array_equal(lg.timestamps, np.arange(1, 16))


# ---- downstream labels -----------------------------------------------------


def test_labels_follow_topics():
    cfg = SynthConfig(n_users=300, vocab_size=120, n_topics=6, events_per_user=20)
    logs, truth = generate_synthetic(cfg)
    lab = make_downstream_labels(logs, truth, np.random.default_rng(0), vocab_size=120, n_topics=6, max_len=32)
    layout = TopicLayout(120, 6)
    n = 0
    for i, uid in enumerate(lab.user_ids):
        own = np.isin(layout.topic_of(lab.candidates[i]), truth[uid])
        np.testing.assert_array_equal(own, lab.labels[i] == 1)
        window = lab.ids[i, : lab.valid_len[i]]
        assert not np.isin(lab.candidates[i][own], window).any()
        n += lab.labels[i].size
    assert n == 3000
    assert lab.labels.mean() == 0.5


def test_labeled_set_iteration_and_subset():
    logs, truth = generate_synthetic(SynthConfig(n_users=10, vocab_size=80, n_topics=4, events_per_user=10))
    lab = make_downstream_labels(logs, truth, np.random.default_rng(0), vocab_size=80, n_topics=4, max_len=16)
    rows = list(lab)
    assert len(rows) == len(lab) == 100
    sub = lab.subset([3, 1])
    assert sub.user_ids == [lab.user_ids[3], lab.user_ids[1]]

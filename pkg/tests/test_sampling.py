import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_top_k, random_embedding
from userbert import numkit as nk
from userbert.data import generate_synthetic, SynthConfig
from userbert.model import N_SPECIAL, init_params
from userbert.pretrain import PretrainCorpus, TrainConfig
from userbert.sampling import (
    BehaviorPool,
    PoolExhausted,
    SamplingMode,
    SequencePool,
    refresh_behavior_pool,
    refresh_sequence_pool,
    select_behavior_negs_batch,
    select_sequence_negs_batch,
    top_k,
)

MH = SamplingMode.MEDIUM_HARD


# ---- behavior pool -----------------------------------------------------------


def test_global_pool_is_full_vocabulary():
    pool = refresh_behavior_pool(nk.make_rng(0, "x"), 50, 50, SamplingMode.GLOBAL_HARDEST)
    np.testing.assert_array_equal(pool.candidate_ids, np.arange(2, 52))


def test_pool_draws_in_range_and_reproducible():
    a = refresh_behavior_pool(nk.make_rng(3, "train"), 100, 40)
    b = refresh_behavior_pool(nk.make_rng(3, "train"), 100, 40)
    np.testing.assert_array_equal(a.candidate_ids, b.candidate_ids)
    assert a.candidate_ids.min() >= N_SPECIAL and a.candidate_ids.max() < 100 + N_SPECIAL
    rng = nk.make_rng(4, "train")
    assert not np.array_equal(refresh_behavior_pool(rng, 100, 40).candidate_ids,
                              refresh_behavior_pool(rng, 100, 40).candidate_ids)


def test_pool_size_errors():
    with pytest.raises(nk.ConfigError):
        refresh_behavior_pool(nk.make_rng(0), 10, 11)
    with pytest.raises(nk.ConfigError):
        refresh_behavior_pool(nk.make_rng(0), 10, 1)


# ---- behavior negatives --------------------------------------------------------


def test_hand_built_cosines():
    emb = np.zeros((6, 2))
    emb[2] = [1, 0]      # target
    emb[3] = [0.9, 0.1]  # a
    emb[4] = [0, 1]      # b
    emb[5] = [-1, 0]     # c
    pool = BehaviorPool(np.array([5, 4, 3]), MH)
    negs, scores = select_behavior_negs_batch(np.array([2]), pool, emb, 2)
    assert negs[0].tolist() == [3, 4]
    np.testing.assert_allclose(scores[0], [0.9 / np.hypot(0.9, 0.1), 0.0], atol=1e-12)
    assert scores[0, 0] == pytest.approx(0.9939, abs=1e-4)


def test_ties_break_to_smaller_id():
    emb = np.zeros((8, 2))
    emb[2] = [1, 0]
    emb[3:8] = [0.5, 0.5]
    pool = BehaviorPool(np.array([7, 5, 3, 6, 4]), MH)
    negs, _ = select_behavior_negs_batch(np.array([2]), pool, emb, 3)
    assert negs[0].tolist() == [3, 4, 5]


def test_pool_of_only_target_is_exhausted():
    emb = random_embedding(np.random.default_rng(0), 10, 3)
    with pytest.raises(PoolExhausted):
        select_behavior_negs_batch(np.array([4]), BehaviorPool(np.array([4, 4, 4]), MH), emb, 1)
    with pytest.raises(PoolExhausted):
        select_behavior_negs_batch(np.array([4]), BehaviorPool(np.array([4, 5, 5]), MH), emb, 2)


def test_full_vocab_pool_matches_brute_force():
    rng = np.random.default_rng(11)
    for trial in range(25):
        vocab = int(rng.integers(5, 40))
        emb = random_embedding(rng, vocab + N_SPECIAL, 4)
        targets = rng.integers(N_SPECIAL, vocab + N_SPECIAL, size=5)
        K = int(rng.integers(1, vocab))
        pool = BehaviorPool(rng.permutation(np.arange(N_SPECIAL, vocab + N_SPECIAL)), MH)
        negs, scores = select_behavior_negs_batch(targets, pool, emb, K)
        for r, t in enumerate(targets):
            ids, sc = brute_force_top_k(int(t), emb, N_SPECIAL, K)
            assert negs[r].tolist() == ids
            np.testing.assert_allclose(scores[r], sc, atol=1e-12)


def test_nested_pools_dominate():
    rng = np.random.default_rng(5)
    emb = random_embedding(rng, 202, 6)
    for _ in range(50):
        big = rng.choice(np.arange(2, 202), size=80, replace=False)
        small = big[:20]
        t = np.array([int(rng.integers(2, 202))])
        _, s_small = select_behavior_negs_batch(t, BehaviorPool(small, MH), emb, 4)
        _, s_big = select_behavior_negs_batch(t, BehaviorPool(big, MH), emb, 4)
        assert (s_big[0] >= s_small[0]).all()


def test_random_mode_excludes_target():
    emb = random_embedding(np.random.default_rng(0), 12, 3)
    rng = np.random.default_rng(1)
    targets = np.repeat(np.arange(2, 12), 50)
    negs, _ = select_behavior_negs_batch(targets, BehaviorPool(np.array([2, 3]), SamplingMode.RANDOM), emb, 4, rng)
    assert not (negs == targets[:, None]).any()
    assert all(len(set(row)) == 4 for row in negs.tolist())
    assert negs.min() >= 2 and negs.max() < 12


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_behavior_filter_soundness(seed, K):
    rng = np.random.default_rng(seed)
    emb = random_embedding(rng, 22, 3)
    targets = rng.integers(2, 22, size=6)
    pool_ids = np.concatenate([targets, rng.integers(2, 22, size=30)])
    try:
        negs, _ = select_behavior_negs_batch(targets, BehaviorPool(pool_ids, MH), emb, K)
    except PoolExhausted:
        return
    assert not (negs == targets[:, None]).any()
    assert negs.shape == (6, K)
    assert all(len(set(r)) == K for r in negs.tolist())


def test_top_k_large_k_path_agrees():
    scores = np.random.default_rng(2).normal(size=(4, 40))
    scores[:, ::3] = scores[:, 1:2]  # many ties
    fast = top_k(scores, 16)
    slow = np.argsort(-scores, axis=1, kind="stable")[:, :16]
    np.testing.assert_array_equal(fast, slow)
    assert top_k(scores, 17).shape == (4, 17)


# ---- sequence pool -------------------------------------------------------------


def _hand_pool(emb, keys):
    n = len(keys)
    return SequencePool(np.asarray(keys), [f"u{k}" for k in keys], np.zeros((n, 4), int), np.ones(n, int),
                        np.asarray(emb, float), None, 1, 50, MH)


def test_four_hand_embedded_sequences():
    pool = _hand_pool([[1, 0], [0.6, 0.8], [-1, 0.1], [0.8, -0.6]], [1, 2, 3, 4])
    sel, scores = select_sequence_negs_batch(np.array([0]), np.array([[1.0, 1.0]]), pool, 2)
    # cosines with [1,1]/sqrt2: 0.7071, 0.9899, -0.6364, 0.1414
    assert pool.keys[sel[0]].tolist() == [2, 1]
    np.testing.assert_allclose(scores[0], [1.4 / np.sqrt(2), 1 / np.sqrt(2)], atol=1e-12)


def test_same_user_never_selected_and_full_pool_in_order():
    pool = _hand_pool([[1, 0], [0.6, 0.8], [-1, 0.1], [0.8, -0.6]], [1, 2, 3, 4])
    sel, scores = select_sequence_negs_batch(np.array([2]), np.array([[1.0, 1.0]]), pool, 3)
    assert pool.keys[sel[0]].tolist() == [1, 4, 3]
    assert (np.diff(scores[0]) <= 0).all()
    with pytest.raises(PoolExhausted):
        select_sequence_negs_batch(np.array([2]), np.array([[1.0, 1.0]]), pool, 4)


def test_random_sequence_mode_excludes_same_user():
    pool = _hand_pool(np.random.default_rng(0).normal(size=(6, 2)), [1, 2, 3, 4, 5, 6])
    pool.mode = SamplingMode.RANDOM
    rng = np.random.default_rng(0)
    keys = np.repeat(np.arange(1, 7), 30)
    sel, _ = select_sequence_negs_batch(keys, np.ones((len(keys), 2)), pool, 5, rng)
    assert not (pool.keys[sel] == keys[:, None]).any()


@pytest.fixture(scope="module")
def corpus():
    logs, _ = generate_synthetic(SynthConfig(n_users=80, vocab_size=60, n_topics=4, events_per_user=20))
    return PretrainCorpus.build(logs, 16)


def _refresh(corpus, params, seed=0, u=20, step=1):
    return refresh_sequence_pool(step, corpus.bsm_keys, [corpus.user_ids[k] for k in corpus.bsm_keys],
                                 corpus.b_ids, corpus.b_len, params, u, nk.make_rng(seed, "pool"), 10, MH)


def test_pool_entries_come_from_second_period(corpus):
    assert (corpus.b_len > 0).all() and (corpus.a_len > 0).all()
    pool = _refresh(corpus, init_params(TrainConfig(vocab_size=60, max_len=16).dims(), nk.make_rng(0)))
    assert len(pool) == 20
    assert (np.diff(pool.keys) > 0).all()
    rows = np.searchsorted(corpus.bsm_keys, pool.keys)
    np.testing.assert_array_equal(pool.ids, corpus.b_ids[rows])


def test_caches_frozen_while_params_train(corpus):
    params = init_params(TrainConfig(vocab_size=60, max_len=16).dims(), nk.make_rng(0))
    pool = _refresh(corpus, params)
    cache = pool.cached_embedding.copy()
    target = pool.embed_targets(corpus.bsm_keys[:3], corpus.a_ids[:3], corpus.a_len[:3]).copy()
    for g in params.groups.values():
        g.grad[...] = 1.0
    nk.adam_step(params.groups, lr=0.05)
    np.testing.assert_array_equal(pool.cached_embedding, cache)
    np.testing.assert_array_equal(pool.embed_targets(corpus.bsm_keys[:3], corpus.a_ids[:3], corpus.a_len[:3]), target)
    assert not pool.due(10) and pool.due(11)
    fresh = _refresh(corpus, params)
    np.testing.assert_array_equal(fresh.keys, pool.keys)
    assert not np.allclose(fresh.cached_embedding, cache)


def test_selection_ignores_current_params(corpus):
    params = init_params(TrainConfig(vocab_size=60, max_len=16).dims(), nk.make_rng(0))
    pool = _refresh(corpus, params)
    keys = corpus.bsm_keys[:8]
    emb = pool.embed_targets(keys, corpus.a_ids[:8], corpus.a_len[:8])
    before = select_sequence_negs_batch(keys, emb, pool, 4)
    for g in params.groups.values():
        g.value[...] = 0.0
    after = select_sequence_negs_batch(keys, pool.embed_targets(keys, corpus.a_ids[:8], corpus.a_len[:8]), pool, 4)
    np.testing.assert_array_equal(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])


def test_pool_too_large_is_config_error(corpus):
    params = init_params(TrainConfig(vocab_size=60, max_len=16).dims(), nk.make_rng(0))
    with pytest.raises(nk.ConfigError):
        _refresh(corpus, params, u=len(corpus.bsm_keys) + 1)

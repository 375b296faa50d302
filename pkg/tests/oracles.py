"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def cosine_py(x, y):
    nx = math.sqrt(sum(float(a) * float(a) for a in x)) + 1e-12
    ny = math.sqrt(sum(float(b) * float(b) for b in y)) + 1e-12
    return sum(float(a) * float(b) for a, b in zip(x, y)) / (nx * ny)


def brute_force_top_k(target_id, id_embedding, first_id, K):
    """Scan every real id, drop the target, sort by (-cosine, id)."""
    scored = []
    for c in range(first_id, id_embedding.shape[0]):
        if c == target_id:
            continue
        scored.append((-cosine_py(id_embedding[target_id], id_embedding[c]), c))
    scored.sort()
    return [c for _, c in scored[:K]], [-s for s, _ in scored[:K]]


def auc_pairs(scores, labels):
    """O(n^2) pair counting with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def ndcg_direct(labels, k=10):
    dcg = sum(labels[i] / math.log2(i + 2) for i in range(min(k, len(labels))))
    ideal = sorted(labels, reverse=True)
    idcg = sum(ideal[i] / math.log2(i + 2) for i in range(min(k, len(ideal))))
    return dcg / idcg


def ap_direct(labels):
    hits, total = 0, 0.0
    for i, y in enumerate(labels):
        if y:
            hits += 1
            total += hits / (i + 1)
    return total / hits


def random_embedding(rng, n_rows, d):
    e = rng.normal(size=(n_rows, d))
    e[0] = 0.0
    return e

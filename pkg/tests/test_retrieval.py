"""Retrieval: exact search against brute force, merge semantics, sampling."""

import itertools

import numpy as np
import pytest

from ramm.errors import ContractViolation
from ramm.retrieval import (
    Mode, RetrievalCandidate, complete_scores, merge_candidates,
    retrieve_by_vector, search_topr, select_inference, select_training,
)
from ramm.store import EmbeddingIndex


def _unit_rows(rng, n, d):
    mat = rng.normal(size=(n, d))
    return (mat / np.linalg.norm(mat, axis=1, keepdims=True)).astype(np.float32)


def _index(rng, n, d=8, pair_ids=None):
    if pair_ids is None:
        pair_ids = np.arange(1, n + 1, dtype=np.uint64)
    return EmbeddingIndex(
        d_proj=d,
        fingerprint=1,
        pair_ids=np.asarray(pair_ids, dtype=np.uint64),
        source_tags=np.zeros(n, dtype=np.uint8),
        text_vecs=_unit_rows(rng, n, d),
        image_vecs=_unit_rows(rng, n, d),
        captions=[f"cap {i}" for i in range(n)],
    )


def brute_force_topr(query, family, pair_ids, r):
    """Full-scan oracle: rank every row by dot product, pair_id tiebreak."""
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scores = family.astype(np.float64) @ q
    ranked = sorted(range(len(pair_ids)), key=lambda i: (-scores[i], pair_ids[i]))
    return [(int(pair_ids[i]), scores[i]) for i in ranked[:r]]


# -- exact search ---------------------------------------------------------------

def test_search_matches_brute_force(rng):
    for n in (1, 5, 50, 500):
        index = _index(rng, n)
        for r in (1, 2, 4, 8):
            q = rng.normal(size=8)
            q /= np.linalg.norm(q)
            got = search_topr(q, index, "text", r)
            want = brute_force_topr(q, index.text_vecs, index.pair_ids, r)
            assert [(c.pair_id, c.s_w) for c in got] == [
                (pid, pytest.approx(s)) for pid, s in want]


def test_search_self_match(rng):
    """Querying with a stored image vector returns that pair first."""
    index = _index(rng, 40)
    for row in (0, 7, 39):
        got = search_topr(index.image_vecs[row].astype(np.float64),
                          index, "image", 1)
        assert got[0].pair_id == int(index.pair_ids[row])
        assert got[0].s_v == pytest.approx(1.0, abs=1e-5)


def test_search_tiebreak_by_pair_id(rng):
    """Duplicate rows score identically; lower pair_id must win."""
    index = _index(rng, 6, pair_ids=[9, 2, 5, 11, 3, 7])
    index.text_vecs[1] = index.text_vecs[3]
    index.text_vecs[4] = index.text_vecs[3]
    q = index.text_vecs[3].astype(np.float64)
    got = search_topr(q, index, "text", 2)
    assert [c.pair_id for c in got] == [2, 3]


def test_search_r_exceeds_index(rng):
    index = _index(rng, 3)
    got = search_topr(rng.normal(size=8), index, "text", 10)
    assert len(got) == 3


def test_search_rejects_bad_args(rng):
    index = _index(rng, 3)
    with pytest.raises(ContractViolation):
        search_topr(rng.normal(size=8), index, "text", 0)
    with pytest.raises(ContractViolation):
        search_topr(rng.normal(size=8), index, "audio", 1)


# -- merge and completion --------------------------------------------------------

def test_merge_disjoint():
    w = [RetrievalCandidate(1, s_w=0.9), RetrievalCandidate(2, s_w=0.8)]
    v = [RetrievalCandidate(3, s_v=0.7), RetrievalCandidate(4, s_v=0.6)]
    pool = merge_candidates(w, v)
    assert sorted(c.pair_id for c in pool) == [1, 2, 3, 4]


def test_merge_overlap_keeps_both_components():
    """2r-1 distinct ids from two lists of r with one shared member."""
    w = [RetrievalCandidate(1, s_w=0.9), RetrievalCandidate(2, s_w=0.5)]
    v = [RetrievalCandidate(2, s_v=0.8), RetrievalCandidate(3, s_v=0.4)]
    pool = {c.pair_id: c for c in merge_candidates(w, v)}
    assert len(pool) == 3
    assert pool[2].s_w == 0.5 and pool[2].s_v == 0.8
    assert pool[2].s == 0.8  # max of the two components


def test_merge_full_overlap():
    w = [RetrievalCandidate(i, s_w=0.1 * i) for i in (1, 2)]
    v = [RetrievalCandidate(i, s_v=0.2 * i) for i in (1, 2)]
    pool = merge_candidates(w, v)
    assert len(pool) == 2
    assert all(c.s_w is not None and c.s_v is not None for c in pool)


def test_complete_scores_exact(rng):
    index = _index(rng, 10)
    q = rng.normal(size=8)
    q /= np.linalg.norm(q)
    pool = [RetrievalCandidate(4, s_w=0.3), RetrievalCandidate(7, s_v=0.1)]
    complete_scores(pool, q, index)
    assert pool[0].s_v == pytest.approx(
        float(index.image_vecs[3].astype(np.float64) @ q))
    assert pool[1].s_w == pytest.approx(
        float(index.text_vecs[6].astype(np.float64) @ q))


def test_pool_size_bounds(rng):
    """The merged pool always holds between r and 2r candidates when the
    index is large enough."""
    for trial in range(200):
        q = rng.normal(size=8)
        index = _index(rng, 64)
        for r in (1, 2, 4, 8):
            w = search_topr(q, index, "text", r)
            v = search_topr(q, index, "image", r)
            pool = merge_candidates(w, v)
            assert r <= len(pool) <= 2 * r


# -- selection --------------------------------------------------------------------

def inclusion_probs(weights, r):
    """Exact inclusion probability of each item under sequential
    weight-proportional sampling without replacement, by enumerating every
    ordered draw sequence."""
    n = len(weights)
    probs = np.zeros(n)
    for seq in itertools.permutations(range(n), r):
        p = 1.0
        remaining = list(range(n))
        for pick in seq:
            w = np.array([weights[i] for i in remaining])
            p *= weights[pick] / w.sum()
            remaining.remove(pick)
        for pick in seq:
            probs[pick] += p
    return probs


def test_training_selection_frequencies(rng):
    """Monte-Carlo inclusion frequencies match the exact enumeration oracle
    to within 0.02."""
    pool = [RetrievalCandidate(1, s_w=0.9), RetrievalCandidate(2, s_w=0.6),
            RetrievalCandidate(3, s_w=0.4), RetrievalCandidate(4, s_w=0.1)]
    r = 2
    scores = np.array([c.s for c in pool])
    weights = scores - scores.min() + 1e-6
    want = inclusion_probs(weights, r)
    counts = {c.pair_id: 0 for c in pool}
    trials = 20000
    for seed in range(trials):
        res = select_training(pool, r, seed)
        assert len(res.selected) == r
        for pid, _ in res.selected:
            counts[pid] += 1
    got = np.array([counts[c.pair_id] / trials for c in pool])
    assert np.abs(got - want).max() < 0.02


def test_training_selection_distinct_and_flagged():
    pool = [RetrievalCandidate(i, s_w=0.5) for i in range(1, 4)]
    res = select_training(pool, r=5, seed=0)
    assert res.flagged
    assert len(res.selected) == 3
    assert len({pid for pid, _ in res.selected}) == 3


def test_training_selection_deterministic_per_seed():
    pool = [RetrievalCandidate(i, s_w=0.1 * i) for i in range(1, 9)]
    a = select_training(pool, 4, seed=42).selected
    b = select_training(pool, 4, seed=42).selected
    c = select_training(pool, 4, seed=43).selected
    assert a == b
    assert a != c


def test_inference_selection_sorted():
    pool = [RetrievalCandidate(3, s_w=0.5), RetrievalCandidate(1, s_w=0.9),
            RetrievalCandidate(2, s_w=0.9), RetrievalCandidate(4, s_w=0.2)]
    res = select_inference(pool, 3)
    assert [pid for pid, _ in res.selected] == [1, 2, 3]
    assert not res.flagged


# -- end to end -----------------------------------------------------------------

def test_retrieve_r0_is_empty(rng):
    index = _index(rng, 10)
    res = retrieve_by_vector(rng.normal(size=8), index, 0, Mode.INFER)
    assert res.selected == [] and res.candidate_pool_size == 0


def test_retrieve_excludes_self(rng):
    index = _index(rng, 10)
    q = index.image_vecs[4].astype(np.float64)
    res = retrieve_by_vector(q, index, 3, Mode.INFER, exclude_pair_id=5)
    assert all(pid != 5 for pid, _ in res.selected)


def test_retrieve_clustered_corpus(rng):
    """With well-separated clusters, at least 3 of the top 4 neighbours of a
    cluster member come from the same cluster."""
    d = 8
    protos = _unit_rows(rng, 4, d) * 10
    rows, labels = [], []
    for k in range(4):
        for _ in range(12):
            rows.append(protos[k] + 0.05 * rng.normal(size=d))
            labels.append(k)
    mat = np.asarray(rows)
    mat = (mat / np.linalg.norm(mat, axis=1, keepdims=True)).astype(np.float32)
    index = EmbeddingIndex(
        d_proj=d, fingerprint=1,
        pair_ids=np.arange(1, 49, dtype=np.uint64),
        source_tags=np.zeros(48, dtype=np.uint8),
        text_vecs=mat, image_vecs=mat,
        captions=[f"cluster {k}" for k in labels],
    )
    for row in (0, 13, 30, 47):
        res = retrieve_by_vector(mat[row].astype(np.float64), index, 4,
                                 Mode.INFER, exclude_pair_id=row + 1)
        same = sum(labels[pid - 1] == labels[row] for pid, _ in res.selected)
        assert same >= 3

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mier.core import CandidatePairSet, DataError, Record
from mier.embedding import (EMB_MAGIC, PairEmbeddingSet, embed_lexical, export_embeddings,
                            import_embeddings, parse_serialized, serialize_pair)


def test_serialize_examples():
    r = {"a": Record("a", {"t": "a"}), "b": Record("b", {"t": "b"})}
    pair = CandidatePairSet([("a", "b")])[0]
    assert serialize_pair(pair, r) == "«L» a «R» b"
    r = {"a": Record("a", {"t": "x", "u": None}), "b": Record("b", {"t": "y", "u": "z"})}
    assert serialize_pair(CandidatePairSet([("a", "b")])[0], r) == "«L» x «F»  «R» y «F» z"


values = st.text(alphabet=st.sampled_from(list("ab \\«»LRF")), min_size=1, max_size=8)


@settings(max_examples=150, deadline=None)
@given(st.lists(values, min_size=1, max_size=4), st.lists(values, min_size=1, max_size=4))
def test_serialization_round_trip(left, right):
    width = max(len(left), len(right))
    left = left + ["v"] * (width - len(left))
    right = right + ["v"] * (width - len(right))
    names = [f"f{i}" for i in range(width)]
    r = {"a": Record("a", dict(zip(names, left))), "b": Record("b", dict(zip(names, right)))}
    text = serialize_pair(CandidatePairSet([("a", "b")])[0], r)
    assert parse_serialized(text) == (left, right)


def _setup(titles):
    records = {f"r{i}": Record(f"r{i}", {"title": t}) for i, t in enumerate(titles)}
    pairs = CandidatePairSet([("r0", "r1"), ("r0", "r2"), ("r3", "r4"), ("r5", "r6")])
    return records, pairs


def test_embedding_basic_properties():
    records, pairs = _setup(["nike air zoom pro", "nike air zoom pro", "nike air zoom pro",
                             "puma yoga mat", "reebok classic", "nike air zoom pro",
                             "nike air zoom pro"])
    emb = embed_lexical(pairs, records, dim=64, seed=3)
    assert emb.vectors.dtype == np.float32 and emb.dim == 64
    assert np.allclose(np.linalg.norm(emb.vectors, axis=1), 1.0, atol=1e-6)
    # pairs (r0,r1), (r0,r2) and (r5,r6) have identical content
    assert np.array_equal(emb.vectors[0], emb.vectors[1])
    assert np.array_equal(emb.vectors[0], emb.vectors[3])
    with pytest.raises(ValueError):
        embed_lexical(pairs, records, dim=8)


def test_typo_pair_is_closer_than_unrelated(rng):
    words = ["trail", "storm", "boost", "classic", "hoodie", "runner", "court", "elite"]
    for _ in range(5):
        title = " ".join(rng.choice(words, size=4))
        i = int(rng.integers(1, len(title) - 1))
        typo = title[:i] + "q" + title[i + 1:]
        records = {"a": Record("a", {"title": title}), "b": Record("b", {"title": title}),
                   "c": Record("c", {"title": typo}),
                   "d": Record("d", {"title": "kettlebell 12kg"}),
                   "e": Record("e", {"title": "yoga mat purple"})}
        pairs = CandidatePairSet([("a", "b"), ("a", "c"), ("d", "e")])
        for shared in (False, True):
            v = embed_lexical(pairs, records, dim=256, shared_grams=shared).vectors
            assert v[0] @ v[1] > v[0] @ v[2]


def test_empty_serialization_gives_zero_vector():
    records = {"a": Record("a", {"t": None, "u": "x"}), "b": Record("b", {"t": None, "u": "y"})}
    pairs = CandidatePairSet([("a", "b")])
    with pytest.warns(UserWarning, match="empty"):
        emb = embed_lexical(pairs, records, dim=16, fields=["t"])
    assert not emb.vectors.any()


def test_idf_uses_train_pairs_only():
    records, pairs = _setup(["nike air", "nike air", "nike aim", "puma", "puma mat",
                             "vans old", "vans old"])
    train = np.array([True, True, False, False])
    a = embed_lexical(pairs, records, dim=64, train_mask=train)
    records2 = dict(records, r3=Record("r3", {"title": "kettlebell set"}))
    b = embed_lexical(pairs, records2, dim=64, train_mask=train)
    # changing a non-train pair leaves the other vectors alone
    assert np.array_equal(a.vectors[[0, 1, 3]], b.vectors[[0, 1, 3]])


def test_permutation_invariance(rng):
    titles = [f"brand{i % 3} model{i} {'x' * (i % 4)}" for i in range(12)]
    records = {f"r{i:02d}": Record(f"r{i:02d}", {"title": t}) for i, t in enumerate(titles)}
    keys = [(f"r{i:02d}", f"r{j:02d}") for i in range(12) for j in range(i + 1, 12)][:30]
    pairs = CandidatePairSet(keys)
    order = rng.permutation(len(keys))
    shuffled = CandidatePairSet([keys[i] for i in order])
    a = embed_lexical(pairs, records, dim=64, shared_grams=True).vectors
    b = embed_lexical(shuffled, records, dim=64, shared_grams=True).vectors
    assert np.array_equal(a[order], b)


def test_export_import_bit_exact(tmp_path, rng):
    sets = [PairEmbeddingSet(p, rng.normal(size=(7, 5)), rng.permutation(7)) for p in range(3)]
    path = export_embeddings(sets, tmp_path)
    back = import_embeddings(path)
    assert back == sets
    raw = (tmp_path / "intent_0.emb").read_bytes()
    assert raw[:8] == EMB_MAGIC and len(raw) == 16 + 4 * 35
    aligned = import_embeddings(path, align=True)
    assert np.array_equal(aligned[1].vectors, sets[1].aligned())


def test_import_errors(tmp_path, rng):
    sets = [PairEmbeddingSet(0, rng.normal(size=(4, 3)), np.arange(4))]
    path = export_embeddings(sets, tmp_path)
    (tmp_path / "intent_0.idx").write_text("0\n1\n2\n2\n")
    with pytest.raises(DataError, match="pair id 2"):
        import_embeddings(path)
    (tmp_path / "intent_0.idx").write_text("0\n1\n2\n3\n")
    m = json.loads(path.read_text())
    m["files"][0]["dim"] = 4
    path.write_text(json.dumps(m))
    with pytest.raises(DataError, match="dimension"):
        import_embeddings(path)
    with pytest.raises(DataError, match="expected 5"):
        import_embeddings(export_embeddings(sets, tmp_path / "b"), pair_count=5)
    bad = np.ones((4, 3), np.float32)
    bad[2, 1] = np.nan
    with pytest.raises(DataError, match="pair 2"):
        PairEmbeddingSet(0, bad, np.arange(4))

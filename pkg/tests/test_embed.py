import numpy as np
import pytest
from hypothesis import given, strategies as st

from txweak.embed import (EmbeddingConfig, EmbeddingModel, EmptyVocabularyError, SubwordEmbedding, char_ngrams,
                          cosine, fnv1a, ngram_buckets, train_embedding)
from txweak.synthgen import PLANTED_CLUSTERS, planted_cluster_corpus

SMALL = EmbeddingConfig(dim=16, epochs=3, min_count=2, bucket_count=5000, seed=3)


@pytest.fixture(scope="module")
def planted():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 3000, seed=0)
    return train_embedding(corpus, EmbeddingConfig(dim=32, epochs=5, min_count=2, bucket_count=20000, seed=0))


@pytest.fixture(scope="module")
def tiny():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 200, seed=1)
    return train_embedding(corpus, SMALL)


def test_fnv1a_reference_values():
    # published FNV-1a 32-bit test vectors
    assert fnv1a("") == 0x811C9DC5
    assert fnv1a("a") == 0xE40C292C
    assert fnv1a("foobar") == 0xBF9CF968


def test_char_ngrams_use_boundaries():
    assert char_ngrams("ab", 3, 4) == ["<ab", "ab>"]
    assert char_ngrams("q", 3, 6) == []


def test_config_validation():
    for bad in ({"dim": 0}, {"min_n": 4, "max_n": 3}, {"negatives": 0}, {"min_n": 0}):
        with pytest.raises(ValueError):
            EmbeddingConfig(**bad)


def test_deterministic_single_worker():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 300, seed=2)
    a, b = train_embedding(corpus, SMALL), train_embedding(corpus, SMALL)
    assert a.to_bytes() == b.to_bytes()


def test_planted_similarity(planted):
    assert cosine(planted.vector("rent"), planted.vector("rentpay")) > cosine(planted.vector("rent"),
                                                                             planted.vector("coffee"))


def test_planted_neighbors_majority_same_cluster(planted):
    for cluster, words in PLANTED_CLUSTERS.items():
        nn = [w for w, _ in planted.nearest_neighbors(words[0], 5)]
        assert sum(w in words for w in nn) >= 3, (cluster, nn)


def test_empty_vocabulary():
    with pytest.raises(EmptyVocabularyError):
        train_embedding([["rent", "pay"]] * 3, EmbeddingConfig(dim=4, min_count=10))


def test_in_vocab_vector_is_stored(tiny):
    w = tiny.words[0]
    assert np.array_equal(tiny.vector(w), tiny.word_table[w])


def test_oov_vector_is_mean_of_known_ngrams(tiny):
    cfg = tiny.config
    table = tiny.ngram_table
    word = "rentpayz"
    assert word not in tiny
    known = [table[b] for b in ngram_buckets(word, cfg.min_n, cfg.max_n, cfg.bucket_count) if b in table]
    assert known
    np.testing.assert_allclose(tiny.vector(word), np.mean(np.array(known, dtype=np.float64), axis=0), rtol=1e-6)


def test_oov_without_ngrams_is_zero(tiny):
    assert not np.any(tiny.vector("q"))


def test_neighbors_duplicate_vector_and_large_k():
    wv = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    m = EmbeddingModel(["a", "b", "c", "d"], wv, np.zeros(0, np.int64), np.zeros((0, 2)),
                       EmbeddingConfig(dim=2, bucket_count=10))
    assert m.nearest_neighbors("a", 1) == [("b", 1.0)]
    assert [w for w, _ in m.nearest_neighbors("a", 50)] == ["b", "c", "d"]
    with pytest.raises(ValueError):
        m.nearest_neighbors("a", 0)


def test_neighbor_ties_are_lexicographic():
    wv = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    m = EmbeddingModel(["q", "zz", "aa"], wv, np.zeros(0, np.int64), np.zeros((0, 2)),
                       EmbeddingConfig(dim=2, bucket_count=10))
    assert [w for w, _ in m.nearest_neighbors("q", 2)] == ["aa", "zz"]


def test_max_word_similarity_cases(tiny):
    w = tiny.words[0]
    assert tiny.max_word_similarity([w], tiny.vector(w)) == pytest.approx(1.0)
    assert tiny.max_word_similarity([], tiny.vector(w)) == -1.0
    # hand-built vectors with cosines 0.3 and 0.8 against the anchor e0
    wv = np.array([[0.3, np.sqrt(1 - 0.09)], [0.8, 0.6]])
    m = EmbeddingModel(["x", "y"], wv, np.zeros(0, np.int64), np.zeros((0, 2)),
                       EmbeddingConfig(dim=2, bucket_count=10))
    assert m.max_word_similarity(["x", "y"], np.array([1.0, 0.0])) == pytest.approx(0.8)


vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=3).map(np.array)


@given(vec, vec)
def test_cosine_bound_and_symmetry(a, b):
    c = cosine(a, b)
    assert abs(c) <= 1 + 1e-9
    assert c == cosine(b, a)


def test_zero_vector_cosine():
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_loss_decreases_first_epoch():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 2000, seed=4)
    m = train_embedding(corpus, EmbeddingConfig(dim=16, epochs=1, min_count=2, bucket_count=5000, seed=0))
    h = m.loss_history
    assert len(h) >= 5
    assert h[-1] < h[0]


def test_serialization_round_trip(tiny, tmp_path):
    p = tmp_path / "m.bin"
    tiny.save(p)
    back = EmbeddingModel.load(p)
    assert back.to_bytes() == tiny.to_bytes()
    assert p.read_bytes()[:4] == tiny.to_bytes()[:4]
    with pytest.raises(ValueError):
        EmbeddingModel.from_bytes(b"nope" + bytes(20))
    tiny.export_text(tmp_path / "m.txt")
    lines = (tmp_path / "m.txt").read_text().splitlines()
    assert len(lines) == len(tiny.words) + 1 and len(lines[1].split()) == tiny.dim + 1


def test_multi_worker_trains_finite():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 400, seed=5)
    m = train_embedding(corpus, EmbeddingConfig(dim=8, epochs=2, min_count=2, bucket_count=2000, workers=3))
    assert np.all(np.isfinite(m.word_vectors)) and np.all(np.isfinite(m.ngram_vectors))


def test_estimator_wrapper():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 200, seed=1)
    est = SubwordEmbedding(dim=8, epochs=1, min_count=2, bucket_count=2000).fit(corpus)
    out = est.transform([["rent", "coffee"], []])
    assert out[0].shape == (2, 8) and out[1].shape == (0, 8)

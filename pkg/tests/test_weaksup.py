import numpy as np
import pytest
from hypothesis import given, strategies as st

from txweak.embed import EmbeddingConfig, EmbeddingModel, train_embedding
from txweak.synthgen import PLANTED_CLUSTERS, planted_cluster_corpus
from txweak.txprep import Transaction, date_to_day, group
from txweak.weaksup import (LabelMatrix, LabelingFunction, LFConfigError, and_lf, anchor_lf, apply_lfs, dump_lfs,
                            expand_anchor, format_report, frequency_lf, lf_report, load_lfs, not_lf, or_lf,
                            pattern_lf)


def grp(desc, days=("2024-01-01",), cents=1000, acct="a"):
    members = [Transaction(acct, f"{acct}-{desc}-{i}", date_to_day(d), cents, desc) for i, d in enumerate(days)]
    return group(members)[0]


@pytest.fixture(scope="module")
def planted():
    corpus = planted_cluster_corpus(PLANTED_CLUSTERS, 3000, seed=0)
    return train_embedding(corpus, EmbeddingConfig(dim=32, epochs=5, min_count=2, bucket_count=20000, seed=0))


def test_pattern_word_boundaries():
    gs = [grp("afford payment"), grp("ford motor credit")]
    m = apply_lfs(gs, [pattern_lf("ford", "ford")])
    assert m.votes[:, 0].tolist() == [0, 1]


def test_frequency_monthly():
    g = grp("landlord", days=("2024-01-01", "2024-02-01", "2024-03-01"))
    assert g.aggregates.mean_gap_days == 30.0
    m = apply_lfs([g], [frequency_lf("monthly", (27, 34), min_count=3)])
    assert m.votes[0, 0] == 1
    g2 = grp("landlord", days=("2024-01-01", "2024-02-01", "2024-03-01"))
    assert apply_lfs([g2], [frequency_lf("monthly", (27, 34), min_count=4)]).votes[0, 0] == 0


def test_frequency_gap_example_29_5():
    # gaps 31 and 28
    g = grp("landlord", days=("2023-01-01", "2023-02-01", "2023-03-01"))
    assert g.aggregates.mean_gap_days == 29.5
    assert apply_lfs([g], [frequency_lf("m", (27, 34))]).votes[0, 0] == 1


def test_frequency_amount_cap():
    members = [Transaction("a", f"t{i}", date_to_day(d), c, "x")
               for i, (d, c) in enumerate([("2024-01-01", 100), ("2024-02-01", 1000), ("2024-03-02", 100)])]
    g = group(members)[0]
    assert apply_lfs([g], [frequency_lf("m", (27, 34), max_cv=0.1)]).votes[0, 0] == 0
    assert apply_lfs([g], [frequency_lf("m", (27, 34), max_cv=5.0)]).votes[0, 0] == 1


def test_anchor_self_match(planted):
    g = grp("rent")
    m = apply_lfs([g, grp("qqqq")], [anchor_lf("rent_a", "rent", 0.7)], planted)
    assert m.votes[0, 0] == 1


def test_anchor_needs_model():
    with pytest.raises(LFConfigError):
        apply_lfs([grp("rent")], [anchor_lf("a", "rent", 0.5)])


def test_anchor_vector_param():
    m = EmbeddingModel(["x"], np.array([[1.0, 0.0]]), np.zeros(0, np.int64), np.zeros((0, 2)),
                       EmbeddingConfig(dim=2, bucket_count=10))
    out = apply_lfs([grp("x"), grp("y")], [anchor_lf("v", [1.0, 0.0], 0.9, polarity=-1)], m)
    assert out.votes[:, 0].tolist() == [-1, 0]


@pytest.mark.parametrize("lo,hi", [(0.3, 0.5), (0.5, 0.9), (0.1, 0.95)])
def test_anchor_threshold_monotone(planted, lo, hi):
    words = [w for ws in PLANTED_CLUSTERS.values() for w in ws]
    gs = [grp(w, acct=f"a{i}") for i, w in enumerate(words)]
    a = apply_lfs(gs, [anchor_lf("a", "rent", lo)], planted).votes[:, 0]
    b = apply_lfs(gs, [anchor_lf("a", "rent", hi)], planted).votes[:, 0]
    assert np.all((b != 0) <= (a != 0))


def test_composites():
    gs = [grp("rent zelle"), grp("rent"), grp("zelle"), grp("coffee")]
    lfs = [pattern_lf("r", "rent"), pattern_lf("z", "zelle", polarity=-1, emit=False),
           not_lf("not_r", "r"), and_lf("both", "r", "r"), and_lf("mixed", "r", "z"),
           or_lf("either", "z", "r")]
    m = apply_lfs(gs, lfs)
    assert m.lf_names == ["r", "not_r", "both", "mixed", "either"]
    col = {n: m.votes[:, j].tolist() for j, n in enumerate(m.lf_names)}
    assert col["not_r"] == [-1, -1, 0, 0]
    assert col["both"] == [1, 1, 0, 0]
    assert col["mixed"] == [0, 0, 0, 0]
    assert col["either"] == [-1, 1, -1, 0]


def test_composite_errors():
    with pytest.raises(LFConfigError):
        apply_lfs([grp("x")], [not_lf("n", "missing")])
    with pytest.raises(LFConfigError):
        apply_lfs([grp("x")], [not_lf("a", "b"), not_lf("b", "a")])
    with pytest.raises(LFConfigError):
        apply_lfs([grp("x")], [pattern_lf("a", "x"), pattern_lf("a", "y")])


def test_lf_validation():
    with pytest.raises(LFConfigError):
        LabelingFunction("x", "magic", {})
    with pytest.raises(LFConfigError):
        anchor_lf("a", "rent", -1.0)
    with pytest.raises(LFConfigError):
        anchor_lf("a", "rent", 1.5)
    with pytest.raises(LFConfigError):
        frequency_lf("f", (30, 20))
    with pytest.raises(LFConfigError):
        pattern_lf("p", "x", polarity=2)


@given(st.lists(st.sampled_from(["rent pay", "coffee", "afford", "ford", "zelle rent", ""]), max_size=12))
def test_apply_deterministic_and_negation(texts):
    gs = [grp(t, acct=f"a{i}") for i, t in enumerate(texts)]
    lfs = [pattern_lf("f", "ford|rent"), pattern_lf("z", "zelle", polarity=-1), not_lf("nf", "f"), not_lf("nz", "z")]
    a, b = apply_lfs(gs, lfs), apply_lfs(gs, lfs)
    assert np.array_equal(a.votes, b.votes)
    assert np.array_equal(a.votes[:, 2], -a.votes[:, 0])
    assert np.array_equal(a.votes[:, 3], -a.votes[:, 1])


def mat(cols):
    v = np.array(cols, dtype=np.int8).T
    return LabelMatrix(v, [f"g{i}" for i in range(v.shape[0])], [f"lf{j}" for j in range(v.shape[1])])


def test_report_examples():
    r = lf_report(mat([[0, 0, 0]]))
    assert (r.coverage[0], r.overlap[0], r.conflict[0]) == (0, 0, 0)
    r = lf_report(mat([[1, 1, 1], [1, 1, 1]]))
    assert r.coverage.tolist() == [1, 1] and r.overlap.tolist() == [1, 1] and r.conflict.tolist() == [0, 0]
    r = lf_report(mat([[1, 1, 0, 0], [0, -1, 0, 0]]))
    assert (r.coverage[0], r.overlap[0], r.conflict[0]) == (0.5, 0.25, 0.25)


def test_report_accuracy_and_alignment():
    m = mat([[1, 1, -1, 0]])
    r = lf_report(m, [1, 0, 0, 1])
    assert r.accuracy[0] == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        lf_report(m, [1, 0])
    assert "lf0" in format_report(r)


@given(st.integers(1, 20), st.integers(1, 5), st.data())
def test_report_identities(n, m, data):
    v = data.draw(st.lists(st.lists(st.sampled_from([-1, 0, 1]), min_size=n, max_size=n), min_size=m, max_size=m))
    r = lf_report(mat(v))
    for j in range(m):
        assert 0 <= r.conflict[j] <= r.overlap[j] <= r.coverage[j] <= 1


def test_expand_anchor(planted):
    assert "rent" in [w for w, _ in expand_anchor(planted, "rent", 1.0)]
    assert expand_anchor(planted, "zzzzzz", 1.0) == []
    hits = [w for w, _ in expand_anchor(planted, "rent", 0.6)]
    assert sum(w in PLANTED_CLUSTERS["housing"] for w in hits) >= 3
    sims = [s for _, s in expand_anchor(planted, "rent", 0.0)]
    assert sims == sorted(sims, reverse=True)


def test_matrix_and_config_round_trip(tmp_path):
    m = mat([[1, 0, -1], [0, 0, 1]])
    m.save(tmp_path / "m.jsonl")
    back = LabelMatrix.load(tmp_path / "m.jsonl")
    assert np.array_equal(back.votes, m.votes) and back.group_ids == m.group_ids
    lfs = [pattern_lf("p", "rent"), frequency_lf("f", (27, 34), emit=False), or_lf("o", "p", "f")]
    dump_lfs(lfs, tmp_path / "l.yaml")
    assert [lf.to_dict() for lf in load_lfs(tmp_path / "l.yaml")] == [lf.to_dict() for lf in lfs]


def test_matrix_validation():
    with pytest.raises(ValueError):
        LabelMatrix(np.array([[2]]), ["g"], ["a"])
    with pytest.raises(ValueError):
        LabelMatrix(np.zeros((2, 1)), ["g"], ["a"])


def test_shipped_configs_parse():
    from pathlib import Path
    root = Path(__file__).parents[1] / "configs"
    for p in root.glob("lfs_*.yaml"):
        assert load_lfs(p)

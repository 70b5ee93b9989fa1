import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from txweak.synthgen import (CategorySpec, NoiseSpec, SynthConfig, SynthConfigError, benchmark_config,
                             benchmark_categories, generate, load_truth, split)
from txweak.txprep import group, normalize, read_transactions

from oracles import mean_gap

RENTISH = CategorySpec("rent", 0.5, ("rent payment",), payees=("oak", "elm"), amount_median=1000,
                       gap_mean=30, gap_std=2, noise=NoiseSpec(0.3, 0.3, 0.5, 0.5))


def test_deterministic():
    cfg = benchmark_config(60, seed=4)
    a, b = generate(cfg), generate(cfg)
    assert a.transactions == b.transactions and a.truth == b.truth
    assert generate(benchmark_config(60, seed=5)).transactions != a.transactions


def test_recurring_gap_mean():
    cfg = SynthConfig(200, (CategorySpec("rent", 0.99, ("rent",), gap_mean=30, gap_std=2),),
                      history_days=(365, 400), seed=1)
    corpus = generate(cfg)
    gaps = []
    for row in corpus.truth:
        days = [t.day for t in corpus.transactions if t.transaction_id in set(row["transaction_ids"])]
        if len(days) >= 12:
            gaps.append(mean_gap(days))
    assert gaps
    overall = float(np.mean(gaps))
    assert 28 <= overall <= 32
    assert all(28 <= g <= 32 for g in gaps)


def test_prevalence_binomial_bound():
    n, p = 10000, 0.01
    cfg = SynthConfig(n, (CategorySpec("rare", p, ("rare thing",)),), seed=2)
    count = len({r["account_id"] for r in generate(cfg).truth})
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(count - n * p) <= 3 * sigma


@pytest.mark.parametrize("bad", [
    dict(categories=(CategorySpec("x", 1.0, ("a",)),)),
    dict(categories=(CategorySpec("x", 0.5, ()),)),
    dict(categories=(CategorySpec("x", 0.5, ("a",), gap_mean=90),), history_days=(30, 60)),
    dict(categories=(CategorySpec("x", 0.5, ("a",), gap_mean=0),)),
    dict(categories=(CategorySpec("x", 0.5, ("a",)), CategorySpec("x", 0.5, ("b",)))),
    dict(categories=(), history_days=(10, 5)),
])
def test_infeasible_configs(bad):
    with pytest.raises(SynthConfigError):
        generate(SynthConfig(5, **{"categories": (), **bad}))


def test_truth_keys_are_pre_noise():
    corpus = generate(SynthConfig(300, (RENTISH,), seed=3))
    by_id = {t.transaction_id: t for t in corpus.transactions}
    noisy = 0
    for row in corpus.truth:
        assert row["key"] in {"rent payment oak", "rent payment elm"}
        for tid in row["transaction_ids"]:
            noisy += normalize(by_id[tid].description).render() != row["key"]
            assert corpus.tx_truth[tid] == ("rent",)
    assert noisy > 0


def test_truth_file_round_trip(tmp_path):
    corpus = generate(benchmark_config(30, seed=0))
    corpus.save(tmp_path / "t.csv", tmp_path / "truth.jsonl")
    assert read_transactions(tmp_path / "t.csv") == corpus.transactions
    assert load_truth(tmp_path / "truth.jsonl") == corpus.tx_truth


def test_group_labels_majority():
    corpus = generate(benchmark_config(80, seed=1))
    gs = group(corpus.transactions)
    y = corpus.group_labels(gs, "rent")
    assert 0 < y.sum() < len(y)


def test_split_everything_in_train():
    gs = group(generate(benchmark_config(40, seed=0)).transactions)
    tr, va, te = split(gs, (1, 0, 0), seed=0)
    assert len(tr) == len(gs) and not va and not te


def test_split_counts_and_disjoint():
    gs = group(generate(SynthConfig(1000, (CategorySpec("c", 0.99, ("a", "b", "c", "d", "e"),
                                                            instances=(5, 5)),), seed=0)).transactions)
    tr, va, te = split(gs, (0.7, 0.15, 0.15), seed=3)
    folds = [{g.account_id for g in f} for f in (tr, va, te)]
    assert not (folds[0] & folds[1]) and not (folds[0] & folds[2]) and not (folds[1] & folds[2])
    total = sum(map(len, folds))
    for f, want in zip(folds, (0.7, 0.15, 0.15)):
        assert abs(len(f) - want * total) <= 1
    five = [a for a in folds[0] if sum(g.account_id == a for g in gs) == 5]
    assert five


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_split_is_account_partition(seed, f1, f2):
    f1, f2 = f1 / 2, f2 / 2
    gs = group(generate(benchmark_config(25, seed=seed % 7)).transactions)
    tr, va, te = split(gs, (1 - f1 - f2, f1, f2), seed=seed)
    assert len(tr) + len(va) + len(te) == len(gs)
    accts = [{g.account_id for g in f} for f in (tr, va, te)]
    assert sum(map(len, accts)) == len({g.account_id for g in gs})


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        split([], (0.5, 0.2, 0.2))


def test_benchmark_has_text_ambiguous_hard_task():
    cats = {c.name: c for c in benchmark_categories()}
    rent, p2p = cats["rent"], cats["p2p"]
    assert rent.recurring and not p2p.recurring
    assert set(p2p.phrases) <= set(rent.phrases) and set(p2p.payees) <= set(rent.payees)

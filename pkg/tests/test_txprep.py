import datetime as dt
import math

import pytest
from hypothesis import given, strategies as st

from txweak.txprep import (DataError, Transaction, build_sparse_series, compute_aggregates, date_to_day, group,
                           load_groups, normalize, read_groups, read_transactions, write_groups,
                           write_transactions)

from oracles import mean_gap


def tx(tid, day, cents, desc="rent payment", acct="a1", merchant=None):
    return Transaction(acct, tid, date_to_day(day) if isinstance(day, str) else day, cents, desc, merchant)


# -- normalize

def test_normalize_strips_dates_codes_and_digits():
    got = normalize("POS PURCHASE 03/14 CARD#1234 STARBUCKS #0552 SEATTLE WA").tokens
    assert got == ("pos", "purchase", "starbucks", "seattle", "wa")


def test_normalize_empty():
    assert normalize("").tokens == ()
    assert normalize(None).tokens == ()


def test_normalize_appends_merchant():
    assert normalize("ACH Pmt X9F7Q23A VERIZON", "Verizon Wireless").tokens == (
        "ach", "pmt", "verizon", "verizon", "wireless")


def test_normalize_tolerates_bad_bytes():
    out = normalize(b"CAF\xff\xfe COFFEE")
    assert "coffee" in out.tokens
    assert all(t.isascii() and t for t in out.tokens)


def test_normalize_folds_accents():
    assert normalize("Café Müller").tokens == ("cafe", "muller")


def test_short_alnum_tokens_survive():
    # only long mixed tokens are reference codes
    assert normalize("a1b2 store").tokens == ("a1b2", "store")
    assert normalize("7eleven store").tokens == ("store",)
    assert normalize("ab12cd store").tokens == ("store",)


text_st = st.text(alphabet=st.characters(codec="utf-8"), max_size=60)


@given(text_st, st.one_of(st.none(), text_st))
def test_normalize_idempotent(desc, merchant):
    once = normalize(desc, merchant)
    assert normalize(once.render()) == once
    for t in once.tokens:
        assert t and not any(c.isspace() for c in t)


words = st.lists(st.text(alphabet="abcdefghij", min_size=1, max_size=8), min_size=1, max_size=5)


@given(words, st.data())
def test_noise_invariance(ws, data):
    def noisy():
        parts = []
        for w in ws:
            w = "".join(c.upper() if data.draw(st.booleans()) else c for c in w)
            parts.append(w)
            parts.append(data.draw(st.sampled_from([" ", "  ", " 123 ", " - ", ", ", "\t", " #9 "])))
        return "".join(parts)

    assert normalize(noisy()) == normalize(noisy())


# -- group

def test_group_merges_digit_variants():
    gs = group([tx("1", "2024-01-01", 100, "ZELLE 4411 LANDLORD"), tx("2", "2024-02-01", 100, "ZELLE 9 LANDLORD")])
    assert len(gs) == 1 and len(gs[0].members) == 2


def test_group_splits_accounts():
    gs = group([tx("1", "2024-01-01", 100, acct="a"), tx("2", "2024-01-01", 100, acct="b")])
    assert [g.account_id for g in gs] == ["a", "b"]


def test_group_empty():
    assert group([]) == []


tx_st = st.builds(
    lambda i, acct, day, cents, desc: Transaction(acct, f"t{i}", day, cents, desc),
    st.integers(), st.sampled_from(["a", "b", "c"]), st.integers(18000, 20000),
    st.integers(-10**6, 10**6), st.sampled_from(["rent 12", "RENT 13", "coffee shop", "fuel #9", ""]))


@given(st.lists(tx_st, max_size=40))
def test_group_is_partition(txs):
    txs = [Transaction(t.account_id, f"t{i}", t.day, t.amount_cents, t.description) for i, t in enumerate(txs)]
    gs = group(txs)
    ids = [t.transaction_id for g in gs for t in g.members]
    assert sorted(ids) == sorted(t.transaction_id for t in txs)
    keys = [(g.account_id, g.text) for g in gs]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)
    for g in gs:
        assert all(t.account_id == g.account_id and normalize(t.description).render() == g.text
                   for t in g.members)


# -- sparse series

def test_series_ordering_example():
    s = build_sparse_series([tx("a", "2024-01-01", 5000), tx("b", "2024-01-15", 5000), tx("c", "2024-01-15", 1000)])
    assert s.entries == [(50.0, 0), (10.0, 0), (50.0, 14)]


def test_series_single_and_same_day():
    assert build_sparse_series([tx("a", "2024-01-01", 700)]).entries == [(7.0, 0)]
    s = build_sparse_series([tx("a", "2024-01-01", 700), tx("b", "2024-01-01", 700)])
    assert list(s.delta_days) == [0, 0]


def test_series_needs_members():
    with pytest.raises(ValueError):
        build_sparse_series([])


@given(st.lists(st.tuples(st.integers(0, 3000), st.integers(-10**5, 10**5)), min_size=1, max_size=30))
def test_series_round_trip(rows):
    members = [Transaction("a", f"t{i}", d, c, "x") for i, (d, c) in enumerate(rows)]
    s = build_sparse_series(members)
    assert len(s) == len(members) and s.delta_days[0] == 0
    latest = max(d for d, _ in rows)
    rebuilt, cur = [], latest
    for d in s.delta_days:
        cur -= d
        rebuilt.append(cur)
    assert rebuilt == sorted((d for d, _ in rows), reverse=True)


# -- aggregates

def test_aggregates_example():
    a = compute_aggregates([tx("a", 1, 1000), tx("b", 2, 2000), tx("c", 3, 3000)])
    assert (a.count, a.mean, a.min, a.max, a.median, a.std, a.coeff_var) == (3, 20.0, 10.0, 30.0, 20.0, 10.0, 0.5)


def test_aggregates_single():
    a = compute_aggregates([tx("a", 1, 700)])
    assert a.std == 0.0 and math.isnan(a.mean_gap_days)
    assert a.to_dict()["mean_gap_days"] is None


def test_aggregates_gap_and_zero_mean():
    a = compute_aggregates([tx("a", "2024-01-01", 100), tx("b", "2024-01-15", -100), tx("c", "2024-01-29", 0)])
    assert a.mean_gap_days == 14.0
    assert math.isnan(a.coeff_var)


@given(st.lists(st.tuples(st.integers(0, 3000), st.integers(-10**6, 10**6)), min_size=1, max_size=30))
def test_aggregates_brute_force(rows):
    members = [Transaction("a", f"t{i}", d, c, "x") for i, (d, c) in enumerate(rows)]
    a = compute_aggregates(members)
    amounts = sorted(c / 100 for _, c in rows)
    n = len(amounts)
    mean = sum(amounts) / n
    std = math.sqrt(sum((x - mean) ** 2 for x in amounts) / (n - 1)) if n > 1 else 0.0
    median = amounts[n // 2] if n % 2 else (amounts[n // 2 - 1] + amounts[n // 2]) / 2
    assert a.count == n and a.min == amounts[0] and a.max == amounts[-1]
    assert a.min <= a.median <= a.max
    assert a.mean == pytest.approx(mean, abs=1e-6)
    assert a.std == pytest.approx(std, rel=1e-9, abs=1e-6)
    assert a.median == pytest.approx(median)
    if n > 1:
        assert a.mean_gap_days == pytest.approx(mean_gap([d for d, _ in rows]))
    if mean != 0 and a.mean != 0:
        assert a.coeff_var == pytest.approx(a.std / a.mean)


# -- io

def test_transaction_file_round_trip(tmp_path):
    txs = [tx("1", "2024-03-01", 123456, "RENT", merchant="Oak Apts"), tx("2", "2024-03-02", -50, "refund")]
    for name in ("t.csv", "t.jsonl"):
        write_transactions(txs, tmp_path / name)
        assert read_transactions(tmp_path / name) == txs


def test_groups_file_round_trip(tmp_path):
    gs = group([tx("1", "2024-01-01", 100), tx("2", "2024-02-01", 100), tx("3", "2024-02-01", 5, "coffee")])
    write_groups(gs, tmp_path / "g.jsonl")
    back = read_groups(tmp_path / "g.jsonl")
    assert [g.to_record() for g in back] == [g.to_record() for g in gs]
    assert [g.to_record() for g in load_groups(tmp_path / "g.jsonl")] == [g.to_record() for g in gs]


def test_bad_rows_raise_data_error(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("account_id,transaction_id,date,amount,description,merchant_name\na,1,2024-13-40,1.00,x,\n")
    with pytest.raises(DataError):
        read_transactions(p)
    p.write_text("account_id,transaction_id,date,amount,description,merchant_name\na,1,2024-01-01,abc,x,\n")
    with pytest.raises(DataError):
        read_transactions(p)


def test_amount_rounding_is_exact():
    t = Transaction.from_record({"account_id": "a", "transaction_id": "1", "date": "2024-01-01",
                                 "amount": "0.125", "description": "x"})
    assert t.amount_cents == 12 and t.date == dt.date(2024, 1, 1)

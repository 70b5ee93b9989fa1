"""Transaction parsing, text normalization, grouping and sparse series.

Dates are carried as integer day counts since 1970-01-01 and amounts as
integer cents, so grouping keys and deltas never see float drift.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
import re
import statistics
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Iterable, Sequence

EPOCH = dt.date(1970, 1, 1)
UNDEFINED = math.nan

_DATE_TOKEN = re.compile(r"^\d{1,4}([/\-.])\d{1,2}(?:\1\d{1,4})?$")
_PUNCT = re.compile(r"[^a-z0-9\s]+")
_DIGITS = re.compile(r"^\d+$")
_HAS_ALPHA = re.compile(r"[a-z]")
_HAS_DIGIT = re.compile(r"\d")

TRANSACTION_FIELDS = ("account_id", "transaction_id", "date", "amount", "description", "merchant_name")


class DataError(ValueError):
    """Malformed transaction input."""


def date_to_day(value: dt.date | str) -> int:
    if isinstance(value, str):
        value = dt.date.fromisoformat(value.strip())
    return (value - EPOCH).days


def day_to_date(day: int) -> dt.date:
    return EPOCH + dt.timedelta(days=int(day))


def parse_cents(value) -> int:
    try:
        dec = Decimal(str(value).strip())
    except InvalidOperation as exc:
        raise DataError(f"invalid amount {value!r}") from exc
    if not dec.is_finite():
        raise DataError(f"invalid amount {value!r}")
    return int((dec * 100).to_integral_value(rounding="ROUND_HALF_EVEN"))


@dataclass(frozen=True)
class Transaction:
    """A raw bank transaction. Positive amounts are debits, negative credits."""

    account_id: str
    transaction_id: str
    day: int
    amount_cents: int
    description: str
    merchant_name: str | None = None

    @property
    def date(self) -> dt.date:
        return day_to_date(self.day)

    @property
    def amount(self) -> float:
        return self.amount_cents / 100.0

    @classmethod
    def from_record(cls, rec: dict) -> "Transaction":
        missing = [k for k in TRANSACTION_FIELDS[:5] if k not in rec or rec[k] is None]
        if missing:
            raise DataError(f"transaction record missing fields {missing}")
        try:
            day = date_to_day(str(rec["date"]))
        except ValueError as exc:
            raise DataError(f"invalid date {rec['date']!r}") from exc
        merchant = rec.get("merchant_name") or None
        return cls(
            account_id=str(rec["account_id"]),
            transaction_id=str(rec["transaction_id"]),
            day=day,
            amount_cents=parse_cents(rec["amount"]),
            description=str(rec["description"]),
            merchant_name=str(merchant) if merchant is not None else None,
        )

    def to_record(self) -> dict:
        return {
            "account_id": self.account_id,
            "transaction_id": self.transaction_id,
            "date": self.date.isoformat(),
            "amount": f"{Decimal(self.amount_cents) / 100:.2f}",
            "description": self.description,
            "merchant_name": self.merchant_name,
        }


@dataclass(frozen=True)
class NormalizedText:
    tokens: tuple[str, ...]

    def render(self) -> str:
        return " ".join(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class SparseSeries:
    """Most-recent-first ``(amount, delta_days)`` entries; ``delta_days[0] == 0``."""

    amounts: tuple[float, ...]
    delta_days: tuple[int, ...]

    def __len__(self):
        return len(self.amounts)

    @property
    def entries(self) -> list[tuple[float, int]]:
        return list(zip(self.amounts, self.delta_days))


@dataclass(frozen=True)
class GroupAggregates:
    max: float
    min: float
    count: int
    mean: float
    std: float
    median: float
    coeff_var: float
    mean_gap_days: float

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.__dict__.items()}


@dataclass
class TransactionGroup:
    account_id: str
    normalized_text: NormalizedText
    members: list[Transaction]
    series: SparseSeries = field(repr=False)
    aggregates: GroupAggregates = field(repr=False)

    @property
    def group_id(self) -> str:
        return group_key_id(self.account_id, self.normalized_text.render())

    @property
    def text(self) -> str:
        return self.normalized_text.render()

    def to_record(self) -> dict:
        return {
            "group_id": self.group_id,
            "account_id": self.account_id,
            "text": self.text,
            "transaction_ids": [t.transaction_id for t in self.members],
            "series": [[a, d] for a, d in self.series.entries],
            "aggregates": self.aggregates.to_dict(),
            "members": [t.to_record() for t in self.members],
        }


def group_key_id(account_id: str, rendered: str) -> str:
    return f"{account_id}|{rendered}"


# -- normalization ----------------------------------------------------------


def _fold_ascii(text: str) -> str:
    return unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode("ascii")


def _is_reference_code(token: str) -> bool:
    alnum = re.sub(r"[^a-z0-9]", "", token)
    return len(alnum) >= 6 and bool(_HAS_ALPHA.search(alnum)) and bool(_HAS_DIGIT.search(alnum))


def _clean(text: str | bytes | None) -> list[str]:
    if text is None:
        return []
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    text = _fold_ascii(text.lower())
    out: list[str] = []
    for raw in text.split():
        # whole-token date and reference-code rules run before punctuation
        # splitting so "card#1234" or "03/14" never leave fragments behind
        if _DATE_TOKEN.match(raw) or _is_reference_code(raw):
            continue
        for tok in _PUNCT.sub(" ", raw).split():
            if _DIGITS.match(tok) or _is_reference_code(tok):
                continue
            out.append(tok)
    return out


def normalize(description: str | bytes | None, merchant_name: str | bytes | None = None) -> NormalizedText:
    """Normalize a raw description, appending the normalized merchant name.

    Lowercases and folds to ASCII, drops date-shaped tokens, pure digit
    runs and long mixed letter/digit reference codes, and turns punctuation
    into token breaks. Normalizing the rendered output again is a no-op.
    """
    tokens = _clean(description)
    if merchant_name:
        tokens.extend(_clean(merchant_name))
    return NormalizedText(tuple(tokens))


# -- grouping ---------------------------------------------------------------


def _ordered(members: Sequence[Transaction]) -> list[Transaction]:
    # most recent first; same-day ties by descending amount then id
    return sorted(members, key=lambda t: (-t.day, -t.amount_cents, t.transaction_id))


def build_sparse_series(members: Sequence[Transaction]) -> SparseSeries:
    if not members:
        raise ValueError("build_sparse_series needs at least one transaction")
    ordered = _ordered(members)
    deltas = [0] + [ordered[i - 1].day - ordered[i].day for i in range(1, len(ordered))]
    return SparseSeries(tuple(t.amount for t in ordered), tuple(deltas))


def compute_aggregates(members: Sequence[Transaction]) -> GroupAggregates:
    if not members:
        raise ValueError("compute_aggregates needs at least one transaction")
    amounts = [t.amount for t in members]
    n = len(amounts)
    mean = math.fsum(amounts) / n
    std = statistics.stdev(amounts) if n > 1 else 0.0
    days = sorted(t.day for t in members)
    gaps = [b - a for a, b in zip(days, days[1:])]
    return GroupAggregates(
        max=max(amounts),
        min=min(amounts),
        count=n,
        mean=mean,
        std=std,
        median=statistics.median(amounts),
        coeff_var=std / mean if mean != 0 else UNDEFINED,
        mean_gap_days=(sum(gaps) / len(gaps)) if gaps else UNDEFINED,
    )


def make_group(account_id: str, text: NormalizedText, members: Sequence[Transaction]) -> TransactionGroup:
    members = _ordered(members)
    return TransactionGroup(
        account_id=account_id,
        normalized_text=text,
        members=members,
        series=build_sparse_series(members),
        aggregates=compute_aggregates(members),
    )


def group(transactions: Iterable[Transaction]) -> list[TransactionGroup]:
    """Partition transactions by (account, rendered normalized text)."""
    buckets: dict[tuple[str, str], tuple[NormalizedText, list[Transaction]]] = {}
    for t in transactions:
        text = normalize(t.description, t.merchant_name)
        key = (t.account_id, text.render())
        if key not in buckets:
            buckets[key] = (text, [])
        buckets[key][1].append(t)
    return [make_group(acct, text, members) for (acct, _), (text, members) in sorted(buckets.items())]


# -- file io ----------------------------------------------------------------


def read_transactions(path: str | Path) -> list[Transaction]:
    """Read a CSV or JSON-lines transaction file (chosen by extension)."""
    path = Path(path)
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
        out = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
                out.append(Transaction.from_record(rec))
        return out
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(TRANSACTION_FIELDS[:5]) <= set(reader.fieldnames):
            raise DataError(f"{path}: header must contain {', '.join(TRANSACTION_FIELDS)}")
        return [Transaction.from_record(rec) for rec in reader]


def write_transactions(transactions: Iterable[Transaction], path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json"):
        with path.open("w", encoding="utf-8") as fh:
            for t in transactions:
                fh.write(json.dumps(t.to_record()) + "\n")
        return
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRANSACTION_FIELDS)
        writer.writeheader()
        for t in transactions:
            rec = t.to_record()
            rec["merchant_name"] = rec["merchant_name"] or ""
            writer.writerow(rec)


def write_groups(groups: Iterable[TransactionGroup], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(json.dumps(g.to_record()) + "\n")


def read_groups(path: str | Path) -> list[TransactionGroup]:
    """Rebuild groups from a file written by ``write_groups``."""
    path = Path(path)
    out = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                members = [Transaction.from_record(m) for m in rec["members"]]
                text = NormalizedText(tuple(rec["text"].split()))
                out.append(make_group(str(rec["account_id"]), text, members))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad group record ({exc})") from exc
    return out


def load_groups(path: str | Path) -> list[TransactionGroup]:
    """Groups from either a groups file or a raw transaction file."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
    if path.suffix.lower() in (".jsonl", ".ndjson", ".json") and '"members"' in first:
        return read_groups(path)
    return group(read_transactions(path))

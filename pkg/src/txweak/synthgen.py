"""Deterministic synthetic transaction corpus with planted category structure.

Every account draws category instances by prevalence. Recurring categories
emit dates with Normal(mean, std) day gaps; the rest scatter a random number
of transactions over the account's history. Ground truth is keyed by the
clean description before any noise is applied.
"""
from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .txprep import Transaction, TransactionGroup

VOWELS = set("aeiou")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    truncation: float = 0.0
    vowel_drop: float = 0.0
    ref_code: float = 0.0
    digit_run: float = 0.0


@dataclass(frozen=True)
class CategorySpec:
    name: str
    prevalence: float
    phrases: tuple[str, ...]
    payees: tuple[str, ...] = ()
    amount_median: float = 50.0
    amount_sigma: float = 0.5
    jitter: tuple[float, float] = (0.0, 0.3)
    sign: int = 1
    gap_mean: float | None = None
    gap_std: float = 0.0
    count: tuple[int, int] = (1, 10)
    instances: tuple[int, int] = (1, 1)
    noise: NoiseSpec = NoiseSpec()

    @property
    def recurring(self) -> bool:
        return self.gap_mean is not None


@dataclass(frozen=True)
class SynthConfig:
    n_accounts: int
    categories: tuple[CategorySpec, ...]
    end_day: int = 19_723  # 2024-01-01
    history_days: tuple[int, int] = (60, 365)
    seed: int = 0

    def validate(self) -> None:
        if self.n_accounts < 0:
            raise SynthConfigError("n_accounts must be >= 0")
        lo, hi = self.history_days
        if not 1 <= lo <= hi:
            raise SynthConfigError("history_days must satisfy 1 <= lo <= hi")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise SynthConfigError("category names must be unique")
        for c in self.categories:
            if not 0.0 < c.prevalence < 1.0:
                raise SynthConfigError(f"{c.name}: prevalence must be in (0, 1)")
            if not c.phrases:
                raise SynthConfigError(f"{c.name}: needs at least one phrase")
            if c.recurring:
                if c.gap_mean <= 0:
                    raise SynthConfigError(f"{c.name}: gap mean must be > 0")
                if lo < c.gap_mean:
                    raise SynthConfigError(
                        f"{c.name}: shortest history {lo} days is shorter than one gap ({c.gap_mean} days)")
            if not 1 <= c.count[0] <= c.count[1] or not 1 <= c.instances[0] <= c.instances[1]:
                raise SynthConfigError(f"{c.name}: count and instances ranges must be positive")


@dataclass
class Corpus:
    transactions: list[Transaction]
    truth: list[dict]                              # account_id, key, categories, transaction_ids
    tx_truth: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def group_labels(self, groups: Sequence[TransactionGroup], category: str) -> np.ndarray:
        """1 where the majority of a group's transactions carry ``category``."""
        out = np.zeros(len(groups), dtype=np.int64)
        for i, g in enumerate(groups):
            hits = sum(category in self.tx_truth.get(t.transaction_id, ()) for t in g.members)
            out[i] = int(2 * hits > len(g.members))
        return out

    def save(self, transactions_path: str | Path, truth_path: str | Path) -> None:
        from .txprep import write_transactions

        write_transactions(self.transactions, transactions_path)
        with Path(truth_path).open("w", encoding="utf-8") as fh:
            for row in self.truth:
                fh.write(json.dumps(row) + "\n")


def load_truth(path: str | Path) -> dict[str, tuple[str, ...]]:
    """Transaction id -> category tuple from a truth JSON-lines file."""
    out: dict[str, tuple[str, ...]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                for tid in row["transaction_ids"]:
                    out[tid] = tuple(row["categories"])
    return out


def _drop_vowels(tok: str) -> str:
    return tok[0] + "".join(ch for ch in tok[1:] if ch not in VOWELS) if len(tok) > 3 else tok


def _noisy_text(clean: str, noise: NoiseSpec, rng: np.random.Generator) -> str:
    toks = clean.split()
    long_idx = [i for i, t in enumerate(toks) if len(t) > 4]
    if long_idx and rng.random() < noise.truncation:
        i = long_idx[rng.integers(len(long_idx))]
        toks[i] = toks[i][: int(rng.integers(3, min(len(toks[i]), 6)))]
    if long_idx and rng.random() < noise.vowel_drop:
        i = long_idx[rng.integers(len(long_idx))]
        toks[i] = _drop_vowels(toks[i])
    return " ".join(toks)


def _decorate(text: str, noise: NoiseSpec, rng: np.random.Generator, day: int) -> str:
    parts = text.upper().split()
    if rng.random() < noise.digit_run:
        pos = int(rng.integers(0, len(parts) + 1))
        token = "#" + str(rng.integers(10, 99999)) if rng.random() < 0.5 else \
            f"{int(rng.integers(1, 13)):02d}/{int(rng.integers(1, 29)):02d}"
        parts.insert(pos, token)
    if rng.random() < noise.ref_code:
        alphabet = np.array(list(string.ascii_uppercase + string.digits))
        code = "".join(rng.choice(alphabet, size=8))
        if not any(c.isdigit() for c in code):
            code = code[:-1] + "7"
        if not any(c.isalpha() for c in code):
            code = "X" + code[1:]
        parts.append(code)
    return " ".join(parts)


def _dates(spec: CategorySpec, start: int, end: int, rng: np.random.Generator) -> list[int]:
    if spec.recurring:
        days = []
        d = start + int(rng.integers(0, max(1, int(spec.gap_mean))))
        while d <= end:
            days.append(d)
            d += max(1, int(round(rng.normal(spec.gap_mean, spec.gap_std))))
        return days or [end]
    n = int(rng.integers(spec.count[0], spec.count[1] + 1))
    return sorted(int(x) for x in rng.integers(start, end + 1, size=n))


def generate(config: SynthConfig) -> Corpus:
    """Seeded and deterministic; each account uses its own derived stream."""
    config.validate()
    txs: list[Transaction] = []
    truth: list[dict] = []
    tx_truth: dict[str, tuple[str, ...]] = {}
    for a in range(config.n_accounts):
        rng = np.random.default_rng([config.seed, a])
        account = f"acct{a:06d}"
        history = int(rng.integers(config.history_days[0], config.history_days[1] + 1))
        start = config.end_day - history
        used: set[str] = set()
        serial = 0
        for spec in config.categories:
            if rng.random() >= spec.prevalence:
                continue
            n_inst = int(rng.integers(spec.instances[0], spec.instances[1] + 1))
            for _ in range(n_inst):
                clean = None
                for _attempt in range(20):
                    phrase = spec.phrases[rng.integers(len(spec.phrases))]
                    payee = spec.payees[rng.integers(len(spec.payees))] if spec.payees else ""
                    cand = " ".join(x for x in (phrase, payee) if x)
                    if cand not in used:
                        clean = cand
                        break
                if clean is None:
                    continue
                used.add(clean)
                noisy = _noisy_text(clean, spec.noise, rng)
                base = spec.amount_median * math.exp(rng.normal(0.0, spec.amount_sigma))
                jitter = float(rng.uniform(*spec.jitter))
                ids = []
                for day in _dates(spec, start, config.end_day, rng):
                    amount = base * math.exp(rng.normal(0.0, jitter)) if jitter > 0 else base
                    cents = max(1, int(round(amount * 100))) * spec.sign
                    tid = f"{account}-{serial:05d}"
                    serial += 1
                    txs.append(Transaction(account, tid, day, cents, _decorate(noisy, spec.noise, rng, day)))
                    tx_truth[tid] = (spec.name,)
                    ids.append(tid)
                truth.append({"account_id": account, "key": clean, "categories": [spec.name],
                              "transaction_ids": ids})
    return Corpus(txs, truth, tx_truth)


def split(groups: Sequence[TransactionGroup], fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Account-disjoint train/validation/test split with a seeded shuffle."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    accounts = sorted({g.account_id for g in groups})
    order = np.random.default_rng(seed).permutation(len(accounts))
    n = len(accounts)
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    fold = {}
    for rank, idx in enumerate(order):
        fold[accounts[idx]] = 0 if rank < n_train else (1 if rank < n_train + n_val else 2)
    out: tuple[list, list, list] = ([], [], [])
    for g in groups:
        out[fold[g.account_id]].append(g)
    return out


# -- planted corpora ------------------------------------------------------------

SURNAMES = (
    "smith", "johnson", "williams", "brown", "jones", "garcia", "miller", "davis", "rodriguez", "martinez",
    "hernandez", "lopez", "gonzalez", "wilson", "anderson", "thomas", "taylor", "moore", "jackson", "martin",
    "lee", "perez", "thompson", "white", "harris", "sanchez", "clark", "ramirez", "lewis", "robinson",
    "walker", "young", "allen", "king", "wright", "scott", "torres", "nguyen", "hill", "flores",
    "green", "adams", "nelson", "baker", "hall", "rivera", "campbell", "mitchell", "carter", "roberts",
)

TRANSFER_PHRASES = ("online transfer to", "zelle payment to", "ach debit", "web pmt", "bill pay",
                    "venmo payment", "mobile transfer")


def benchmark_categories() -> tuple[CategorySpec, ...]:
    """Category roster used by the end-to-end benchmark.

    ``rent`` is the hard task: it shares transfer wording and payee names with
    person-to-person payments and only sometimes says "rent"; its monthly
    rhythm and large steady amounts are what give it away. ``utilities`` is
    the easy, keyword-separable task.
    """
    transfer_noise = NoiseSpec(truncation=0.15, vowel_drop=0.15, ref_code=0.4, digit_run=0.4)
    merchant_noise = NoiseSpec(truncation=0.2, vowel_drop=0.2, ref_code=0.3, digit_run=0.5)
    return (
        CategorySpec("rent", 0.45, TRANSFER_PHRASES + ("rent payment", "apartment rent", "rent pmt"),
                     payees=SURNAMES + ("property mgmt", "apartments llc", "residential"),
                     amount_median=1400.0, amount_sigma=0.35, jitter=(0.0, 0.2),
                     gap_mean=30.4, gap_std=1.5, noise=transfer_noise),
        CategorySpec("p2p", 0.7, TRANSFER_PHRASES, payees=SURNAMES, amount_median=60.0, amount_sigma=0.9,
                     jitter=(0.2, 0.9), count=(1, 12), instances=(1, 3), noise=transfer_noise),
        CategorySpec("utilities", 0.6, ("electric", "water utility", "gas company", "power and light",
                                        "energy services", "city water", "electric coop", "sewer service"),
                     payees=("pacific", "edison", "duke", "national", "metro", "county", "public"),
                     amount_median=110.0, amount_sigma=0.4, jitter=(0.1, 0.3), gap_mean=30.4, gap_std=2.0,
                     instances=(1, 2), noise=merchant_noise),
        CategorySpec("subscription", 0.5, ("netflix", "spotify", "hulu", "fitness club", "cloud storage",
                                           "news digital", "music stream", "video stream"),
                     amount_median=15.0, amount_sigma=0.5, jitter=(0.0, 0.02), gap_mean=30.4, gap_std=1.0,
                     instances=(1, 2), noise=merchant_noise),
        CategorySpec("groceries", 0.9, ("grocery", "supermarket", "fresh market", "food mart", "organic grocer"),
                     payees=("safeway", "kroger", "wholefoods", "aldi", "publix", "wegmans"),
                     amount_median=70.0, amount_sigma=0.5, jitter=(0.3, 0.7), count=(3, 30), instances=(1, 3),
                     noise=merchant_noise),
        CategorySpec("coffee", 0.7, ("coffee", "cafe", "espresso bar", "coffee roasters", "bakery cafe"),
                     payees=("starbucks", "peets", "bluebottle", "dunkin", "local"),
                     amount_median=6.0, amount_sigma=0.4, jitter=(0.2, 0.5), count=(2, 40), instances=(1, 2),
                     noise=merchant_noise),
        CategorySpec("fuel", 0.6, ("gas station", "fuel", "petroleum", "service station"),
                     payees=("shell", "chevron", "exxon", "arco", "valero"),
                     amount_median=45.0, amount_sigma=0.3, jitter=(0.2, 0.5), count=(2, 20), instances=(1, 2),
                     noise=merchant_noise),
        CategorySpec("payroll", 0.8, ("payroll deposit", "direct dep", "salary", "ach credit payroll"),
                     payees=("acme corp", "globex", "initech", "umbrella inc", "stark ind"),
                     amount_median=2200.0, amount_sigma=0.4, jitter=(0.0, 0.05), gap_mean=14.0, gap_std=0.5,
                     sign=-1, noise=merchant_noise),
    )


def benchmark_config(n_accounts: int = 2000, seed: int = 0) -> SynthConfig:
    return SynthConfig(n_accounts=n_accounts, categories=benchmark_categories(), history_days=(45, 365), seed=seed)


def planted_cluster_corpus(clusters: dict[str, Sequence[str]], n_sentences: int, length: int = 6,
                           seed: int = 0) -> list[list[str]]:
    """Sentences drawn from one cluster's vocabulary each; clusters cycle."""
    rng = np.random.default_rng(seed)
    names = sorted(clusters)
    out = []
    for i in range(n_sentences):
        vocab = list(clusters[names[i % len(names)]])
        out.append([vocab[j] for j in rng.integers(0, len(vocab), size=length)])
    return out


PLANTED_CLUSTERS = {
    "housing": ("rent", "rentpay", "rents", "landlord", "apartment", "lease", "tenant", "housing", "aptmgmt", "realty"),
    "food": ("coffee", "cafe", "bakery", "pizza", "burger", "sushi", "taco", "deli", "bistro", "diner"),
    "auto": ("ford", "toyota", "honda", "autoloan", "carpay", "dealer", "motors", "tesla", "nissan", "subaru"),
    "utility": ("electric", "water", "sewer", "energy", "power", "utility", "edison", "gasco", "lightco", "meter"),
    "payroll": ("payroll", "salary", "wages", "paycheck", "dirdep", "employer", "stipend", "bonus", "payout", "earnings"),
}

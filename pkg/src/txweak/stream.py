"""File-backed streaming inference: JSON-lines topics, a per-account watcher
cache, a count-or-age batcher and the loop that emits prediction events."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import DualGRUNet, FeatureScaler, featurize
from .embed import EmbeddingModel
from .txprep import Transaction, TransactionGroup, group

log = logging.getLogger(__name__)

EVENT_KINDS = ("transaction", "account_signup", "prediction")
PREDICTION_FIELDS = ("model_type", "model_version", "transaction_id", "probability")


class StreamError(RuntimeError):
    pass


class StreamReadError(StreamError):
    pass


# -- clocks -------------------------------------------------------------------


class SystemClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        time.sleep(max(0.0, seconds))


class ManualClock:
    """Clock that only moves when told to."""

    def __init__(self, start: float = 0.0):
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def advance(self, seconds: float) -> None:
        self.t += float(seconds)

    def sleep(self, seconds: float) -> None:
        self.advance(max(0.0, seconds))


# -- topics -------------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    topic: str
    offset: int
    kind: str
    timestamp: float
    payload: dict

    def to_line(self) -> str:
        return json.dumps({"offset": self.offset, "kind": self.kind, "timestamp": self.timestamp,
                           "payload": self.payload}, sort_keys=True)


def _check_payload(kind: str, payload: Mapping) -> None:
    if kind not in EVENT_KINDS:
        raise StreamError(f"unknown event kind {kind!r}")
    if kind in ("transaction", "account_signup") and "account_id" not in payload:
        raise StreamError(f"{kind} payload needs account_id")
    if kind == "transaction" and "transaction_id" not in payload:
        raise StreamError("transaction payload needs transaction_id")
    if kind == "prediction":
        missing = [k for k in PREDICTION_FIELDS if k not in payload]
        if missing:
            raise StreamError(f"prediction payload missing {missing}")


class TopicLog:
    """Append-only topics, one JSON-lines file each, offsets dense from 0."""

    def __init__(self, root: str | os.PathLike, clock=None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.clock = clock or SystemClock()
        self._next: dict[str, int] = {}

    def path(self, topic: str) -> Path:
        if not topic or "/" in topic or topic.startswith("."):
            raise StreamError(f"bad topic name {topic!r}")
        return self.root / f"{topic}.jsonl"

    def _end(self, topic: str) -> int:
        if topic not in self._next:
            p = self.path(topic)
            n = 0
            if p.exists():
                with p.open("rb") as fh:
                    n = sum(1 for line in fh if line.strip())
            self._next[topic] = n
        return self._next[topic]

    def append(self, topic: str, kind: str, payload: Mapping, timestamp: float | None = None) -> Event:
        _check_payload(kind, payload)
        ev = Event(topic, self._end(topic), kind,
                   float(self.clock.now() if timestamp is None else timestamp), dict(payload))
        with self.path(topic).open("a", encoding="utf-8") as fh:
            fh.write(ev.to_line() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._next[topic] = ev.offset + 1
        return ev

    def read_from(self, topic: str, offset: int = 0, limit: int | None = None) -> list[Event]:
        p = self.path(topic)
        if not p.exists():
            return []
        out: list[Event] = []
        with p.open(encoding="utf-8") as fh:
            i = 0
            for line in fh:
                if not line.strip():
                    continue
                if i >= offset:
                    try:
                        rec = json.loads(line)
                        ev = Event(topic, int(rec["offset"]), rec["kind"], float(rec["timestamp"]), rec["payload"])
                    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                        raise StreamReadError(f"topic {topic!r}: corrupt record at offset {i}: {exc}") from exc
                    if ev.offset != i:
                        raise StreamReadError(f"topic {topic!r}: record at offset {i} claims offset {ev.offset}")
                    out.append(ev)
                    if limit is not None and len(out) >= limit:
                        break
                i += 1
        return out

    def end_offset(self, topic: str) -> int:
        self._next.pop(topic, None)
        return self._end(topic)


# -- batching -----------------------------------------------------------------


@dataclass(frozen=True)
class BatcherPolicy:
    max_count: int = 100
    max_age: float = 60.0

    def __post_init__(self):
        if self.max_count < 1:
            raise ValueError("max_count must be >= 1")
        if not self.max_age > 0:
            raise ValueError("max_age must be > 0")


def batcher_step(pending: Sequence, policy: BatcherPolicy, now: float):
    """Return ``(batch, remaining)``; ``batch`` is None when neither trigger fired.

    A count trigger emits the oldest ``max_count`` events, an age trigger
    everything pending up to ``max_count``.
    """
    if not pending:
        return None, list(pending)
    ts = _timestamp(pending[0])
    if len(pending) >= policy.max_count or now - ts >= policy.max_age:
        k = min(len(pending), policy.max_count)
        return list(pending[:k]), list(pending[k:])
    return None, list(pending)


def _timestamp(item) -> float:
    return item.event.timestamp if isinstance(item, Pending) else item.timestamp


@dataclass(frozen=True)
class Pending:
    event: Event
    seq: int


# -- watcher ------------------------------------------------------------------


@dataclass(frozen=True)
class ReadinessRule:
    min_transactions: int = 1
    required_kinds: tuple[str, ...] = ("account_signup",)

    def __post_init__(self):
        if self.min_transactions < 1:
            raise ValueError("min_transactions must be >= 1")
        object.__setattr__(self, "required_kinds", tuple(self.required_kinds))

    def satisfied(self, n_transactions: int, kinds: Iterable[str]) -> bool:
        kinds = set(kinds)
        return n_transactions >= self.min_transactions and all(k in kinds for k in self.required_kinds)


@dataclass
class Readiness:
    account_id: str
    ready: bool
    seq: int
    duplicate: bool = False


@dataclass
class _Cached:
    seq: int
    kind: str
    topic: str
    offset: int
    payload: dict


@dataclass
class _Account:
    events: list[_Cached] = field(default_factory=list)
    txn_ids: set = field(default_factory=set)


class Watcher:
    """Per-account event cache, one JSON-lines file per account.

    State is rebuilt from the cache files on construction, so a restarted
    watcher answers exactly as an uninterrupted one.
    """

    watched = ("transaction", "account_signup")

    def __init__(self, cache_dir: str | os.PathLike, rule: ReadinessRule):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.rule = rule
        self.accounts: dict[str, _Account] = {}
        self._seen: set[tuple[str, int]] = set()
        self._seq = 0
        self._rebuild()

    def _file(self, account_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_." else f"%{ord(c):02x}" for c in account_id)
        return self.cache_dir / f"{safe}.jsonl"

    def _rebuild(self) -> None:
        for p in sorted(self.cache_dir.glob("*.jsonl")):
            with p.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn final write was never acknowledged
                        log.warning("skipping torn cache line in %s", p)
                        continue
                    self._remember(_Cached(rec["seq"], rec["kind"], rec["topic"], rec["offset"], rec["payload"]))

    def _remember(self, c: _Cached) -> None:
        acct = self.accounts.setdefault(str(c.payload["account_id"]), _Account())
        acct.events.append(c)
        if c.kind == "transaction":
            acct.txn_ids.add(str(c.payload["transaction_id"]))
        self._seen.add((c.topic, c.offset))
        self._seq = max(self._seq, c.seq + 1)

    def _find(self, ev: Event) -> _Cached | None:
        acct = self.accounts.get(str(ev.payload["account_id"]))
        if acct is None:
            return None
        for c in acct.events:
            if (c.topic, c.offset) == (ev.topic, ev.offset):
                return c
            if ev.kind == "transaction" and c.kind == "transaction" \
                    and str(c.payload["transaction_id"]) == str(ev.payload["transaction_id"]):
                return c
        return None

    def ingest(self, ev: Event) -> Readiness:
        if ev.kind not in self.watched:
            raise StreamError(f"watcher does not handle {ev.kind!r} events")
        account_id = str(ev.payload["account_id"])
        known = None
        if (ev.topic, ev.offset) in self._seen or (
                ev.kind == "transaction" and account_id in self.accounts
                and str(ev.payload["transaction_id"]) in self.accounts[account_id].txn_ids):
            known = self._find(ev)
        if known is not None:
            return Readiness(account_id, self.ready(account_id, known.seq), known.seq, duplicate=True)
        c = _Cached(self._seq, ev.kind, ev.topic, ev.offset, dict(ev.payload))
        line = json.dumps({"seq": c.seq, "kind": c.kind, "topic": c.topic, "offset": c.offset,
                           "payload": c.payload}, sort_keys=True)
        # write before touching memory so a failed write is never acknowledged
        with self._file(account_id).open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._remember(c)
        return Readiness(account_id, self.ready(account_id), c.seq)

    def history(self, account_id: str, upto_seq: int | None = None) -> list[_Cached]:
        acct = self.accounts.get(account_id)
        if acct is None:
            return []
        return [c for c in acct.events if upto_seq is None or c.seq <= upto_seq]

    def ready(self, account_id: str, upto_seq: int | None = None) -> bool:
        hist = self.history(account_id, upto_seq)
        n = sum(1 for c in hist if c.kind == "transaction")
        return self.rule.satisfied(n, (c.kind for c in hist))

    def transactions(self, account_id: str, upto_seq: int | None = None) -> list[Transaction]:
        return [Transaction.from_record(c.payload) for c in self.history(account_id, upto_seq)
                if c.kind == "transaction"]

    def snapshot(self) -> dict:
        """Comparable view of the cached state."""
        return {a: [(c.seq, c.kind, c.topic, c.offset, json.dumps(c.payload, sort_keys=True)) for c in acct.events]
                for a, acct in sorted(self.accounts.items())}


# -- model bundle -------------------------------------------------------------


@dataclass
class ModelBundle:
    """Everything inference needs, loaded from one stored run."""

    embedding: EmbeddingModel
    scaler: FeatureScaler
    net: DualGRUNet
    model_type: str = "dual_gru"
    model_version: str = "0"

    @classmethod
    def from_loaded(cls, loaded, model_type: str = "dual_gru") -> "ModelBundle":
        return cls(EmbeddingModel.from_bytes(loaded["embedding"]), FeatureScaler.from_bytes(loaded["scaler"]),
                   DualGRUNet.from_bytes(loaded["classifier"]), model_type,
                   f"{loaded.record.task}:v{loaded.version}")

    def score_groups(self, groups: Sequence[TransactionGroup]) -> np.ndarray:
        if not groups:
            return np.zeros(0)
        return self.net.predict([featurize(g, self.embedding, self.scaler) for g in groups])

    def score_transactions(self, transactions: Sequence[Transaction]) -> dict[str, float]:
        """Probability per transaction id: the score of the group it falls in."""
        groups = group(transactions)
        scores = self.score_groups(groups)
        return {t.transaction_id: float(s) for g, s in zip(groups, scores) for t in g.members}


def format_probability(p: float) -> str:
    return f"{p:.6f}"


# -- loop ---------------------------------------------------------------------


class InferenceLoop:
    """Single-threaded consumer: watcher, batcher, predictor, emitter.

    Consumer offsets are committed after each processed batch; emitted
    transaction ids are rebuilt from the output topic, so a restart never
    duplicates a prediction.
    """

    def __init__(self, log_: TopicLog, input_topics: Sequence[str], output_topic: str, policy: BatcherPolicy,
                 rule: ReadinessRule, bundle: ModelBundle, state_dir: str | os.PathLike, clock=None):
        self.log = log_
        self.inputs = list(input_topics)
        self.output = output_topic
        self.policy = policy
        self.bundle = bundle
        self.clock = clock or log_.clock
        self.state_dir = Path(state_dir)
        self.watcher = Watcher(self.state_dir / "cache", rule)
        self._offsets_path = self.state_dir / "offsets.json"
        self.committed = self._load_offsets()
        self.read_pos = dict(self.committed)
        self.pending: list[Pending] = []
        self.emitted = {str(e.payload["transaction_id"]) for e in self.log.read_from(self.output)
                        if e.kind == "prediction"}
        self.batches: list[list[Pending]] = []

    def _load_offsets(self) -> dict[str, int]:
        offs = {t: 0 for t in self.inputs}
        if self._offsets_path.exists():
            offs.update({k: int(v) for k, v in json.loads(self._offsets_path.read_text()).items()})
        return offs

    def _commit(self, batch: Sequence[Pending]) -> None:
        for p in batch:
            self.committed[p.event.topic] = max(self.committed.get(p.event.topic, 0), p.event.offset + 1)
        tmp = self._offsets_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.committed, sort_keys=True))
        os.replace(tmp, self._offsets_path)

    def poll(self) -> int:
        """Read new input events into the watcher and the pending queue."""
        fresh: list[Event] = []
        for t in self.inputs:
            evs = self.log.read_from(t, self.read_pos.get(t, 0))
            fresh.extend(e for e in evs if e.kind in Watcher.watched)
            if evs:
                self.read_pos[t] = evs[-1].offset + 1
        # merge topics by ingest time so per-account order follows arrival
        fresh.sort(key=lambda e: (e.timestamp, self.inputs.index(e.topic), e.offset))
        for ev in fresh:
            r = self.watcher.ingest(ev)
            self.pending.append(Pending(ev, r.seq))
        return len(fresh)

    def _process(self, batch: list[Pending]) -> list[Event]:
        upto = max(p.seq for p in batch)
        accounts = list(dict.fromkeys(str(p.event.payload["account_id"]) for p in batch))
        out = []
        for acct in accounts:
            if not self.watcher.ready(acct, upto):
                continue
            txns = self.watcher.transactions(acct, upto)
            todo = [t for t in txns if t.transaction_id not in self.emitted]
            if not todo:
                continue
            probs = self.bundle.score_transactions(txns)
            for t in todo:
                payload = {"model_type": self.bundle.model_type, "model_version": self.bundle.model_version,
                           "transaction_id": t.transaction_id,
                           "probability": format_probability(probs[t.transaction_id])}
                out.append(self.log.append(self.output, "prediction", payload, timestamp=self.clock.now()))
                self.emitted.add(t.transaction_id)
        self._commit(batch)
        self.batches.append(batch)
        return out

    def step(self) -> list[Event]:
        """Poll once and process every batch the policy allows right now."""
        self.poll()
        out = []
        while True:
            batch, self.pending = batcher_step(self.pending, self.policy, self.clock.now())
            if batch is None:
                break
            out.extend(self._process(batch))
        return out

    def drain(self) -> list[Event]:
        """Consume everything available, waiting out the age trigger at the end."""
        out = self.step()
        while self.pending:
            wait = self.policy.max_age - (self.clock.now() - _timestamp(self.pending[0]))
            self.clock.sleep(wait)
            out.extend(self.step())
        return out

    def run_forever(self, poll_interval: float = 1.0, max_iterations: int | None = None) -> None:
        i = 0
        while max_iterations is None or i < max_iterations:
            self.step()
            self.clock.sleep(poll_interval)
            i += 1


def inference_loop(log_: TopicLog, input_topics: Sequence[str], output_topic: str, policy: BatcherPolicy,
                   rule: ReadinessRule, bundle: ModelBundle, state_dir: str | os.PathLike,
                   clock=None) -> list[Event]:
    """Consume all available input and return the prediction events emitted."""
    return InferenceLoop(log_, input_topics, output_topic, policy, rule, bundle, state_dir, clock).drain()


def publish_transactions(log_: TopicLog, topic: str, transactions: Iterable[Transaction],
                         signup_topic: str | None = None, timestamps: Iterable[float] | None = None) -> int:
    """Push transactions (and one signup per new account) onto topics."""
    seen: set[str] = set()
    n = 0
    ts_iter = iter(timestamps) if timestamps is not None else None
    for t in transactions:
        ts = next(ts_iter) if ts_iter is not None else None
        if signup_topic and t.account_id not in seen:
            log_.append(signup_topic, "account_signup", {"account_id": t.account_id}, timestamp=ts)
            seen.add(t.account_id)
            n += 1
        log_.append(topic, "transaction", t.to_record(), timestamp=ts)
        n += 1
    return n

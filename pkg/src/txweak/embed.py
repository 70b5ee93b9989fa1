"""Subword skip-gram embeddings trained on normalized transaction text.

A word's input representation is the mean of its own vector and the vectors
of its character n-grams (with ``<`` and ``>`` boundary markers), so words
never seen during training still get a vector from their n-grams.
"""
from __future__ import annotations

import io
import json
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

MAGIC = b"TXEMB\x00"
FORMAT_VERSION = 1


class EmptyVocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 100
    min_n: int = 3
    max_n: int = 6
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.05
    min_count: int = 5
    bucket_count: int = 200_000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not 1 <= self.min_n <= self.max_n:
            raise ValueError("need 1 <= min_n <= max_n")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        if self.window < 1 or self.epochs < 1 or self.bucket_count < 1 or self.workers < 1:
            raise ValueError("window, epochs, bucket_count and workers must be positive")


def fnv1a(text: str) -> int:
    h = 2166136261
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 16777619) & 0xFFFFFFFF
    return h


def char_ngrams(word: str, min_n: int, max_n: int) -> list[str]:
    """Character n-grams of ``<word>``, excluding the full bracketed word."""
    w = f"<{word}>"
    out = []
    for n in range(min_n, max_n + 1):
        for i in range(len(w) - n + 1):
            g = w[i : i + n]
            if g != w:
                out.append(g)
    return out


def ngram_buckets(word: str, min_n: int, max_n: int, bucket_count: int) -> list[int]:
    return [fnv1a(g) % bucket_count for g in char_ngrams(word, min_n, max_n)]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# -- training kernel ----------------------------------------------------------


@numba.njit(cache=True)
def _xorshift(state):
    x = state[0]
    x ^= (x << np.uint64(13)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    x ^= x >> np.uint64(7)
    x ^= (x << np.uint64(17)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    state[0] = x
    return x


@numba.njit(cache=True, nogil=True)
def _sgns_pass(
    tokens, sent_bounds, sub_ptr, sub_idx, w_in, w_out, neg_table,
    window, negatives, lr0, progress0, total_work, rng, loss_out,
):
    """One pass of skip-gram negative sampling over ``tokens``.

    Input rows ``sub_idx[sub_ptr[w]:sub_ptr[w+1]]`` (word row then n-gram
    rows) are averaged to form the input vector for word ``w``.
    Returns the number of tokens processed.
    """
    dim = w_in.shape[1]
    hidden = np.zeros(dim)
    grad = np.zeros(dim)
    n_neg = neg_table.shape[0]
    done = 0
    loss_sum = 0.0
    loss_n = 0
    n_sent = sent_bounds.shape[0] - 1
    chunk = max(1, total_work // loss_out.shape[0])
    for s in range(n_sent):
        a = sent_bounds[s]
        b = sent_bounds[s + 1]
        for pos in range(a, b):
            frac = (progress0 + done) / total_work
            lr = lr0 * max(1.0 - frac, 1e-4)
            w = tokens[pos]
            r0 = sub_ptr[w]
            r1 = sub_ptr[w + 1]
            nrows = r1 - r0
            hidden[:] = 0.0
            for k in range(r0, r1):
                hidden += w_in[sub_idx[k]]
            hidden /= nrows
            span = 1 + np.int64(_xorshift(rng) % np.uint64(window))
            for cpos in range(max(a, pos - span), min(b, pos + span + 1)):
                if cpos == pos:
                    continue
                grad[:] = 0.0
                for j in range(negatives + 1):
                    if j == 0:
                        target = tokens[cpos]
                        label = 1.0
                    else:
                        target = neg_table[np.int64(_xorshift(rng) % np.uint64(n_neg))]
                        if target == tokens[cpos]:
                            continue
                        label = 0.0
                    score = 0.0
                    for d in range(dim):
                        score += hidden[d] * w_out[target, d]
                    if score > 30.0:
                        score = 30.0
                    elif score < -30.0:
                        score = -30.0
                    p = 1.0 / (1.0 + np.exp(-score))
                    if label == 1.0:
                        loss_sum -= np.log(p + 1e-12)
                    else:
                        loss_sum -= np.log(1.0 - p + 1e-12)
                    g = lr * (label - p)
                    for d in range(dim):
                        grad[d] += g * w_out[target, d]
                        w_out[target, d] += g * hidden[d]
                loss_n += 1
                for k in range(r0, r1):
                    w_in[sub_idx[k]] += grad / nrows
            done += 1
            slot = (progress0 + done) // chunk
            if (progress0 + done) % chunk == 0 and slot - 1 < loss_out.shape[0] and loss_n > 0:
                loss_out[slot - 1] = loss_sum / loss_n
                loss_sum = 0.0
                loss_n = 0
    return done


# -- model --------------------------------------------------------------------


class EmbeddingModel:
    """Trained word and hashed n-gram tables.

    ``word_table`` rows are the composed (word + n-gram mean) vectors used at
    query time. ``ngram_table`` maps a hashed bucket id to its vector and only
    holds buckets reached by some vocabulary word.
    """

    def __init__(self, words: Sequence[str], word_vectors: np.ndarray, ngram_ids: np.ndarray,
                 ngram_vectors: np.ndarray, config: EmbeddingConfig, loss_history=()):
        self.words = list(words)
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.word_vectors = np.asarray(word_vectors, dtype=np.float32)
        self.ngram_ids = np.asarray(ngram_ids, dtype=np.int64)
        self.ngram_vectors = np.asarray(ngram_vectors, dtype=np.float32)
        self._ngram_row = {int(b): i for i, b in enumerate(self.ngram_ids)}
        self.config = config
        self.loss_history = list(loss_history)
        norms = np.linalg.norm(self.word_vectors.astype(np.float64), axis=1)
        self._unit = self.word_vectors / np.where(norms == 0, 1.0, norms)[:, None]
        self._unit[norms == 0] = 0.0

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def word_table(self) -> dict[str, np.ndarray]:
        return {w: self.word_vectors[i] for i, w in enumerate(self.words)}

    @property
    def ngram_table(self) -> dict[int, np.ndarray]:
        return {int(b): self.ngram_vectors[i] for i, b in enumerate(self.ngram_ids)}

    def __contains__(self, word: str) -> bool:
        return word in self.word_index

    def vector(self, word: str) -> np.ndarray:
        i = self.word_index.get(word)
        if i is not None:
            return self.word_vectors[i].copy()
        cfg = self.config
        rows = [self._ngram_row[b] for b in ngram_buckets(word, cfg.min_n, cfg.max_n, cfg.bucket_count)
                if b in self._ngram_row]
        if not rows:
            return np.zeros(cfg.dim, dtype=np.float32)
        return self.ngram_vectors[rows].astype(np.float64).mean(axis=0).astype(np.float32)

    def vectors(self, tokens: Iterable[str]) -> np.ndarray:
        toks = list(tokens)
        if not toks:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.vector(t) for t in toks])

    def nearest_neighbors(self, word: str, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = self.vector(word).astype(np.float64)
        qn = np.linalg.norm(q)
        if qn == 0:
            sims = np.zeros(len(self.words))
        else:
            sims = np.clip(self._unit.astype(np.float64) @ (q / qn), -1.0, 1.0)
        ranked = sorted(
            ((float(s), w) for w, s in zip(self.words, sims) if w != word),
            key=lambda sw: (-sw[0], sw[1]),
        )
        return [(w, s) for s, w in ranked[:k]]

    def max_word_similarity(self, sentence: Iterable[str], anchor_vector: np.ndarray) -> float:
        best = -1.0
        for tok in sentence:
            best = max(best, cosine(self.vector(tok), anchor_vector))
        return best

    def similarities(self, anchor_vector: np.ndarray) -> np.ndarray:
        a = np.asarray(anchor_vector, dtype=np.float64)
        an = np.linalg.norm(a)
        if an == 0:
            return np.zeros(len(self.words))
        return np.clip(self._unit.astype(np.float64) @ (a / an), -1.0, 1.0)

    # -- serialization --

    def to_bytes(self) -> bytes:
        header = json.dumps({"config": asdict(self.config), "words": self.words,
                             "loss_history": self.loss_history}).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        buf.write(header)
        buf.write(struct.pack("<II", len(self.words), len(self.ngram_ids)))
        buf.write(self.word_vectors.astype("<f4").tobytes())
        buf.write(self.ngram_ids.astype("<i8").tobytes())
        buf.write(self.ngram_vectors.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingModel":
        if data[: len(MAGIC)] != MAGIC:
            raise ValueError("not an embedding model file")
        off = len(MAGIC)
        version, hlen = struct.unpack_from("<II", data, off)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported embedding format version {version}")
        off += 8
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        n_words, n_ngrams = struct.unpack_from("<II", data, off)
        off += 8
        cfg = EmbeddingConfig(**header["config"])
        dim = cfg.dim
        wv = np.frombuffer(data, dtype="<f4", count=n_words * dim, offset=off).reshape(n_words, dim)
        off += wv.nbytes
        ids = np.frombuffer(data, dtype="<i8", count=n_ngrams, offset=off)
        off += ids.nbytes
        nv = np.frombuffer(data, dtype="<f4", count=n_ngrams * dim, offset=off).reshape(n_ngrams, dim)
        return cls(header["words"], wv.copy(), ids.copy(), nv.copy(), cfg, header.get("loss_history", ()))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingModel":
        return cls.from_bytes(Path(path).read_bytes())

    def export_text(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(f"{len(self.words)} {self.dim}\n")
            for w, v in zip(self.words, self.word_vectors):
                fh.write(w + " " + " ".join(f"{x:.6f}" for x in v) + "\n")


def train_embedding(corpus: Iterable[Sequence[str]], config: EmbeddingConfig | None = None) -> EmbeddingModel:
    """Train skip-gram with negative sampling on tokenized sentences.

    With ``config.workers == 1`` training is bitwise reproducible for a given
    seed. More workers share the tables without locking.
    """
    cfg = config or EmbeddingConfig()
    sentences = [[str(t) for t in s] for s in corpus]
    counts: dict[str, int] = {}
    for s in sentences:
        for t in s:
            counts[t] = counts.get(t, 0) + 1
    words = sorted((w for w, c in counts.items() if c >= cfg.min_count), key=lambda w: (-counts[w], w))
    if not words:
        raise EmptyVocabularyError(f"no word occurs at least min_count={cfg.min_count} times")
    index = {w: i for i, w in enumerate(words)}
    nv = len(words)

    # input rows: [0, nv) are word rows, then one row per distinct bucket used
    bucket_row: dict[int, int] = {}
    sub_ptr = np.zeros(nv + 1, dtype=np.int64)
    sub_list: list[int] = []
    for i, w in enumerate(words):
        sub_list.append(i)
        for b in ngram_buckets(w, cfg.min_n, cfg.max_n, cfg.bucket_count):
            if b not in bucket_row:
                bucket_row[b] = nv + len(bucket_row)
            sub_list.append(bucket_row[b])
        sub_ptr[i + 1] = len(sub_list)
    sub_idx = np.asarray(sub_list, dtype=np.int64)

    rng = np.random.default_rng(cfg.seed)
    n_rows = nv + len(bucket_row)
    w_in = rng.uniform(-1.0 / cfg.dim, 1.0 / cfg.dim, size=(n_rows, cfg.dim))
    w_out = np.zeros((nv, cfg.dim))

    freq = np.array([counts[w] for w in words], dtype=np.float64) ** 0.75
    table_size = max(1000, min(10_000_000, 100 * nv))
    neg_table = np.repeat(np.arange(nv), np.maximum(1, np.round(freq / freq.sum() * table_size)).astype(np.int64))

    ids = [[index[t] for t in s if t in index] for s in sentences]
    ids = [s for s in ids if len(s) > 1]
    tokens = np.asarray([t for s in ids for t in s], dtype=np.int64)
    bounds = np.zeros(len(ids) + 1, dtype=np.int64)
    if ids:
        bounds[1:] = np.cumsum([len(s) for s in ids])
    per_epoch = int(tokens.shape[0])
    total = max(1, per_epoch * cfg.epochs)
    history = np.full(10 * cfg.epochs, np.nan)

    if per_epoch:
        for epoch in range(cfg.epochs):
            if cfg.workers == 1:
                state = np.array([np.uint64(cfg.seed * 1_000_003 + epoch + 1) | np.uint64(1)], dtype=np.uint64)
                _sgns_pass(tokens, bounds, sub_ptr, sub_idx, w_in, w_out, neg_table, cfg.window,
                           cfg.negatives, cfg.learning_rate, epoch * per_epoch, total, state, history)
            else:
                _parallel_pass(cfg, epoch, per_epoch, total, tokens, bounds, sub_ptr, sub_idx,
                               w_in, w_out, neg_table, history)

    composed = np.empty((nv, cfg.dim))
    for i in range(nv):
        composed[i] = w_in[sub_idx[sub_ptr[i] : sub_ptr[i + 1]]].mean(axis=0)
    order = sorted(bucket_row, key=bucket_row.get)
    ngram_ids = np.asarray(order, dtype=np.int64)
    ngram_vectors = w_in[[bucket_row[b] for b in order]] if order else np.zeros((0, cfg.dim))
    losses = [float(x) for x in history if not np.isnan(x)]
    return EmbeddingModel(words, composed, ngram_ids, ngram_vectors, cfg, losses)


def _parallel_pass(cfg, epoch, per_epoch, total, tokens, bounds, sub_ptr, sub_idx, w_in, w_out, neg_table, history):
    n_sent = bounds.shape[0] - 1
    cuts = np.linspace(0, n_sent, cfg.workers + 1).astype(np.int64)
    threads = []
    for k in range(cfg.workers):
        lo, hi = cuts[k], cuts[k + 1]
        if hi <= lo:
            continue
        sub_bounds = bounds[lo : hi + 1] - bounds[lo]
        sub_tokens = tokens[bounds[lo] : bounds[hi]]
        state = np.array([np.uint64(cfg.seed * 1_000_003 + epoch * 7919 + k + 1) | np.uint64(1)], dtype=np.uint64)
        scratch = np.full(history.shape[0], np.nan)
        args = (sub_tokens, sub_bounds, sub_ptr, sub_idx, w_in, w_out, neg_table, cfg.window,
                cfg.negatives, cfg.learning_rate, epoch * per_epoch + int(bounds[lo]), total, state, scratch)
        threads.append(threading.Thread(target=_sgns_pass, args=args))
    for t in threads:
        t.start()
    for t in threads:
        t.join()


class SubwordEmbedding(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` on tokenized sentences, ``transform`` to
    per-sentence lists of word vectors."""

    def __init__(self, dim=100, min_n=3, max_n=6, window=5, negatives=5, epochs=5,
                 learning_rate=0.05, min_count=5, bucket_count=200_000, seed=0, workers=1):
        self.dim = dim
        self.min_n = min_n
        self.max_n = max_n
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.min_count = min_count
        self.bucket_count = bucket_count
        self.seed = seed
        self.workers = workers

    def fit(self, X, y=None):
        self.model_ = train_embedding(X, EmbeddingConfig(**self.get_params()))
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "model_")
        return [self.model_.vectors(s) for s in X]

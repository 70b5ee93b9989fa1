"""Dual-branch (spending pattern + text) GRU classifier trained on weak labels.

Pipeline: drop groups no LF voted on, round posteriors to hard targets,
undersample the majority class to 1:1, featurize, train with early stopping
on validation balanced accuracy, and optionally pick the rank-k of n seeded
runs.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .embed import EmbeddingModel
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import GRU, MLP, PackedLayout, load_params, save_params
from .nn.optim import make_optimizer
from .txprep import TransactionGroup

log = logging.getLogger(__name__)


class UnsatisfiableBalanceError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class EvaluationError(ValueError):
    pass


@dataclass
class ClassifierConfig:
    ts_hidden: int = 32
    text_hidden: int = 64
    gru_layers: int = 1
    mlp_hidden: tuple[int, ...] = (64, 32)
    dropout: float = 0.2
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.01
    momentum: float = 0.0
    max_epochs: int = 30
    patience: int | None = 5
    batch_size: int = 128
    seed: int = 0
    embedding_finetune: bool = False
    rounding_threshold: float = 0.5

    def __post_init__(self):
        self.mlp_hidden = tuple(int(h) for h in self.mlp_hidden)
        sizes = [self.ts_hidden, self.text_hidden, self.gru_layers, self.batch_size, self.max_epochs, *self.mlp_hidden]
        if any(s < 1 for s in sizes):
            raise ValueError("classifier sizes must be positive")
        if self.patience is not None and not 0 <= self.patience <= self.max_epochs:
            raise ValueError("need 0 <= patience <= max_epochs")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def optimizer_hyper(self) -> dict:
        if self.optimizer.lower() == "sgd":
            return {"lr": self.lr, "momentum": self.momentum}
        return {"lr": self.lr, "weight_decay": self.weight_decay}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# -- features -----------------------------------------------------------------


def log_compress(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.log1p(np.abs(x))


class FeatureScaler(BaseEstimator, TransformerMixin):
    """Standardizes log-compressed amounts and day gaps of sparse series.

    The fitted means and deviations are the state stored with a run, so
    inference reuses them exactly.
    """

    def fit(self, groups: Sequence[TransactionGroup], y=None):
        if not groups:
            raise ValueError("FeatureScaler.fit needs at least one group")
        amounts = np.concatenate([np.asarray(g.series.amounts, dtype=np.float64) for g in groups])
        gaps = np.concatenate([np.asarray(g.series.delta_days, dtype=np.float64) for g in groups])
        la, lg = log_compress(amounts), np.log1p(gaps)
        self.mean_ = np.array([la.mean(), lg.mean()])
        std = np.array([la.std(), lg.std()])
        self.scale_ = np.where(std > 0, std, 1.0)
        return self

    def _check(self):
        if not hasattr(self, "mean_"):
            raise NotFittedError("FeatureScaler must be fitted before transform")

    def transform_series(self, group: TransactionGroup) -> np.ndarray:
        self._check()
        a = log_compress(np.asarray(group.series.amounts, dtype=np.float64))
        d = np.log1p(np.asarray(group.series.delta_days, dtype=np.float64))
        return (np.column_stack([a, d]) - self.mean_) / self.scale_

    def transform(self, groups):
        return [self.transform_series(g) for g in groups]

    def to_bytes(self) -> bytes:
        self._check()
        return b"TXSC" + struct.pack("<4d", *self.mean_, *self.scale_)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureScaler":
        if data[:4] != b"TXSC":
            raise ValueError("not a scaler artifact")
        vals = struct.unpack("<4d", data[4:36])
        sc = cls()
        sc.mean_ = np.array(vals[:2])
        sc.scale_ = np.array(vals[2:])
        return sc


def text_features(tokens: Sequence[str], model: EmbeddingModel) -> np.ndarray:
    """Word vectors of a group's tokens; an empty text becomes one zero row."""
    if not tokens:
        return np.zeros((1, model.dim))
    return model.vectors(tokens).astype(np.float64)


@dataclass
class TrainingExample:
    group_id: str
    text_vectors: np.ndarray
    ts_sequence: np.ndarray
    weak_target: int = 0
    weak_probability: float = float("nan")
    tokens: tuple[str, ...] = ()


def featurize(group: TransactionGroup, model: EmbeddingModel, scaler: FeatureScaler,
              weak_probability: float = float("nan"), threshold: float = 0.5) -> TrainingExample:
    target = int(weak_probability >= threshold) if not math.isnan(weak_probability) else 0
    return TrainingExample(
        group_id=group.group_id,
        text_vectors=text_features(group.normalized_text.tokens, model),
        ts_sequence=scaler.transform_series(group),
        weak_target=target,
        weak_probability=weak_probability,
        tokens=tuple(group.normalized_text.tokens),
    )


def undersample_indices(targets: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pos = np.flatnonzero(targets == 1)
    neg = np.flatnonzero(targets == 0)
    if pos.size == 0 or neg.size == 0:
        raise UnsatisfiableBalanceError(
            f"need both classes after rounding, got {pos.size} positive and {neg.size} negative")
    k = min(pos.size, neg.size)
    if pos.size > k:
        pos = np.sort(rng.choice(pos, size=k, replace=False))
    if neg.size > k:
        neg = np.sort(rng.choice(neg, size=k, replace=False))
    return np.sort(np.concatenate([pos, neg]))


def build_training_set(groups: Sequence[TransactionGroup], weak_labels: Sequence[float],
                       abstain_mask: Sequence[bool], model: EmbeddingModel, scaler: FeatureScaler,
                       config: ClassifierConfig | None = None, seed: int | None = None) -> list[TrainingExample]:
    """Filter all-abstain groups, round weak labels, undersample 1:1, featurize."""
    cfg = config or ClassifierConfig()
    probs = np.asarray(weak_labels, dtype=np.float64)
    mask = np.asarray(abstain_mask, dtype=bool)
    if not (len(groups) == probs.shape[0] == mask.shape[0]):
        raise ValueError("groups, weak_labels and abstain_mask must align")
    keep = np.flatnonzero(~mask)
    targets = (probs[keep] >= cfg.rounding_threshold).astype(np.int64)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    chosen = keep[undersample_indices(targets, rng)]
    return [featurize(groups[i], model, scaler, float(probs[i]), cfg.rounding_threshold) for i in chosen]


# -- network ------------------------------------------------------------------


class DualGRUNet:
    """Spending-pattern GRU and text GRU, concatenated into an MLP + sigmoid."""

    def __init__(self, config: ClassifierConfig, text_dim: int, vocab: Sequence[str] = (),
                 init_table: np.ndarray | None = None, zero_output: bool = False):
        self.config = config
        self.text_dim = text_dim
        rng = np.random.default_rng(config.seed)
        self.ts_gru = GRU(2, config.ts_hidden, config.gru_layers, True, rng, prefix="ts.")
        self.text_gru = GRU(text_dim, config.text_hidden, config.gru_layers, True, rng, prefix="text.")
        width = self.ts_gru.output_size + self.text_gru.output_size
        self.mlp = MLP([width, *config.mlp_hidden, 1], rng, prefix="mlp.", zero_last=zero_output)
        self.vocab = list(vocab) if config.embedding_finetune else []
        self.vocab_index = {w: i for i, w in enumerate(self.vocab)}
        self.table = None
        if config.embedding_finetune:
            table = np.zeros((len(self.vocab), text_dim)) if init_table is None else np.asarray(init_table)
            self.table = Tensor(table.astype(np.float64), requires_grad=True, name="text.table")

    def parameters(self) -> list[Tensor]:
        ps = self.ts_gru.parameters() + self.text_gru.parameters() + self.mlp.parameters()
        if self.table is not None:
            ps.append(self.table)
        return ps

    def _text_input(self, batch: Sequence[TrainingExample], layout: PackedLayout) -> Tensor:
        packed = layout.pack([ex.text_vectors for ex in batch])
        if self.table is None:
            return Tensor(packed)
        # fine-tuned rows come from the table, unseen tokens stay frozen
        n_vocab = len(self.vocab)
        ids = np.empty(layout.n_rows, dtype=np.int64)
        extra_rows = []
        for i, ex in enumerate(batch):
            rows = layout.index[layout.starts[i] : layout.starts[i] + layout.lengths[i]]
            toks = ex.tokens if ex.tokens else ("",)
            for r, tok, vec in zip(rows, toks, ex.text_vectors):
                j = self.vocab_index.get(tok)
                if j is None:
                    ids[r] = n_vocab + len(extra_rows)
                    extra_rows.append(vec)
                else:
                    ids[r] = j
        source = self.table
        if extra_rows:
            source = ag.concat([self.table, Tensor(np.stack(extra_rows))], axis=0)
        return ag.take_rows(source, ids)

    def forward(self, batch: Sequence[TrainingExample], training: bool = False, rng=None) -> Tensor:
        ts_layout = PackedLayout.build([len(ex.ts_sequence) for ex in batch])
        _, ts_final = self.ts_gru.forward(Tensor(ts_layout.pack([ex.ts_sequence for ex in batch])), ts_layout)
        tx_layout = PackedLayout.build([len(ex.text_vectors) for ex in batch])
        _, tx_final = self.text_gru.forward(self._text_input(batch, tx_layout), tx_layout)
        joint = ag.concat([ts_final, tx_final], axis=1)
        joint = ag.dropout(joint, self.config.dropout, rng, training)
        return ag.sigmoid(self.mlp(joint, self.config.dropout, rng, training))

    def predict(self, batch: Sequence[TrainingExample], batch_size: int = 512) -> np.ndarray:
        out = []
        with ag.no_grad():
            for s in range(0, len(batch), batch_size):
                out.append(self.forward(batch[s : s + batch_size]).data[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}: {state[p.name].shape} vs {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def to_bytes(self) -> bytes:
        extra = {"config": self.config.to_dict(), "text_dim": self.text_dim, "vocab": self.vocab}
        return save_params(self.parameters(), extra)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DualGRUNet":
        state, extra = load_params(blob)
        cfg = ClassifierConfig.from_dict(extra["config"])
        net = cls(cfg, int(extra["text_dim"]), extra.get("vocab", ()))
        net.load_state(state)
        return net


ClassifierParams = DualGRUNet


def predict(params: DualGRUNet, examples: Sequence[TrainingExample]) -> np.ndarray:
    if params is None:
        raise NotFittedError("no classifier parameters loaded")
    return params.predict(list(examples))


# -- evaluation ---------------------------------------------------------------

DEFAULT_GRID = tuple(round(x, 2) for x in np.arange(0.05, 1.0, 0.05)) + (0.9,)


@dataclass
class EvalReport:
    threshold: float
    balanced_accuracy: float
    recall: float
    specificity: float
    tp: int
    fn: int
    tn: int
    fp: int
    sweep: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [
            f"threshold          {self.threshold:.2f}",
            f"balanced_accuracy  {self.balanced_accuracy:.4f}",
            f"recall             {self.recall:.4f}",
            f"specificity        {self.specificity:.4f}",
            f"tp {self.tp}  fn {self.fn}  tn {self.tn}  fp {self.fp}",
            "",
            f"{'threshold':>9}  {'bal_acc':>8}  {'recall':>8}  {'specif':>8}",
        ]
        for row in self.sweep:
            lines.append(f"{row['threshold']:>9.2f}  {row['balanced_accuracy']:>8.4f}  "
                         f"{row['recall']:>8.4f}  {row['specificity']:>8.4f}")
        return "\n".join(lines)


def _confusion(scores: np.ndarray, gold: np.ndarray, threshold: float):
    pred = scores >= threshold
    tp = int((pred & gold).sum())
    fn = int((~pred & gold).sum())
    tn = int((~pred & ~gold).sum())
    fp = int((pred & ~gold).sum())
    return tp, fn, tn, fp


def balanced_accuracy(scores, gold, threshold: float = 0.5) -> float:
    return evaluate(scores, gold, threshold, grid=()).balanced_accuracy


def evaluate(scores, gold, threshold: float = 0.5, grid: Sequence[float] | None = None) -> EvalReport:
    """Balanced accuracy ``(TP/P + TN/N) / 2`` and recall at ``threshold``."""
    s = np.asarray(scores, dtype=np.float64)
    g = np.asarray(gold)
    g = (g == 1) | (g == True)  # noqa: E712
    if s.shape != g.shape:
        raise EvaluationError("scores and gold labels must align")
    P, N = int(g.sum()), int((~g).sum())
    if P == 0 or N == 0:
        raise EvaluationError(f"gold labels need both classes, got {P} positive and {N} negative")

    def row(t):
        tp, fn, tn, fp = _confusion(s, g, t)
        rec, spec = tp / P, tn / N
        return tp, fn, tn, fp, rec, spec, (rec + spec) / 2

    tp, fn, tn, fp, rec, spec, ba = row(threshold)
    grid = DEFAULT_GRID if grid is None else grid
    sweep = []
    for t in sorted(set(float(x) for x in grid)):
        *_, r, sp, b = row(t)
        sweep.append({"threshold": t, "balanced_accuracy": b, "recall": r, "specificity": sp})
    return EvalReport(threshold, ba, rec, spec, tp, fn, tn, fp, sweep)


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    params: DualGRUNet
    history: list[dict]
    best_epoch: int
    best_val_balanced_accuracy: float


def _val_score(net, val_examples, val_labels) -> float:
    scores = net.predict(val_examples)
    return evaluate(scores, val_labels, 0.5, grid=()).balanced_accuracy


def train(examples: Sequence[TrainingExample], val_examples: Sequence[TrainingExample],
          val_labels: Sequence[int] | None, config: ClassifierConfig | None = None,
          model: EmbeddingModel | None = None) -> TrainResult:
    """Minibatch BCE on rounded weak targets with early stopping.

    ``val_labels`` are gold labels; ``None`` falls back to the validation
    examples' own weak targets (with a warning).
    """
    cfg = config or ClassifierConfig()
    examples = list(examples)
    val_examples = list(val_examples)
    if not examples or not val_examples:
        raise ValueError("train needs non-empty training and validation sets")
    if val_labels is None:
        log.warning("no gold validation labels; selecting on held-out weak labels")
        val_labels = [ex.weak_target for ex in val_examples]
    text_dim = examples[0].text_vectors.shape[1]
    vocab, table = (), None
    if cfg.embedding_finetune:
        vocab = sorted({t for ex in examples for t in ex.tokens})
        if model is not None:
            table = model.vectors(vocab).astype(np.float64)
        else:
            lookup = {}
            for ex in examples:
                for t, v in zip(ex.tokens, ex.text_vectors):
                    lookup.setdefault(t, v)
            table = np.stack([lookup[t] for t in vocab])
    net = DualGRUNet(cfg, text_dim, vocab, table)
    params = net.parameters()
    opt = make_optimizer(cfg.optimizer, params, **cfg.optimizer_hyper())
    rng = np.random.default_rng(cfg.seed + 1)
    targets = np.array([ex.weak_target for ex in examples], dtype=np.float64)

    history: list[dict] = []
    best_state, best_score, best_epoch, since_best = net.state(), -math.inf, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(examples))
        losses = []
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            opt.zero_grad()
            probs = net.forward([examples[i] for i in idx], training=True, rng=rng)
            loss = ag.bce(probs, targets[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {s}")
            ag.backward(loss)
            opt.step()
            losses.append(float(loss.data) * len(idx))
        train_loss = sum(losses) / len(examples)
        val_ba = _val_score(net, val_examples, val_labels)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_balanced_accuracy": val_ba})
        # ties move the snapshot forward but do not reset patience
        since_best = 0 if val_ba > best_score else since_best + 1
        if val_ba >= best_score:
            best_state, best_score, best_epoch = net.state(), val_ba, epoch
        if cfg.patience is not None and since_best >= cfg.patience:
            break
    net.load_state(best_state)
    return TrainResult(net, history, best_epoch, best_score)


class DualGRUClassifier(BaseEstimator, ClassifierMixin):
    """Estimator front end over :func:`train` / :func:`predict`.

    ``X`` is a list of :class:`TrainingExample`; ``y`` the rounded weak targets.
    """

    def __init__(self, ts_hidden=32, text_hidden=64, gru_layers=1, mlp_hidden=(64, 32), dropout=0.2,
                 optimizer="adamw", lr=1e-3, weight_decay=0.01, max_epochs=30, patience=5,
                 batch_size=128, seed=0):
        self.ts_hidden = ts_hidden
        self.text_hidden = text_hidden
        self.gru_layers = gru_layers
        self.mlp_hidden = mlp_hidden
        self.dropout = dropout
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y=None, X_val=None, y_val=None):
        X = [copy.copy(ex) for ex in X]
        if y is not None:
            for ex, t in zip(X, y):
                ex.weak_target = int(t)
        cfg = ClassifierConfig(**self.get_params())
        result = train(X, X_val if X_val is not None else X, y_val if X_val is not None else None, cfg)
        self.net_, self.history_ = result.params, result.history
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        if not hasattr(self, "net_"):
            raise NotFittedError("DualGRUClassifier is not fitted")
        p = self.net_.predict(list(X))
        return np.column_stack([1 - p, p])

    def predict(self, X, threshold=0.5):
        return (self.predict_proba(X)[:, 1] >= threshold).astype(int)


# -- multi-run selection ------------------------------------------------------


@dataclass
class RunOutcome:
    seed: int
    ok: bool
    val_balanced_accuracy: float = float("nan")
    result: TrainResult | None = None
    error: str = ""
    run_id: str | None = None


def rank_runs(outcomes: Sequence[RunOutcome], rank: int) -> RunOutcome:
    ok = [o for o in outcomes if o.ok]
    if not 1 <= rank:
        raise ValueError("rank must be >= 1")
    if len(ok) < rank:
        raise RuntimeError(f"only {len(ok)} runs succeeded, cannot select rank {rank}")
    ok.sort(key=lambda o: (-o.val_balanced_accuracy, o.seed))
    return ok[rank - 1]


def multi_run_select(examples, val_examples, val_labels, config: ClassifierConfig, runs: int = 50, rank: int = 10,
                     on_run: Callable[[RunOutcome], None] | None = None, n_jobs: int = 1,
                     model: EmbeddingModel | None = None) -> tuple[RunOutcome, list[RunOutcome]]:
    """Train ``runs`` seeds (``config.seed + i``) and return the rank-``rank`` one.

    Ranking is by validation balanced accuracy, descending, ties by seed.
    Failed runs are recorded and excluded.
    """
    if not 1 <= rank <= runs:
        raise ValueError("need 1 <= rank <= runs")
    seeds = [config.seed + i for i in range(runs)]

    def one(seed):
        cfg = dataclasses.replace(config, seed=seed)
        try:
            res = train(examples, val_examples, val_labels, cfg, model)
            return RunOutcome(seed, True, res.best_val_balanced_accuracy, res)
        except (TrainingDivergedError, FloatingPointError, ValueError) as exc:
            return RunOutcome(seed, False, error=str(exc))

    if n_jobs == 1:
        outcomes = [one(s) for s in seeds]
    else:
        from joblib import Parallel, delayed

        outcomes = Parallel(n_jobs=n_jobs)(delayed(one)(s) for s in seeds)
    for o in outcomes:
        if on_run is not None:
            on_run(o)
    return rank_runs(outcomes, rank), outcomes


def config_json(cfg: ClassifierConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)

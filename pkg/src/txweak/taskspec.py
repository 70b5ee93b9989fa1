"""Task configuration files and the training pipeline they drive."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .classifier import (ClassifierConfig, FeatureScaler, build_training_set, evaluate, featurize,
                         multi_run_select)
from .embed import EmbeddingConfig, EmbeddingModel, train_embedding
from .labelmodel import fit_em, fit_moments, predict_labels
from .runstore import RunStore, code_version
from .synthgen import Corpus, load_truth, split
from .txprep import TransactionGroup, load_groups
from .weaksup import LabelMatrix, apply_lfs, load_lfs

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TaskSpec:
    name: str
    data: Path
    lf_config: Path
    class_balance: float
    category: str = ""
    truth: Path | None = None
    embedding_path: Path | None = None
    label_model: str = "moments"
    embedding: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    runs: int = 1
    rank: int = 1
    store: Path | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.category = self.category or self.name
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError("class_balance must be in (0, 1)")
        if self.label_model not in ("moments", "em"):
            raise ConfigError(f"label_model must be 'moments' or 'em', got {self.label_model!r}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split must be three non-negative fractions summing to 1")
        if not 1 <= self.rank <= self.runs:
            raise ConfigError("need 1 <= rank <= runs")

    @classmethod
    def from_dict(cls, doc: Mapping, base: Path = Path(".")) -> "TaskSpec":
        if not isinstance(doc, Mapping):
            raise ConfigError("task config must be a mapping")

        def path(key, value, required=True):
            if value is None:
                if required:
                    raise ConfigError(f"task config needs {key!r}")
                return None
            p = Path(value)
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ConfigError(f"{key}: {p} does not exist")
            return p

        try:
            data = doc.get("data", {})
            if not isinstance(data, Mapping):
                raise ConfigError("'data' must be a mapping")
            selection = doc.get("selection", {})
            store = doc.get("store")
            return cls(
                name=str(doc["task"]),
                data=path("data.transactions", data.get("transactions") or data.get("groups")),
                truth=path("data.truth", data.get("truth"), required=False),
                embedding_path=path("data.embedding", data.get("embedding"), required=False),
                lf_config=path("lf_config", doc.get("lf_config")),
                class_balance=float(doc["class_balance"]),
                category=str(doc.get("category", "")),
                label_model=str(doc.get("label_model", "moments")),
                embedding=dict(doc.get("embedding", {})),
                classifier=dict(doc.get("classifier", {})),
                split=tuple(float(x) for x in doc.get("split", (0.7, 0.15, 0.15))),
                seed=int(doc.get("seed", 0)),
                runs=int(selection.get("runs", 1)),
                rank=int(selection.get("rank", 1)),
                store=(Path(store) if Path(store).is_absolute() else base / store) if store else None,
                raw=dict(doc),
            )
        except KeyError as exc:
            raise ConfigError(f"task config missing {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad task config value: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "TaskSpec":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(doc, path.parent)

    def embedding_config(self, deterministic: bool = False) -> EmbeddingConfig:
        try:
            cfg = EmbeddingConfig(**{"seed": self.seed, **self.embedding})
        except TypeError as exc:
            raise ConfigError(f"embedding: {exc}") from None
        return dataclasses.replace(cfg, workers=1) if deterministic else cfg

    def classifier_config(self) -> ClassifierConfig:
        unknown = set(self.classifier) - set(ClassifierConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"classifier: unknown keys {sorted(unknown)}")
        try:
            return ClassifierConfig.from_dict({"seed": self.seed, **self.classifier})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"classifier: {exc}") from None


def embedding_corpus(groups: Sequence[TransactionGroup]) -> list[tuple[str, ...]]:
    """One sentence per transaction, so frequent merchants weigh more."""
    return [g.normalized_text.tokens for g in groups for _ in g.members]


def gold_labels(groups: Sequence[TransactionGroup], truth_path: Path | None, category: str) -> np.ndarray | None:
    if truth_path is None:
        return None
    return Corpus([], [], load_truth(truth_path)).group_labels(groups, category)


def fit_label_model(matrix: LabelMatrix, spec: TaskSpec):
    if spec.label_model == "em":
        return fit_em(matrix, spec.class_balance)
    return fit_moments(matrix, spec.class_balance)


@dataclass
class Prepared:
    """Everything upstream of the classifier, computed once per task."""

    spec: TaskSpec
    train: list
    val: list
    test: list
    embedding: EmbeddingModel
    scaler: FeatureScaler
    lfs: list
    label_model: Any
    matrix: LabelMatrix
    examples: list
    val_examples: list
    test_examples: list
    val_gold: np.ndarray | None
    test_gold: np.ndarray | None
    test_weak: np.ndarray

    def lf_yaml(self) -> bytes:
        buf = io.StringIO()
        yaml.safe_dump({"lfs": [lf.to_dict() for lf in self.lfs]}, buf, sort_keys=False)
        return buf.getvalue().encode()


def prepare(spec: TaskSpec, deterministic: bool = False) -> Prepared:
    groups = load_groups(spec.data)
    tr, va, te = split(groups, spec.split, spec.seed)
    if not tr or not va:
        raise ValueError("split left the training or validation fold empty")
    if spec.embedding_path is not None:
        emb = EmbeddingModel.load(spec.embedding_path)
    else:
        emb = train_embedding(embedding_corpus(tr), spec.embedding_config(deterministic))
    lfs = load_lfs(spec.lf_config)
    mtr = apply_lfs(tr, lfs, emb)
    params = fit_label_model(mtr, spec)
    weak = np.array([p for _, p in predict_labels(params, mtr)])
    scaler = FeatureScaler().fit(tr)
    ccfg = spec.classifier_config()
    examples = build_training_set(tr, weak, mtr.all_abstain, emb, scaler, ccfg, spec.seed)
    mva = apply_lfs(va, lfs, emb)
    va_weak = np.array([p for _, p in predict_labels(params, mva)])
    val_examples = [featurize(g, emb, scaler, float(w), ccfg.rounding_threshold) for g, w in zip(va, va_weak)]
    test_examples = [featurize(g, emb, scaler) for g in te]
    te_weak = np.array([p for _, p in predict_labels(params, apply_lfs(te, lfs, emb))]) if te else np.zeros(0)
    return Prepared(spec, tr, va, te, emb, scaler, lfs, params, mtr, examples, val_examples, test_examples,
                    gold_labels(va, spec.truth, spec.category), gold_labels(te, spec.truth, spec.category),
                    te_weak)


def _has_both(y) -> bool:
    return y is not None and len(y) > 0 and 0 < int(np.sum(y)) < len(y)


def train_task(spec: TaskSpec, store: RunStore, runs: int | None = None, rank: int | None = None,
               n_jobs: int = 1, deterministic: bool = False, prepared: Prepared | None = None) -> dict:
    """Prepare, train ``runs`` seeds, log each to the store, select rank ``rank``.

    Only the selected run is a candidate for the task's best version.
    """
    runs = spec.runs if runs is None else runs
    rank = spec.rank if rank is None else rank
    if not 1 <= rank <= runs:
        raise ConfigError("need 1 <= rank <= runs")
    t0 = time.perf_counter()
    prep = prepared or prepare(spec, deterministic)
    ccfg = spec.classifier_config()
    val_gold = prep.val_gold if _has_both(prep.val_gold) else None
    selected, outcomes = multi_run_select(prep.examples, prep.val_examples, val_gold, ccfg, runs=runs, rank=rank,
                                          n_jobs=1 if deterministic else n_jobs, model=prep.embedding)
    version = code_version()
    shared = {
        "embedding": prep.embedding.to_bytes(),
        "scaler": prep.scaler.to_bytes(),
        "label_model": json.dumps(prep.label_model.to_dict(), sort_keys=True).encode(),
        "lf_config": prep.lf_yaml(),
    }
    summary: dict[str, Any] = {"task": spec.name, "runs": runs, "rank": rank,
                               "training_examples": len(prep.examples)}
    if _has_both(prep.test_gold):
        summary["label_model_test_balanced_accuracy"] = evaluate(prep.test_weak, prep.test_gold, 0.5,
                                                                 grid=()).balanced_accuracy
    for o in outcomes:
        rec = store.start_run(spec.name, {"task": spec.raw, "classifier": dataclasses.replace(ccfg, seed=o.seed)
                                          .to_dict(), "runs": runs, "rank": rank}, version)
        o.run_id = rec.run_id
        if not o.ok:
            store.fail_run(rec, o.error)
            continue
        for kind, blob in shared.items():
            store.log_artifact(rec, kind, blob)
        store.log_artifact(rec, "classifier", o.result.params.to_bytes())
        metrics = {"val_balanced_accuracy": o.val_balanced_accuracy, "best_epoch": o.result.best_epoch,
                   "seed": o.seed}
        if o is selected and _has_both(prep.test_gold):
            scores = o.result.params.predict(prep.test_examples)
            rep = evaluate(scores, prep.test_gold, 0.5, grid=())
            metrics["test_balanced_accuracy"] = rep.balanced_accuracy
            metrics["test_recall"] = rep.recall
            summary["test_balanced_accuracy"] = rep.balanced_accuracy
        store.finish_run(rec, metrics, promote=o is selected)
    best = store.best(spec.name)
    summary.update({
        "selected_run": selected.run_id,
        "selected_seed": selected.seed,
        "val_balanced_accuracy": selected.val_balanced_accuracy,
        "failed_runs": sum(not o.ok for o in outcomes),
        "best_run": best["run_id"] if best else None,
        "model_version": best["version"] if best else None,
        "seconds": round(time.perf_counter() - t0, 3),
    })
    return summary

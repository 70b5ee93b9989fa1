"""Labeling functions over transaction groups, the vote matrix they produce,
and coverage/overlap/conflict diagnostics."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .embed import EmbeddingModel
from .txprep import TransactionGroup

POSITIVE, NEGATIVE, ABSTAIN = 1, -1, 0
KINDS = ("pattern", "frequency", "anchor", "composite")


class LFConfigError(ValueError):
    pass


@dataclass
class LabelingFunction:
    """A heuristic that votes +1, -1 or abstains (0) on a transaction group.

    ``params`` by kind:

    * pattern: ``pattern`` (regex, wrapped in word boundaries), ``polarity``
    * frequency: ``gap`` ``[lo, hi]`` days, ``min_count``, ``max_cv``, ``polarity``
    * anchor: ``anchor`` word or ``vector``, ``threshold``, ``polarity``
    * composite: ``op`` (``not``, ``and`` or ``or``) and ``of`` (list of LF names);
      ``or`` takes the first non-abstaining vote in ``of`` order

    Any LF with ``emit: false`` is evaluated for composites only and gets no
    column in the label matrix.
    """

    name: str
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LFConfigError(f"{self.name}: unknown kind {self.kind!r}")
        p = self.params
        if self.kind != "composite" and p.get("polarity", POSITIVE) not in (POSITIVE, NEGATIVE):
            raise LFConfigError(f"{self.name}: polarity must be +1 or -1")
        if self.kind == "pattern":
            if "pattern" not in p:
                raise LFConfigError(f"{self.name}: pattern LF needs 'pattern'")
            self._regex = re.compile(r"\b(?:" + p["pattern"] + r")\b")
        elif self.kind == "frequency":
            lo, hi = p.get("gap", (None, None))
            if lo is None or hi is None or lo > hi:
                raise LFConfigError(f"{self.name}: frequency LF needs gap [lo, hi] with lo <= hi")
        elif self.kind == "anchor":
            t = p.get("threshold")
            if t is None or not -1.0 < float(t) <= 1.0:
                raise LFConfigError(f"{self.name}: anchor threshold must be in (-1, 1]")
            if "anchor" not in p and "vector" not in p:
                raise LFConfigError(f"{self.name}: anchor LF needs 'anchor' or 'vector'")
        elif self.kind == "composite":
            if p.get("op") not in ("not", "and", "or") or not p.get("of"):
                raise LFConfigError(f"{self.name}: composite needs op in (not, and, or) and 'of'")
            if p["op"] == "not" and len(p["of"]) != 1:
                raise LFConfigError(f"{self.name}: 'not' takes exactly one LF")

    @property
    def polarity(self) -> int:
        return int(self.params.get("polarity", POSITIVE))

    @property
    def emit(self) -> bool:
        return bool(self.params.get("emit", True))

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, **self.params}


def pattern_lf(name, pattern, polarity=POSITIVE, emit=True):
    return LabelingFunction(name, "pattern", {"pattern": pattern, "polarity": polarity, "emit": emit})


def frequency_lf(name, gap, min_count=3, max_cv=None, polarity=POSITIVE, emit=True):
    return LabelingFunction(name, "frequency", {"gap": list(gap), "min_count": min_count,
                                                 "max_cv": max_cv, "polarity": polarity, "emit": emit})


def anchor_lf(name, anchor, threshold, polarity=POSITIVE, emit=True):
    key = "anchor" if isinstance(anchor, str) else "vector"
    return LabelingFunction(name, "anchor", {key: anchor, "threshold": threshold, "polarity": polarity,
                                             "emit": emit})


def not_lf(name, of, emit=True):
    return LabelingFunction(name, "composite", {"op": "not", "of": [of], "emit": emit})


def and_lf(name, *of, emit=True):
    return LabelingFunction(name, "composite", {"op": "and", "of": list(of), "emit": emit})


def or_lf(name, *of, emit=True):
    return LabelingFunction(name, "composite", {"op": "or", "of": list(of), "emit": emit})


@dataclass
class LabelMatrix:
    votes: np.ndarray
    group_ids: list[str]
    lf_names: list[str]

    def __post_init__(self):
        self.votes = np.asarray(self.votes, dtype=np.int8)
        if self.votes.shape != (len(self.group_ids), len(self.lf_names)):
            raise ValueError(f"votes shape {self.votes.shape} does not match "
                             f"{len(self.group_ids)} groups x {len(self.lf_names)} LFs")
        if not np.isin(self.votes, (-1, 0, 1)).all():
            raise ValueError("votes must be in {-1, 0, 1}")

    @property
    def all_abstain(self) -> np.ndarray:
        return ~(self.votes != 0).any(axis=1)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write(json.dumps({"lf_names": self.lf_names}) + "\n")
            for gid, row in zip(self.group_ids, self.votes):
                fh.write(json.dumps({"group_id": gid, "votes": [int(v) for v in row]}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LabelMatrix":
        with Path(path).open(encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        names = header["lf_names"]
        votes = np.array([r["votes"] for r in rows], dtype=np.int8).reshape(len(rows), len(names))
        return cls(votes, [r["group_id"] for r in rows], names)


# -- evaluation ---------------------------------------------------------------


def _anchor_vector(lf: LabelingFunction, model: EmbeddingModel | None) -> np.ndarray:
    if "vector" in lf.params:
        return np.asarray(lf.params["vector"], dtype=np.float64)
    if model is None:
        raise LFConfigError(f"{lf.name}: anchor LFs need an embedding model")
    return model.vector(lf.params["anchor"]).astype(np.float64)


def _text_similarities(groups, model, vecs):
    """Max cosine between each group's tokens and each anchor vector."""
    texts = [g.normalized_text.tokens for g in groups]
    vocab = sorted({t for toks in texts for t in toks})
    if not vocab:
        return np.full((len(groups), vecs.shape[0]), -1.0)
    tok_index = {t: i for i, t in enumerate(vocab)}
    tv = model.vectors(vocab).astype(np.float64)
    tn = np.linalg.norm(tv, axis=1)
    tv = tv / np.where(tn == 0, 1.0, tn)[:, None]
    an = np.linalg.norm(vecs, axis=1)
    av = vecs / np.where(an == 0, 1.0, an)[:, None]
    sims = np.clip(tv @ av.T, -1.0, 1.0)
    sims[tn == 0, :] = 0.0
    sims[:, an == 0] = 0.0
    out = np.full((len(groups), vecs.shape[0]), -1.0)
    for i, toks in enumerate(texts):
        if toks:
            out[i] = sims[[tok_index[t] for t in toks]].max(axis=0)
    return out


def _eval_frequency(lf, groups):
    p = lf.params
    lo, hi = p["gap"]
    min_count = p.get("min_count", 2)
    max_cv = p.get("max_cv", math.inf)
    if max_cv is None:
        max_cv = math.inf
    out = np.zeros(len(groups), dtype=np.int8)
    for i, g in enumerate(groups):
        a = g.aggregates
        gap = a.mean_gap_days
        if a.count < min_count or math.isnan(gap) or not lo <= gap <= hi:
            continue
        cv = a.coeff_var
        if math.isnan(cv):
            cv = 0.0 if a.std == 0 else math.inf
        if abs(cv) <= max_cv:
            out[i] = lf.polarity
    return out


def apply_lfs(groups: Sequence[TransactionGroup], lfs: Sequence[LabelingFunction],
              model: EmbeddingModel | None = None) -> LabelMatrix:
    all_names = [lf.name for lf in lfs]
    if len(set(all_names)) != len(all_names):
        raise LFConfigError("labeling function names must be unique")
    names = [lf.name for lf in lfs if lf.emit]
    by_name = {lf.name: lf for lf in lfs}
    columns: dict[str, np.ndarray] = {}

    anchors = [lf for lf in lfs if lf.kind == "anchor"]
    if anchors:
        if model is None:
            raise LFConfigError("anchor LFs need an embedding model")
        vecs = np.stack([_anchor_vector(lf, model) for lf in anchors])
        sims = _text_similarities(groups, model, vecs)
        for j, lf in enumerate(anchors):
            columns[lf.name] = np.where(sims[:, j] >= float(lf.params["threshold"]), lf.polarity, 0).astype(np.int8)

    texts = [g.text for g in groups]
    for lf in lfs:
        if lf.kind == "pattern":
            columns[lf.name] = np.array([lf.polarity if lf._regex.search(t) else 0 for t in texts], dtype=np.int8)
        elif lf.kind == "frequency":
            columns[lf.name] = _eval_frequency(lf, groups)

    def resolve(name, stack=()):
        if name in columns:
            return columns[name]
        if name not in by_name:
            raise LFConfigError(f"composite references unknown LF {name!r}")
        if name in stack:
            raise LFConfigError(f"composite cycle through {name!r}")
        lf = by_name[name]
        parts = [resolve(n, stack + (name,)) for n in lf.params["of"]]
        if lf.params["op"] == "not":
            col = (-parts[0]).astype(np.int8)
        elif lf.params["op"] == "or":
            col = np.zeros(len(groups), dtype=np.int8)
            for part in reversed(parts):
                col = np.where(part != 0, part, col).astype(np.int8)
        else:
            # fires only when every part votes, and all agree on the sign
            stacked = np.stack(parts)
            agree = (stacked == stacked[0]).all(axis=0) & (stacked[0] != 0)
            col = np.where(agree, stacked[0], 0).astype(np.int8)
        columns[name] = col
        return col

    for lf in lfs:
        if lf.kind == "composite":
            resolve(lf.name)

    votes = np.stack([columns[n] for n in names], axis=1) if names else np.zeros((len(groups), 0), np.int8)
    return LabelMatrix(votes, [g.group_id for g in groups], names)


# -- diagnostics ----------------------------------------------------------------


@dataclass
class LFReport:
    lf_names: list[str]
    coverage: np.ndarray
    overlap: np.ndarray
    conflict: np.ndarray
    accuracy: np.ndarray | None = None

    def rows(self) -> list[dict]:
        out = []
        for j, name in enumerate(self.lf_names):
            row = {"lf": name, "coverage": float(self.coverage[j]), "overlap": float(self.overlap[j]),
                   "conflict": float(self.conflict[j])}
            if self.accuracy is not None:
                acc = self.accuracy[j]
                row["accuracy"] = None if np.isnan(acc) else float(acc)
            out.append(row)
        return out


def lf_report(matrix: LabelMatrix, dev_labels: Sequence[int] | None = None) -> LFReport:
    """Coverage, overlap and conflict per LF, plus accuracy against gold labels.

    Gold labels may be 0/1 or -1/+1; ``None`` entries are ignored.
    """
    L = matrix.votes.astype(np.int64)
    n, m = L.shape
    voted = L != 0
    if n == 0:
        z = np.zeros(m)
        return LFReport(list(matrix.lf_names), z, z.copy(), z.copy(), None)
    pos = (L == 1).sum(axis=1, keepdims=True)
    neg = (L == -1).sum(axis=1, keepdims=True)
    others = voted.sum(axis=1, keepdims=True) - voted
    opposite = np.where(L == 1, neg, np.where(L == -1, pos, 0))
    coverage = voted.mean(axis=0)
    overlap = (voted & (others > 0)).mean(axis=0)
    conflict = (voted & (opposite > 0)).mean(axis=0)
    accuracy = None
    if dev_labels is not None:
        if len(dev_labels) != n:
            raise ValueError(f"dev_labels has {len(dev_labels)} entries for {n} groups")
        gold = np.array([np.nan if y is None else (1 if y in (1, True) else -1) for y in dev_labels])
        known = ~np.isnan(gold)
        accuracy = np.full(m, np.nan)
        for j in range(m):
            rows = voted[:, j] & known
            if rows.any():
                accuracy[j] = float((L[rows, j] == gold[rows]).mean())
    return LFReport(list(matrix.lf_names), coverage, overlap, conflict, accuracy)


def format_report(report: LFReport) -> str:
    rows = report.rows()
    headers = ["lf", "coverage", "overlap", "conflict"] + (["accuracy"] if report.accuracy is not None else [])
    cells = [[r["lf"]] + [("-" if r[h] is None else f"{r[h]:.3f}") for h in headers[1:]] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(headers, widths)))]
    for c in cells:
        lines.append("  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(c, widths))))
    return "\n".join(lines)


def expand_anchor(model: EmbeddingModel, anchor: str, threshold: float,
                  vocabulary: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """Vocabulary words whose cosine to ``anchor`` is at least ``threshold``."""
    if not -1.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (-1, 1]")
    vec = model.vector(anchor)
    if vocabulary is None:
        sims = model.similarities(vec)
        pairs = zip(model.words, sims)
    else:
        pairs = ((w, model.max_word_similarity([w], vec)) for w in vocabulary)
    hits = [(w, float(s)) for w, s in pairs if s >= threshold]
    return sorted(hits, key=lambda ws: (-ws[1], ws[0]))


# -- config ---------------------------------------------------------------------


def lfs_from_config(doc: Mapping) -> list[LabelingFunction]:
    entries = doc.get("lfs", doc.get("labeling_functions"))
    if not isinstance(entries, list):
        raise LFConfigError("LF config needs a top-level 'lfs' list")
    out = []
    for e in entries:
        e = dict(e)
        try:
            name, kind = e.pop("name"), e.pop("kind")
        except KeyError as exc:
            raise LFConfigError(f"LF entry missing {exc}") from exc
        out.append(LabelingFunction(str(name), str(kind), e))
    return out


def load_lfs(path: str | Path) -> list[LabelingFunction]:
    with Path(path).open(encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, Mapping):
        raise LFConfigError(f"{path}: expected a mapping")
    return lfs_from_config(doc)


def dump_lfs(lfs: Sequence[LabelingFunction], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        yaml.safe_dump({"lfs": [lf.to_dict() for lf in lfs]}, fh, sort_keys=False)

"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 parity or integrity, 5 runtime.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .classifier import EvaluationError, UnsatisfiableBalanceError, evaluate
from .embed import EmbeddingConfig, EmbeddingModel, EmptyVocabularyError, train_embedding
from .labelmodel import LabelModelError, LabelModelParams, fit_em, fit_moments, predict_labels
from .runstore import STORE_ENV, IntegrityError, ParityError, RunStore, code_version
from .stream import (BatcherPolicy, InferenceLoop, ModelBundle, ReadinessRule, StreamReadError,
                     SystemClock, TopicLog, format_probability, publish_transactions)
from .synthgen import SynthConfigError, benchmark_config, generate, load_truth
from .taskspec import ConfigError, TaskSpec, embedding_corpus, train_task
from .txprep import DataError, load_groups, read_transactions, write_groups
from .weaksup import LabelMatrix, LFConfigError, apply_lfs, expand_anchor, format_report, lf_report, load_lfs

log = logging.getLogger("txweak")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_PARITY, EXIT_RUNTIME = 0, 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class CLIDataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (ParityError, IntegrityError)):
        return EXIT_PARITY
    if isinstance(exc, (ConfigError, LFConfigError, SynthConfigError, yaml.YAMLError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, CLIDataError, EvaluationError, UnsatisfiableBalanceError, EmptyVocabularyError,
                        LabelModelError, StreamReadError, FileNotFoundError, json.JSONDecodeError)):
        return EXIT_DATA
    return EXIT_RUNTIME


# -- output helpers -----------------------------------------------------------


def emit(args, doc, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True, default=_json_default))
    else:
        print(text if text is not None else yaml.safe_dump(_plain(doc), sort_keys=False).rstrip())


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


def _plain(o):
    return json.loads(json.dumps(o, default=_json_default))


def write_jsonl(path, rows) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CLIDataError(f"{path}:{i}: {exc}") from None
    return rows


def store_of(args) -> RunStore:
    root = args.store or os.environ.get(STORE_ENV)
    if not root:
        raise ConfigError(f"no run store: pass --store or set ${STORE_ENV}")
    return RunStore(root)


def _task(args) -> TaskSpec:
    return TaskSpec.load(args.config)


# -- subcommands --------------------------------------------------------------


def cmd_synth_generate(args):
    cfg = dataclasses.replace(benchmark_config(args.accounts, args.seed))
    if args.history:
        cfg = dataclasses.replace(cfg, history_days=tuple(args.history))
    corpus = generate(cfg)
    corpus.save(args.out, args.truth)
    emit(args, {"transactions": len(corpus.transactions), "instances": len(corpus.truth),
                "out": str(args.out), "truth": str(args.truth)})


def cmd_prep(args):
    groups = load_groups(args.input)
    write_groups(groups, args.output)
    emit(args, {"groups": len(groups), "transactions": sum(len(g.members) for g in groups), "out": str(args.output)})


def _embedding_config(args) -> EmbeddingConfig:
    overrides = {k: v for k, v in (("dim", args.dim), ("epochs", args.epochs), ("min_count", args.min_count),
                                   ("seed", args.seed), ("workers", args.workers)) if v is not None}
    if args.deterministic:
        overrides["workers"] = 1
    base = {}
    if args.config:
        spec = _task(args)
        base = {"seed": spec.seed, **spec.embedding}
    try:
        return EmbeddingConfig(**{**base, **overrides})
    except TypeError as exc:
        raise ConfigError(f"embedding: {exc}") from None


def cmd_embed_train(args):
    groups = load_groups(args.input)
    cfg = _embedding_config(args)
    model = train_embedding(embedding_corpus(groups), cfg)
    model.save(args.output)
    emit(args, {"words": len(model.words), "dim": model.dim, "ngrams": len(model.ngram_ids), "out": str(args.output),
                "final_loss": float(model.loss_history[-1]) if len(model.loss_history) else None})


def _neighbor_table(pairs) -> str:
    return "\n".join(f"{w:<24} {s:.4f}" for w, s in pairs)


def cmd_embed_neighbors(args):
    model = EmbeddingModel.load(args.model)
    pairs = model.nearest_neighbors(args.word, args.k)
    emit(args, [{"word": w, "cosine": s} for w, s in pairs], _neighbor_table(pairs))


def cmd_anchor_expand(args):
    model = EmbeddingModel.load(args.model)
    pairs = expand_anchor(model, args.word, args.threshold)
    emit(args, [{"word": w, "cosine": s} for w, s in pairs], _neighbor_table(pairs))


def cmd_lf_apply(args):
    groups = load_groups(args.groups)
    lfs = load_lfs(args.lfs)
    model = EmbeddingModel.load(args.model) if args.model else None
    if model is None and any(lf.kind == "anchor" for lf in lfs):
        raise ConfigError("anchor labeling functions need --model")
    matrix = apply_lfs(groups, lfs, model)
    matrix.save(args.output)
    emit(args, {"groups": len(groups), "lfs": matrix.lf_names, "all_abstain": int(matrix.all_abstain.sum()),
                "out": str(args.output)})


def _gold_from_truth(group_ids: Sequence[str], members: Sequence[Sequence[str]], truth_path, category) -> np.ndarray:
    tx = load_truth(truth_path)
    out = np.zeros(len(group_ids), dtype=np.int64)
    for i, ids in enumerate(members):
        hits = sum(category in tx.get(t, ()) for t in ids)
        out[i] = int(2 * hits > len(ids))
    return out


def _load_gold(args, group_ids, members=None) -> np.ndarray | None:
    if args.gold:
        table = {str(r["group_id"]): int(r["label"]) for r in read_jsonl(args.gold)}
        missing = [g for g in group_ids if g not in table]
        if missing:
            raise CLIDataError(f"gold file lacks labels for {len(missing)} groups, e.g. {missing[0]!r}")
        return np.array([table[g] for g in group_ids])
    if args.truth:
        if not args.category:
            raise UsageError("--truth needs --category")
        if members is None:
            raise UsageError("--truth needs group membership (pass --groups)")
        return _gold_from_truth(group_ids, members, args.truth, args.category)
    return None


def cmd_lf_report(args):
    matrix = LabelMatrix.load(args.matrix)
    members = None
    if args.groups:
        by_id = {g.group_id: [t.transaction_id for t in g.members] for g in load_groups(args.groups)}
        members = [by_id.get(g, []) for g in matrix.group_ids]
    gold = _load_gold(args, matrix.group_ids, members)
    rep = lf_report(matrix, None if gold is None else list(gold))
    emit(args, rep.rows(), format_report(rep))


def cmd_labelmodel_fit(args):
    matrix = LabelMatrix.load(args.matrix)
    if args.method == "em":
        params = fit_em(matrix, args.class_balance)
    else:
        params = fit_moments(matrix, args.class_balance)
    params.save(args.output)
    emit(args, params.to_dict())


def cmd_labelmodel_apply(args):
    params = LabelModelParams.load(args.params)
    matrix = LabelMatrix.load(args.matrix)
    if list(params.lf_names) != list(matrix.lf_names):
        raise CLIDataError(f"label matrix columns {matrix.lf_names} do not match model LFs {params.lf_names}")
    rows = [{"group_id": g, "probability": float(p), "all_abstain": bool(a)}
            for (g, p), a in zip(predict_labels(params, matrix), matrix.all_abstain)]
    write_jsonl(args.output, rows)
    emit(args, {"groups": len(rows), "positive": sum(r["probability"] >= 0.5 for r in rows), "out": str(args.output)})


def cmd_train(args):
    spec = _task(args)
    store = RunStore(args.store or os.environ.get(STORE_ENV) or spec.store or "")
    summary = train_task(spec, store, runs=args.runs, rank=args.rank, n_jobs=args.jobs,
                         deterministic=args.deterministic)
    emit(args, summary)


def cmd_eval(args):
    rows = read_jsonl(args.scores)
    if not rows:
        raise CLIDataError(f"{args.scores}: no scores")
    ids = [str(r["group_id"]) for r in rows]
    scores = np.array([float(r["probability"]) for r in rows])
    gold = _load_gold(args, ids, [r.get("transaction_ids", []) for r in rows])
    if gold is None:
        raise UsageError("eval needs --gold or --truth/--category")
    grid = args.grid if args.grid else None
    rep = evaluate(scores, gold, args.threshold, grid)
    if args.output:
        Path(args.output).write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    emit(args, rep.to_dict(), rep.to_text())


def _bundle(args, task: str) -> ModelBundle:
    store = store_of(args)
    loaded = store.load_for_inference(task, args.code_version or code_version(), allow_mismatch=args.allow_mismatch)
    return ModelBundle.from_loaded(loaded)


def cmd_predict(args):
    bundle = _bundle(args, args.task)
    groups = load_groups(args.input)
    scores = bundle.score_groups(groups)
    rows = [{"group_id": g.group_id, "probability": format_probability(float(s)),
             "transaction_ids": [t.transaction_id for t in g.members],
             "model_type": bundle.model_type, "model_version": bundle.model_version}
            for g, s in zip(groups, scores)]
    write_jsonl(args.output, rows)
    emit(args, {"groups": len(rows), "model_version": bundle.model_version, "out": str(args.output)})


def cmd_stream_publish(args):
    tlog = TopicLog(args.topics)
    n = publish_transactions(tlog, args.topic, read_transactions(args.input), args.signup_topic)
    emit(args, {"events": n, "topic": args.topic})


def cmd_stream_run(args):
    bundle = _bundle(args, args.task)
    clock = SystemClock()
    tlog = TopicLog(args.topics, clock)
    inputs = [args.input_topic] + ([args.signup_topic] if args.signup_topic else [])
    rule = ReadinessRule(args.min_transactions, tuple(args.require))
    loop = InferenceLoop(tlog, inputs, args.output_topic, BatcherPolicy(args.max_count, args.max_age), rule, bundle,
                         args.state, clock)
    if args.follow:
        loop.run_forever(args.poll_interval)
        return
    events = loop.drain()
    emit(args, {"predictions": len(events), "batches": len(loop.batches), "model_version": bundle.model_version})


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--deterministic", action="store_true", help="force single-threaded, reproducible mode")
    common.add_argument("--store", help=f"run store root (default ${STORE_ENV})")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = Parser(prog="txweak", description="Weakly supervised transaction-group classification.",
               parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)
    sub.required = True

    def add(parent, name, fn, help_):
        sp = parent.add_parser(name, help=help_, description=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    def group_cmd(name, help_):
        g = sub.add_parser(name, help=help_, description=help_, parents=[common])
        gs = g.add_subparsers(dest="action", metavar="action", parser_class=Parser)
        gs.required = True
        return gs

    synth = group_cmd("synth", "synthetic corpus with planted categories")
    sp = add(synth, "generate", cmd_synth_generate, "write a synthetic transaction file and its ground truth")
    sp.add_argument("--accounts", type=int, default=2000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--history", type=int, nargs=2, metavar=("MIN_DAYS", "MAX_DAYS"))
    sp.add_argument("-o", "--out", required=True, help="transactions file (.csv or .jsonl)")
    sp.add_argument("--truth", required=True, help="ground-truth JSON-lines file")

    sp = add(sub, "prep", cmd_prep, "normalize and group transactions")
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)

    emb = group_cmd("embed", "subword skip-gram embeddings")
    sp = add(emb, "train", cmd_embed_train, "train an embedding on group texts")
    sp.add_argument("input", help="groups or transactions file")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--config", help="task config supplying embedding settings")
    for flag in ("dim", "epochs", "min-count", "seed", "workers"):
        sp.add_argument(f"--{flag}", type=int)
    sp = add(emb, "neighbors", cmd_embed_neighbors, "nearest neighbors of a word")
    sp.add_argument("word")
    sp.add_argument("--model", required=True)
    sp.add_argument("-k", type=int, default=10)

    anc = group_cmd("anchor", "anchor word tools")
    sp = add(anc, "expand", cmd_anchor_expand, "vocabulary words within a cosine threshold of an anchor")
    sp.add_argument("word")
    sp.add_argument("--model", required=True)
    sp.add_argument("--threshold", type=float, default=0.7)

    lf = group_cmd("lf", "labeling functions")
    sp = add(lf, "apply", cmd_lf_apply, "apply labeling functions to groups")
    sp.add_argument("--lfs", required=True)
    sp.add_argument("--groups", required=True)
    sp.add_argument("--model")
    sp.add_argument("-o", "--output", required=True)
    sp = add(lf, "report", cmd_lf_report, "coverage, overlap, conflict and accuracy per LF")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--groups")
    sp.add_argument("--gold")
    sp.add_argument("--truth")
    sp.add_argument("--category")

    lm = group_cmd("labelmodel", "label model")
    sp = add(lm, "fit", cmd_labelmodel_fit, "fit LF accuracies")
    sp.add_argument("--matrix", required=True)
    sp.add_argument("--class-balance", type=float, required=True)
    sp.add_argument("--method", choices=("moments", "em"), default="moments")
    sp.add_argument("-o", "--output", required=True)
    sp = add(lm, "apply", cmd_labelmodel_apply, "write probabilistic labels")
    sp.add_argument("--params", required=True)
    sp.add_argument("--matrix", required=True)
    sp.add_argument("-o", "--output", required=True)

    sp = add(sub, "train", cmd_train, "train classifier run(s) for a task and log them to the store")
    sp.add_argument("--config", required=True)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add(sub, "eval", cmd_eval, "balanced accuracy, recall and a threshold sweep")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--gold")
    sp.add_argument("--truth")
    sp.add_argument("--category")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--grid", type=float, nargs="*")
    sp.add_argument("-o", "--output")

    def inference_flags(sp):
        sp.add_argument("--task", required=True)
        sp.add_argument("--code-version", help="expected code version (default: this install)")
        sp.add_argument("--allow-mismatch", action="store_true", help="load despite a code version mismatch")

    sp = add(sub, "predict", cmd_predict, "score groups with the task's best model")
    inference_flags(sp)
    sp.add_argument("input")
    sp.add_argument("-o", "--output", required=True)

    st = group_cmd("stream", "streaming inference")
    sp = add(st, "publish", cmd_stream_publish, "append transactions to a topic")
    sp.add_argument("input")
    sp.add_argument("--topics", required=True)
    sp.add_argument("--topic", default="transactions")
    sp.add_argument("--signup-topic", default="signups")
    sp = add(st, "run", cmd_stream_run, "run the streaming inference loop")
    inference_flags(sp)
    sp.add_argument("--topics", required=True)
    sp.add_argument("--state", required=True)
    sp.add_argument("--input-topic", default="transactions")
    sp.add_argument("--signup-topic", default="signups")
    sp.add_argument("--output-topic", default="predictions")
    sp.add_argument("--max-count", type=int, default=100)
    sp.add_argument("--max-age", type=float, default=5.0)
    sp.add_argument("--min-transactions", type=int, default=1)
    sp.add_argument("--require", nargs="*", default=["account_signup"])
    sp.add_argument("--follow", action="store_true")
    sp.add_argument("--poll-interval", type=float, default=1.0)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # mapped onto the exit-code table
        code = exit_code(exc)
        print(f"txweak: error: {exc}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

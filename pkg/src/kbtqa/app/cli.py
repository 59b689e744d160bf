"""Command-line entry point: ``kbtqa <command> [options]``.

All commands exit nonzero on failure and print ``{"error": ..., "message": ...}``
to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from contextlib import contextmanager
from pathlib import Path

from ..dataset import (
    RetrievalInstance,
    build_retrieval_dataset,
    split_dataset,
    validate_annotations,
)
from ..evaluation import DEFAULT_KS, classify_answer_source, evaluate_qa, evaluate_retrieval
from ..kb import KBIngestError
from ..retrieve import RETRIEVERS
from ..train import TrainConfig, train_bi_encoder
from .config import load_config
from .generation import HTTPGenerationClient, LookupGenerationClient
from .prompt import AnswerError, answer_question, select_fewshot_examples
from .service import serve_retrieval
from .workspace import Workspace, ingest, make_provider

logger = logging.getLogger("kbtqa")


@contextmanager
def _out(path):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yield f


def _emit(obj, path) -> None:
    with _out(path) as f:
        f.write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def _ks(text: str) -> list[int]:
    return sorted({int(x) for x in text.split(",") if x.strip()})


# -- commands ----------------------------------------------------------------


def cmd_ingest(args, cfg):
    cfg.kb = Path(args.kb) if args.kb else cfg.kb
    cfg.tables = Path(args.tables) if args.tables else cfg.tables
    cfg.questions = Path(args.questions) if args.questions else cfg.questions
    manifest = ingest(cfg)
    _emit({"store": str(cfg.store), **manifest}, args.output)


def cmd_index(args, cfg):
    ws = Workspace(cfg)
    provider = make_provider(cfg)
    sizes = ws.build_indexes(provider)
    _emit({"fingerprint": provider.fingerprint, "indexes": sizes}, args.output)


def cmd_retrieve(args, cfg):
    ws = Workspace(cfg)
    engine = ws.engine()
    results = engine.retrieve(args.question, args.table_id, args.k, args.method or cfg.method, seed=args.seed)
    labels = engine.labels(args.table_id)
    with _out(args.output) as f:
        for s in results:
            f.write(json.dumps(s.to_json(labels), ensure_ascii=False) + "\n")


def cmd_eval_retrieval(args, cfg):
    ws = Workspace(cfg)
    engine = ws.engine()
    ks = _ks(args.ks)
    method = args.method or cfg.method
    retrieved, gold = [], []
    for q in ws.questions:
        if not q.gold_evidence or q.table_id not in engine.indexes:
            continue
        res = engine.retrieve(q.question, q.table_id, max(ks), method, seed=args.seed)
        retrieved.append([s.triple for s in res])
        gold.append(q.gold_triples())
    report = evaluate_retrieval(retrieved, gold, ks).to_json()
    report["method"] = method
    _emit(report, args.output)


def cmd_build_train_data(args, cfg):
    ws = Workspace(cfg)
    provider = make_provider(cfg) if args.strategy == "knn" else None
    instances, issues = build_retrieval_dataset(
        ws.questions, ws.tables, ws.subgraphs, args.strategy, args.n, provider, args.seed
    )
    n = args.n if args.n is not None else (25 if args.strategy == "knn" else 50)
    seed = args.seed if args.strategy == "random" else None
    path = args.output or ws.root / "retrieval_dataset.jsonl"
    with _out(path) as f:
        for inst in instances:
            f.write(json.dumps(inst.to_record(args.strategy, n, seed), ensure_ascii=False) + "\n")
    for issue in issues:
        logger.warning("skipped %s: %s (%s)", issue.question_id, issue.rule, issue.detail)
    if path != "-":
        print(json.dumps({"instances": len(instances), "skipped": len(issues), "path": str(path)}))


def _load_instances(path, ws: Workspace) -> list[RetrievalInstance]:
    by_key = {t.key: t for g in ws.subgraphs.values() for t in g.triples}
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                pos = tuple(by_key[k] for k in rec["positives"])
                neg = tuple(by_key[k] for k in rec["negatives"])
            except KeyError as e:
                raise ValueError(f"{path}: line {lineno}: unknown triple key {e}") from None
            out.append(RetrievalInstance(rec["question_id"], rec["question"], rec["table_id"], pos, neg))
    return out


def cmd_train(args, cfg):
    ws = Workspace(cfg)
    instances = _load_instances(args.dataset or ws.root / "retrieval_dataset.jsonl", ws)
    dev = []
    if args.dev_fraction > 0:
        train, dev, _ = split_dataset(instances, (1 - args.dev_fraction, args.dev_fraction, 0.0), args.seed)
    else:
        train = instances
    tcfg = TrainConfig(args.epochs, args.batch_size, args.lr, args.seed, cfg.retriever.hash_dim)
    model = train_bi_encoder(train, ws.tables, ws.labels, tcfg, dev=dev or None)
    path = Path(args.output or ws.root / "model.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    print(json.dumps({"model": str(path), "fingerprint": model.fingerprint, "log": model.train_log}))


def cmd_eval_qa(args, cfg):
    ws = Workspace(cfg)
    preds = {}
    with open(args.predictions, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                preds[rec["id"]] = rec.get("prediction") or ""
    refs = {q.id: q.answer for q in ws.questions}
    if args.sources == "declared":
        sources = {q.id: q.answer_source for q in ws.questions}
    else:
        sources = {
            q.id: classify_answer_source(q.answer, ws.tables[q.table_id], ws.subgraphs[q.table_id])
            for q in ws.questions
        }
    _emit(evaluate_qa(preds, refs, sources).to_json(), args.output)


def cmd_answer(args, cfg):
    ws = Workspace(cfg)
    engine = ws.engine()
    questions = ws.questions
    if args.question_id:
        questions = [q for q in questions if q.id in set(args.question_id)]
        if not questions:
            raise KeyError(f"no question with id {args.question_id}")
    if args.generator == "lookup":
        gen = LookupGenerationClient({q.question: q.answer for q in ws.questions})
    else:
        if not cfg.generate_url:
            raise ValueError("no generation endpoint; set [endpoints] generate_url or KBTQA_GENERATE_URL")
        gen = HTTPGenerationClient(cfg.generate_url)
    train_pool = []
    if args.fewshot:
        train_pool, _, _ = split_dataset(ws.questions, seed=args.seed)
    k = cfg.retriever.top_k if args.k is None else args.k
    method = args.method or cfg.method
    preds, failed = {}, 0
    with _out(args.output) as f:
        for q in questions:
            examples = []
            if args.fewshot:
                pool = [x for x in train_pool if x.id != q.id]
                examples = select_fewshot_examples(q.question, pool, engine.provider, args.fewshot)
            try:
                trace = answer_question(q.question, q.table_id, engine, gen, k, method, examples,
                                        cfg.char_budget, question_id=q.id)
            except AnswerError as e:
                trace, failed = e.trace, failed + 1
            preds[q.id] = trace.answer or ""
            f.write(json.dumps(trace.to_json(engine.labels(q.table_id)), ensure_ascii=False) + "\n")
    if args.predictions:
        with _out(args.predictions) as f:
            for qid, p in preds.items():
                f.write(json.dumps({"id": qid, "prediction": p}, ensure_ascii=False) + "\n")
    if failed:
        raise RuntimeError(f"generation failed for {failed} question(s); traces written")


def cmd_validate(args, cfg):
    ws = Workspace(cfg)
    issues = validate_annotations(ws.questions, ws.tables, ws.subgraphs)
    with _out(args.output) as f:
        for i in issues:
            f.write(json.dumps({"question_id": i.question_id, "rule": i.rule, "detail": i.detail}) + "\n")


def cmd_serve(args, cfg):
    ws = Workspace(cfg)
    serve_retrieval(args.host, args.port, ws.engine(), args.method or cfg.method)


# -- parser ------------------------------------------------------------------


def _global_flags(default=None) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default, help="INI config file")
    common.add_argument("--seed", type=int, default=default, help="random seed (overrides config)")
    common.add_argument("--output", default=default, help="output file ('-' for stdout)")
    common.add_argument("--store", default=default, help="ingested store directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true",
                        default=False if default is None else default)
    return common


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kbtqa", description="Knowledge-base-augmented table QA retrieval toolkit.",
                                parents=[_global_flags()])
    sub = p.add_subparsers(dest="command", required=True)
    sub_common = _global_flags(argparse.SUPPRESS)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[sub_common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("ingest", cmd_ingest, "load kb/tables/questions into a store")
    sp.add_argument("--kb")
    sp.add_argument("--tables")
    sp.add_argument("--questions")

    add("index", cmd_index, "build and persist per-table triple indexes")

    sp = add("retrieve", cmd_retrieve, "rank triples for one question")
    sp.add_argument("--table-id", required=True)
    sp.add_argument("--question", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--method", choices=RETRIEVERS)

    sp = add("eval-retrieval", cmd_eval_retrieval, "Recall@k report over the store's questions")
    sp.add_argument("--method", choices=RETRIEVERS)
    sp.add_argument("--ks", default=",".join(map(str, DEFAULT_KS)))

    sp = add("build-train-data", cmd_build_train_data, "write retrieval_dataset.jsonl")
    sp.add_argument("--strategy", choices=["knn", "random"], default="knn")
    sp.add_argument("--n", type=int)

    sp = add("train", cmd_train, "train the linear bi-encoder")
    sp.add_argument("--dataset")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--lr", type=float, default=1e-5)
    sp.add_argument("--dev-fraction", type=float, default=0.0)

    sp = add("eval-qa", cmd_eval_qa, "EM/F1 report for a predictions file")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--sources", choices=["declared", "traced"], default="declared")

    sp = add("answer", cmd_answer, "generate answers from retrieval-augmented prompts")
    sp.add_argument("--question-id", action="append")
    sp.add_argument("--k", type=int)
    sp.add_argument("--method", choices=RETRIEVERS)
    sp.add_argument("--generator", choices=["http", "lookup"], default="http")
    sp.add_argument("--fewshot", type=int, default=0)
    sp.add_argument("--predictions", help="also write {id, prediction} JSONL here")

    add("validate", cmd_validate, "report annotation issues")

    sp = add("serve", cmd_serve, "run the HTTP retrieval service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    sp.add_argument("--method", choices=RETRIEVERS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.store:
            cfg.store = Path(args.store)
        if args.seed is None:
            args.seed = cfg.seed
        random.seed(args.seed)
        args.func(args, cfg)
    except Exception as e:
        err = {"error": type(e).__name__, "message": str(e)}
        if isinstance(e, KBIngestError) and e.line is not None:
            err["line"] = e.line
        print(json.dumps(err), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

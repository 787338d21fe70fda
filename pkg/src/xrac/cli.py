"""Command-line entry point wiring the whole pipeline together.

Subcommands: ingest, gen-synth, train, distill, explain, evaluate, sheet,
serve, agree. Settings resolve as defaults < config file (--config, a
flat JSON object) < explicit flags; the resolved configuration is written
next to every output file for provenance, and all randomness flows from
--seed. Exit codes: 0 success, 1 usage error, 2 data/validation error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import distill as distill_mod
from . import evalsheet as sheet_mod
from . import metrics as metrics_mod
from . import snippet as snippet_mod
from . import teacher as teacher_mod

DEFAULTS = {
    "seed": 0,
    "d": 32,
    "n_layers": 2,
    "epochs": 10,
    "batch_size": 16,
    "optimizer": "adam",
    "learning_rate": 3e-3,
    "disc_lr_scale": 0.1,
    "title_init": "identity",
    "select_best_val": False,
    "momentum": 0.9,
    "alpha": 0.5,
    "beta": 0.8,
    "temperature": 1.0,
    "lam": 1e-3,
    "max_iter": 800,
    "ngram": 4,
    "context": 5,
    "threshold": 0.5,
    "max_seq_len": 512,
    "min_freq": 1,
    "doc_len": 60,
    "noise_vocab": 500,
    "codes_per_doc_mean": 3.0,
    "skew": 0.0,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="xrac", description=__doc__)
    parser.add_argument("--config", help="flat JSON config file; flags override it")
    parser.add_argument("--json", action="store_true", help="print machine-readable JSON")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a planted-signal synthetic corpus")
    p.add_argument("--docs", type=int, required=True)
    p.add_argument("--codes", type=int, required=True)
    p.add_argument("--doc-len", type=int)
    p.add_argument("--noise-vocab", type=int)
    p.add_argument("--codes-per-doc-mean", type=float)
    p.add_argument("--skew", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("ingest", help="build a corpus cache from notes + code table")
    p.add_argument("--notes", required=True)
    p.add_argument("--code-table", required=True)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("train", help="train the teacher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=["bce_only", "augmented"], default="bce_only")
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int, dest="n_layers")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=["adam", "momentum"])
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--disc-lr-scale", type=float)
    p.add_argument("--title-init", choices=["identity", "random"])
    p.add_argument("--select-best-val", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("distill", help="fit sparse linear students on teacher logits")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--lam", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("explain", help="emit evidence snippets for predicted codes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=["attn", "kd"], required=True)
    p.add_argument("--students")
    p.add_argument("--split", default="test")
    p.add_argument("--ngram", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("evaluate", help="score prediction runs against gold codes")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model")
    p.add_argument("--students")
    p.add_argument("--with-baseline", action="store_true",
                   help="also fit and score the hard-label logistic baseline")
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("-o", "--output")

    p = sub.add_parser("sheet", help="build the blinded annotation question sheet")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--students", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--ngram", type=int)
    p.add_argument("--context", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("-o", "--output", required=True, help="sheet CSV path")
    p.add_argument("--blind", required=True, help="private blind-map CSV path")

    p = sub.add_parser("serve", help="host the annotation API and UI")
    p.add_argument("--sheet", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--bind", default="127.0.0.1:8787")
    p.add_argument("--ui", help="directory with the built UI bundle")

    p = sub.add_parser("agree", help="informativeness and between-group agreement")
    p.add_argument("--sheet", required=True)
    p.add_argument("--blind", required=True)
    p.add_argument("--group-a", action="append", required=True, help="annotation CSV (repeatable)")
    p.add_argument("--group-b", action="append", default=[], help="annotation CSV (repeatable)")
    p.add_argument("-o", "--output")

    return parser


def _resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags, collapsed to one flat dict."""
    resolved = dict(DEFAULTS)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: config must be a flat JSON object")
        resolved.update(loaded)
    for key, value in vars(args).items():
        if key in ("config", "json", "command"):
            continue
        if value is not None:
            resolved[key] = value
    return resolved


def _write_provenance(output: str | Path, resolved: dict) -> None:
    side = Path(str(output) + ".config.json")
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)


def _emit(result: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(result, sort_keys=True))
    else:
        for key, value in result.items():
            print(f"{key}: {value}")


def _teacher_config(cfg: dict, corpus: corpus_mod.Corpus) -> teacher_mod.TeacherConfig:
    return teacher_mod.TeacherConfig(
        d=int(cfg["d"]),
        n_layers=int(cfg["n_layers"]),
        max_seq_len=corpus.max_seq_len,
        alpha=float(cfg["alpha"]),
        beta=float(cfg["beta"]),
        optimizer=str(cfg["optimizer"]),
        learning_rate=float(cfg["learning_rate"]),
        disc_lr_scale=float(cfg["disc_lr_scale"]),
        momentum=float(cfg["momentum"]),
        batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]),
        seed=int(cfg["seed"]),
        threshold=float(cfg["threshold"]),
        select_best_val=bool(cfg["select_best_val"]),
        title_init=str(cfg["title_init"]),
    )


def build_explainer_run(
    method: str,
    corpus: corpus_mod.Corpus,
    model: teacher_mod.TeacherModel,
    students: distill_mod.StudentModels | None,
    split: str,
    threshold: float,
    ngram: int,
    context: int,
) -> sheet_mod.ExplainerRun:
    """Positive predictions plus one snippet per (doc, code) for one explainer."""
    docs = corpus.split_docs(split)
    predictions: set[tuple[str, int]] = set()
    snippets: dict[tuple[str, int], snippet_mod.Snippet] = {}
    if method == "attn":
        e_t = teacher_mod.model_code_embeddings(model)
        for doc in docs:
            if doc.n_tokens == 0:
                continue
            u_x = teacher_mod.read_document(doc, model)
            v_x = teacher_mod.code_attend(e_t, u_x)
            probs = teacher_mod.predict_probs(v_x, e_t, model)
            weights = teacher_mod.attention_kernel(e_t, u_x, model.config.d)
            for code_id in np.nonzero(probs >= threshold)[0]:
                key = (doc.doc_id, int(code_id))
                predictions.add(key)
                snippets[key] = snippet_mod.extract_snippet(
                    weights[code_id], doc, ngram, context, int(code_id), "ATTN"
                )
    elif method == "kd":
        if students is None:
            raise ValueError("the kd method needs --students")
        for doc in docs:
            probs = distill_mod.student_predict(students, doc.bow)
            for code_id in np.nonzero(probs >= threshold)[0]:
                key = (doc.doc_id, int(code_id))
                weights = distill_mod.project_weights_to_positions(students, int(code_id), doc)
                if weights.size == 0:
                    continue
                predictions.add(key)
                snippets[key] = snippet_mod.extract_snippet(
                    weights, doc, ngram, context, int(code_id), "KD"
                )
    else:
        raise ValueError(f"unknown explainer method {method!r}")
    tag = "ATTN" if method == "attn" else "KD"
    return sheet_mod.ExplainerRun(tag, predictions, snippets)


def _gold_sets(docs) -> list[set[int]]:
    return [set(d.gold_codes) for d in docs]


# -- subcommand implementations -------------------------------------------------


def _cmd_gen_synth(args, cfg) -> dict:
    spec = corpus_mod.PlantedSpec(
        n_docs=int(cfg["docs"]),
        n_codes=int(cfg["codes"]),
        vocab_noise_size=int(cfg["noise_vocab"]),
        doc_len=int(cfg["doc_len"]),
        codes_per_doc_mean=float(cfg["codes_per_doc_mean"]),
        code_skew=float(cfg["skew"]),
        max_seq_len=int(cfg["max_seq_len"]),
    )
    corp = corpus_mod.generate_planted_corpus(spec, int(cfg["seed"]))
    corpus_mod.save_corpus(corp, args.output)
    _write_provenance(args.output, cfg)
    return {"output": args.output, "documents": len(corp.documents), "codes": corp.n_codes}


def _cmd_ingest(args, cfg) -> dict:
    config = corpus_mod.IngestConfig(
        max_seq_len=int(cfg["max_seq_len"]),
        min_freq=int(cfg["min_freq"]),
        split_seed=int(cfg["seed"]),
    )
    corp = corpus_mod.ingest_corpus(args.notes, args.code_table, config)
    corpus_mod.save_corpus(corp, args.output)
    _write_provenance(args.output, cfg)
    return {
        "output": args.output,
        "documents": len(corp.documents),
        "codes": corp.n_codes,
        "vocabulary": len(corp.vocab),
        "rejects": len(corp.rejects),
    }


def _cmd_train(args, cfg) -> dict:
    corp = corpus_mod.load_corpus(args.corpus)
    config = _teacher_config(cfg, corp)
    model = teacher_mod.train_teacher(corp, config, mode=args.mode)
    teacher_mod.save_teacher(model, args.output)
    _write_provenance(args.output, cfg)
    last = model.loss_log[-1] if model.loss_log else None
    return {"output": args.output, "mode": args.mode, "final_loss": last}


def _cmd_distill(args, cfg) -> dict:
    corp = corpus_mod.load_corpus(args.corpus)
    model = teacher_mod.load_teacher(args.model, corp.vocab)
    targets = distill_mod.teacher_logits(model, corp, float(cfg["temperature"]), split="train")
    _, X = distill_mod.bow_matrix(corp, split="train")
    students = distill_mod.fit_students(
        X,
        targets,
        lam=float(cfg["lam"]),
        max_iter=int(cfg["max_iter"]),
        vocab_hash=corp.vocab.content_hash(),
    )
    distill_mod.save_students(students, args.output)
    _write_provenance(args.output, cfg)
    return {"output": args.output, "nonzero_weights": students.nnz()}


def _cmd_explain(args, cfg) -> dict:
    corp = corpus_mod.load_corpus(args.corpus)
    model = teacher_mod.load_teacher(args.model, corp.vocab)
    students = distill_mod.load_students(args.students, corp.vocab) if args.students else None
    run = build_explainer_run(
        args.method, corp, model, students, args.split,
        float(cfg["threshold"]), int(cfg["ngram"]), int(cfg["context"]),
    )
    ordered = [run.snippets[key] for key in sorted(run.predictions)]
    snippet_mod.write_snippets_csv(ordered, corp.codes.codes, args.output)
    _write_provenance(args.output, cfg)
    return {"output": args.output, "snippets": len(ordered), "method": args.method}


def _cmd_evaluate(args, cfg) -> dict:
    corp = corpus_mod.load_corpus(args.corpus)
    docs = corp.split_docs(args.split)
    gold = _gold_sets(docs)
    threshold = float(cfg["threshold"])
    reports: dict[str, metrics_mod.MetricsReport] = {}

    if args.model:
        model = teacher_mod.load_teacher(args.model, corp.vocab)
        doc_ids, scores = teacher_mod.predict_corpus(model, corp, args.split)
        run = metrics_mod.PredictionRun(doc_ids, scores, threshold)
        reports["teacher"] = metrics_mod.compute_report(run, gold, corp.codes)
    if args.students:
        students = distill_mod.load_students(args.students, corp.vocab)
        doc_ids, scores = distill_mod.predict_students_corpus(students, corp, args.split)
        run = metrics_mod.PredictionRun(doc_ids, scores, threshold)
        reports["students"] = metrics_mod.compute_report(run, gold, corp.codes)
    if args.with_baseline:
        _, X_train = distill_mod.bow_matrix(corp, split="train")
        train_docs = corp.split_docs("train")
        Y = np.zeros((len(train_docs), corp.n_codes))
        for i, doc in enumerate(train_docs):
            Y[i, sorted(doc.gold_codes)] = 1.0
        baseline = distill_mod.fit_logistic_baseline(X_train, Y, max_iter=int(cfg["max_iter"]))
        _, X_eval = distill_mod.bow_matrix(corp, split=args.split)
        run = metrics_mod.PredictionRun(
            [d.doc_id for d in docs], baseline.predict(X_eval), threshold
        )
        reports["logreg"] = metrics_mod.compute_report(run, gold, corp.codes)

    if not reports:
        raise ValueError("evaluate needs at least one of --model, --students, --with-baseline")

    payload = {name: rep.to_dict() for name, rep in reports.items()}
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
        _write_provenance(args.output, cfg)
    if not args.json:
        print(metrics_mod.format_report_table(reports))
    return {"split": args.split, "reports": payload, "output": args.output}


def _cmd_sheet(args, cfg) -> dict:
    corp = corpus_mod.load_corpus(args.corpus)
    model = teacher_mod.load_teacher(args.model, corp.vocab)
    students = distill_mod.load_students(args.students, corp.vocab)
    common = dict(
        corpus=corp, model=model, students=students, split=args.split,
        threshold=float(cfg["threshold"]), ngram=int(cfg["ngram"]), context=int(cfg["context"]),
    )
    run_attn = build_explainer_run("attn", **common)
    run_kd = build_explainer_run("kd", **common)
    sheet = sheet_mod.build_question_sheet(run_attn, run_kd, corp.codes, int(cfg["seed"]))
    sheet.save(args.output, args.blind)
    _write_provenance(args.output, cfg)
    return {
        "sheet": args.output,
        "blind": args.blind,
        "questions": sheet.n_questions,
        "overlap_attn": len(run_attn.predictions),
        "overlap_kd": len(run_kd.predictions),
    }


def _cmd_serve(args, cfg) -> dict:
    sheet = _load_sheet_only(args.sheet)
    server = sheet_mod.serve_annotation(sheet, args.store, args.bind, args.ui)
    print(f"annotation service listening on {args.bind} (store: {args.store})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.shutdown()
    return {"bind": args.bind}


def _load_sheet_only(sheet_path: str) -> sheet_mod.QuestionSheet:
    """Load a sheet for serving without requiring the private blind map."""
    import csv as _csv

    rows = []
    with open(sheet_path, newline="", encoding="utf-8") as fh:
        for rec in _csv.DictReader(fh):
            rows.append(
                sheet_mod.SheetRow(
                    int(rec["question_id"]), rec["code"], rec["description"],
                    rec["snippet_label"], rec["snippet_text"],
                )
            )
    blind = {(r.question_id, r.snippet_label): "?" for r in rows}
    return sheet_mod.QuestionSheet(rows, blind, seed=0)


def _cmd_agree(args, cfg) -> dict:
    sheet = sheet_mod.QuestionSheet.load(args.sheet, args.blind)
    set_a = sheet_mod.ingest_annotations(sheet, args.group_a)
    set_a.group_of = {ann: "A" for ann in set_a.annotators()}
    merged = set_a
    set_b = None
    if args.group_b:
        set_b = sheet_mod.ingest_annotations(sheet, args.group_b)
        set_b.group_of = {ann: "B" for ann in set_b.annotators()}
        overlap = set(set_a.group_of) & set(set_b.group_of)
        if overlap:
            raise ValueError(f"annotators appear in both groups: {sorted(overlap)}")
        merged = sheet_mod.AnnotationSet(
            judgments={**set_a.judgments, **set_b.judgments},
            group_of={**set_a.group_of, **set_b.group_of},
            rejected=set_a.rejected + set_b.rejected,
        )
    report = sheet_mod.informativeness_report(merged, sheet.blind_map)
    if set_b is not None:
        jac = sheet_mod.jaccard_agreement(set_a, set_b, sheet.blind_map)
        for model, values in jac.items():
            report.models[model].jaccard_hi = values["HI"]
            report.models[model].jaccard_i = values["I"]
    payload = report.to_dict()
    payload["rejected_rows"] = merged.rejected
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
        _write_provenance(args.output, cfg)
    return payload


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "ingest": _cmd_ingest,
    "train": _cmd_train,
    "distill": _cmd_distill,
    "explain": _cmd_explain,
    "evaluate": _cmd_evaluate,
    "sheet": _cmd_sheet,
    "serve": _cmd_serve,
    "agree": _cmd_agree,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        cfg = _resolve(args)
        result = _COMMANDS[args.command](args, cfg)
    except (ValueError, OSError, RuntimeError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    _emit(result, args.json)
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()

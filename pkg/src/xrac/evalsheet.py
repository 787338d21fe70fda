"""Blinded human-evaluation protocol and the annotation HTTP service.

A question sheet pairs the two explainers' snippets for every (document,
code) both models predicted, labels them A/B in seeded-random order, and
keeps the label-to-model mapping in a separate private blind map that is
never served. Annotators judge each snippet HI / I / IR; reports unblind
with the map, aggregate per group by majority vote (ties toward the less
informative class), and compare groups by Jaccard similarity.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import urlparse, parse_qs

from .corpus import CodeTable
from .numerics import Rng
from .snippet import Snippet

__all__ = [
    "JUDGMENTS",
    "SheetRow",
    "QuestionSheet",
    "ExplainerRun",
    "AnnotationSet",
    "ModelAgreement",
    "AgreementReport",
    "build_question_sheet",
    "ingest_annotations",
    "group_majorities",
    "informativeness_report",
    "jaccard_agreement",
    "AnnotationServer",
    "serve_annotation",
]

logger = logging.getLogger(__name__)

JUDGMENTS = ("HI", "I", "IR")
# rank used to break majority ties toward the less informative class
_INFORMATIVENESS = {"IR": 0, "I": 1, "HI": 2}

SHEET_HEADER = ["question_id", "code", "description", "snippet_label", "snippet_text"]
BLIND_HEADER = ["question_id", "snippet_label", "model"]
ANNOTATION_HEADER = ["annotator_id", "question_id", "snippet_label", "judgment"]

STORE_ENV_VAR = "XRAC_ANNOTATION_STORE"


@dataclass
class SheetRow:
    question_id: int
    code: str
    description: str
    snippet_label: str
    snippet_text: str


@dataclass
class QuestionSheet:
    """Public rows plus the private label->model blind map."""

    rows: list[SheetRow]
    blind_map: dict[tuple[int, str], str]
    seed: int

    def __post_init__(self):
        by_q: dict[int, set[str]] = {}
        for row in self.rows:
            by_q.setdefault(row.question_id, set()).add(row.snippet_label)
        for qid, labels in by_q.items():
            if labels != {"A", "B"}:
                raise ValueError(f"question {qid} must have exactly labels A and B, got {labels}")
            for label in labels:
                if (qid, label) not in self.blind_map:
                    raise ValueError(f"blind map missing entry for question {qid} label {label}")
        if len(self.blind_map) != 2 * len(by_q):
            raise ValueError("blind map does not match the sheet's questions")

    @property
    def n_questions(self) -> int:
        return len(self.rows) // 2

    def keys(self) -> list[tuple[int, str]]:
        return [(r.question_id, r.snippet_label) for r in self.rows]

    def save(self, sheet_path: str | Path, blind_path: str | Path) -> None:
        with open(sheet_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SHEET_HEADER)
            for r in self.rows:
                writer.writerow([r.question_id, r.code, r.description, r.snippet_label, r.snippet_text])
        with open(blind_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(BLIND_HEADER)
            for (qid, label), model in sorted(self.blind_map.items()):
                writer.writerow([qid, label, model])

    @classmethod
    def load(cls, sheet_path: str | Path, blind_path: str | Path, seed: int = 0) -> "QuestionSheet":
        rows = []
        with open(sheet_path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    SheetRow(
                        int(rec["question_id"]), rec["code"], rec["description"],
                        rec["snippet_label"], rec["snippet_text"],
                    )
                )
        blind = {}
        with open(blind_path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                blind[(int(rec["question_id"]), rec["snippet_label"])] = rec["model"]
        return cls(rows, blind, seed)


@dataclass
class ExplainerRun:
    """One explainer's positive predictions and their snippets."""

    model_tag: str
    predictions: set[tuple[str, int]]
    snippets: dict[tuple[str, int], Snippet]

    def __post_init__(self):
        missing = self.predictions - set(self.snippets)
        if missing:
            raise ValueError(f"{len(missing)} predictions have no snippet (e.g. {sorted(missing)[:3]})")


def build_question_sheet(
    run_a: ExplainerRun, run_b: ExplainerRun, codes: CodeTable, seed: int
) -> QuestionSheet:
    """Paired blinded questions over the two runs' prediction overlap.

    One question per (doc, code) predicted positive by both models; the
    A/B assignment is a seeded coin flip per question so annotators
    cannot infer the model from the order.
    """
    overlap = sorted(run_a.predictions & run_b.predictions)
    if not overlap:
        logger.warning("prediction overlap is empty; emitting an empty sheet")
    rng = Rng(seed)
    rows: list[SheetRow] = []
    blind: dict[tuple[int, str], str] = {}
    for qid, (doc_id, code_id) in enumerate(overlap, start=1):
        first, second = (run_a, run_b) if rng.uniform() < 0.5 else (run_b, run_a)
        for label, run in (("A", first), ("B", second)):
            snip = run.snippets[(doc_id, code_id)]
            rows.append(
                SheetRow(
                    question_id=qid,
                    code=codes.codes[code_id],
                    description=codes.descriptions[code_id],
                    snippet_label=label,
                    snippet_text=" ".join(snip.tokens),
                )
            )
            blind[(qid, label)] = run.model_tag
    return QuestionSheet(rows, blind, seed)


@dataclass
class AnnotationSet:
    """Validated judgments, resolved last-write-wins per (annotator, question, label)."""

    judgments: dict[tuple[str, int, str], str]
    group_of: dict[str, str]
    rejected: list[str] = field(default_factory=list)

    def annotators(self) -> list[str]:
        return sorted({a for a, _, _ in self.judgments})

    def keys(self) -> set[tuple[int, str]]:
        return {(qid, label) for _, qid, label in self.judgments}


def ingest_annotations(
    sheet: QuestionSheet,
    files: list[str | Path],
    group_of: dict[str, str] | None = None,
) -> AnnotationSet:
    """Read annotation CSVs against a sheet.

    Rows with unknown questions/labels/judgments go to the per-row
    rejection report; duplicate keys resolve last-write-wins with a
    logged warning.
    """
    valid_keys = set(sheet.keys())
    judgments: dict[tuple[str, int, str], str] = {}
    rejected: list[str] = []
    for path in files:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or set(ANNOTATION_HEADER) - set(reader.fieldnames):
                raise ValueError(f"{path}: expected header {','.join(ANNOTATION_HEADER)}")
            for lineno, rec in enumerate(reader, start=2):
                reason = None
                annotator = (rec["annotator_id"] or "").strip()
                judgment = (rec["judgment"] or "").strip()
                label = (rec["snippet_label"] or "").strip()
                try:
                    qid = int(rec["question_id"])
                except (TypeError, ValueError):
                    qid = -1
                if not annotator:
                    reason = "missing annotator_id"
                elif judgment not in JUDGMENTS:
                    reason = f"unknown judgment {judgment!r}"
                elif (qid, label) not in valid_keys:
                    reason = f"unknown question/label ({rec['question_id']}, {label})"
                if reason:
                    rejected.append(f"{path}: line {lineno}: {reason}")
                    continue
                key = (annotator, qid, label)
                if key in judgments:
                    logger.warning("duplicate judgment for %s; keeping the later row", key)
                judgments[key] = judgment
    return AnnotationSet(judgments, dict(group_of or {}), rejected)


def _majority(votes: list[str]) -> str:
    counts = {j: 0 for j in JUDGMENTS}
    for v in votes:
        counts[v] += 1
    best = max(counts.values())
    tied = [j for j, c in counts.items() if c == best]
    return min(tied, key=lambda j: _INFORMATIVENESS[j])


def group_majorities(
    annotations: AnnotationSet, annotators: list[str] | None = None
) -> dict[tuple[int, str], str]:
    """Majority judgment per (question, label); ties go to the less informative class."""
    pool = set(annotators) if annotators is not None else None
    votes: dict[tuple[int, str], list[str]] = {}
    for (annotator, qid, label), judgment in sorted(annotations.judgments.items()):
        if pool is not None and annotator not in pool:
            continue
        votes.setdefault((qid, label), []).append(judgment)
    return {key: _majority(v) for key, v in votes.items()}


@dataclass
class ModelAgreement:
    counts: dict[str, dict[str, int]]       # group -> judgment -> count
    percent: dict[str, float]               # group -> 100*(HI+I)/total
    jaccard_hi: float | None = None
    jaccard_i: float | None = None


@dataclass
class AgreementReport:
    models: dict[str, ModelAgreement]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "models": {
                tag: {
                    "counts": m.counts,
                    "percent": m.percent,
                    "jaccard": {"HI": m.jaccard_hi, "I": m.jaccard_i},
                }
                for tag, m in sorted(self.models.items())
            },
            "warnings": self.warnings,
        }


def informativeness_report(
    annotations: AnnotationSet, blind_map: dict[tuple[int, str], str]
) -> AgreementReport:
    """Per-group, per-model judgment counts and percent informative (HI+I).

    Question snippets with no judgment from a group are excluded from
    that group's denominator and surfaced as a coverage warning.
    """
    groups: dict[str, list[str]] = {}
    for annotator in annotations.annotators():
        group = annotations.group_of.get(annotator, "default")
        groups.setdefault(group, []).append(annotator)

    models = sorted(set(blind_map.values()))
    report = AgreementReport(
        models={m: ModelAgreement(counts={}, percent={}) for m in models}
    )
    for group, members in sorted(groups.items()):
        majority = group_majorities(annotations, members)
        missing = len(blind_map) - len(majority)
        if missing:
            report.warnings.append(
                f"group {group}: {missing} of {len(blind_map)} snippets have no judgment"
            )
        for m in models:
            report.models[m].counts[group] = {j: 0 for j in JUDGMENTS}
        for key, judgment in majority.items():
            model = blind_map[key]
            report.models[model].counts[group][judgment] += 1
        for m in models:
            counts = report.models[m].counts[group]
            total = sum(counts.values())
            informative = counts["HI"] + counts["I"]
            report.models[m].percent[group] = 100.0 * informative / total if total else 0.0
    return report


def percent_informative(hi: int, informative: int, irrelevant: int) -> float:
    """100 * (HI + I) / (HI + I + IR); the ratio reported per model and group."""
    total = hi + informative + irrelevant
    if total == 0:
        return 0.0
    return 100.0 * (hi + informative) / total


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    union = a | b
    return len(a & b) / len(union)


def jaccard_agreement(
    annot_a: AnnotationSet,
    annot_b: AnnotationSet,
    blind_map: dict[tuple[int, str], str],
) -> dict[str, dict[str, float]]:
    """Between-group agreement per model for the HI and I majority sets."""
    for annot in (annot_a, annot_b):
        unknown = annot.keys() - set(blind_map)
        if unknown:
            raise ValueError(f"annotations reference keys outside the sheet: {sorted(unknown)[:3]}")
    maj_a = group_majorities(annot_a)
    maj_b = group_majorities(annot_b)
    models = sorted(set(blind_map.values()))
    out: dict[str, dict[str, float]] = {}
    for model in models:
        keys = {k for k, m in blind_map.items() if m == model}
        out[model] = {}
        for judgment in ("HI", "I"):
            set_a = {k for k in keys if maj_a.get(k) == judgment}
            set_b = {k for k in keys if maj_b.get(k) == judgment}
            out[model][judgment] = _jaccard(set_a, set_b)
    return out


# -- annotation HTTP service ---------------------------------------------------


class _AnnotationStore:
    """Append-only judgment log; writes are serialized and flushed to disk."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.lock = threading.Lock()
        self._resolved: dict[tuple[str, int, str], str] = {}
        if self.path.exists():
            with open(self.path, newline="", encoding="utf-8") as fh:
                for rec in csv.DictReader(fh):
                    key = (rec["annotator_id"], int(rec["question_id"]), rec["snippet_label"])
                    self._resolved[key] = rec["judgment"]
        else:
            with open(self.path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(ANNOTATION_HEADER)

    def append(self, annotator: str, qid: int, label: str, judgment: str) -> None:
        with self.lock:
            with open(self.path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([annotator, qid, label, judgment])
                fh.flush()
                os.fsync(fh.fileno())
            self._resolved[(annotator, qid, label)] = judgment

    def resolved(self) -> dict[tuple[str, int, str], str]:
        with self.lock:
            return dict(self._resolved)

    def export_text(self) -> str:
        with self.lock:
            return self.path.read_text(encoding="utf-8")


_FALLBACK_PAGE = """<!doctype html>
<html><head><meta charset="utf-8"><title>Annotation service</title></head>
<body><h1>Annotation service is running</h1>
<p>No UI bundle was supplied. The JSON API is available under /api/.</p>
</body></html>
"""

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".ico": "image/x-icon",
    ".svg": "image/svg+xml",
}


class AnnotationServer:
    """Serves the blinded sheet, accepts judgments, exports the raw log as CSV."""

    def __init__(
        self,
        sheet: QuestionSheet,
        store_path: str | Path,
        host: str = "127.0.0.1",
        port: int = 8787,
        ui_dir: str | Path | None = None,
    ):
        store_path = os.environ.get(STORE_ENV_VAR, str(store_path))
        self.sheet = sheet
        self.store = _AnnotationStore(store_path)
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self._rows_payload = [
            {
                "question_id": r.question_id,
                "code": r.code,
                "description": r.description,
                "snippet_label": r.snippet_label,
                "snippet_text": r.snippet_text,
            }
            for r in sheet.rows
        ]
        self._valid_keys = set(sheet.keys())
        handler = self._make_handler()
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def shutdown(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    # -- request handling --

    def _questions_payload(self, annotator: str | None) -> list[dict]:
        if annotator is None:
            return self._rows_payload
        resolved = self.store.resolved()
        out = []
        for row in self._rows_payload:
            key = (annotator, row["question_id"], row["snippet_label"])
            item = dict(row)
            item["existing_judgment"] = resolved.get(key)
            out.append(item)
        return out

    def _progress_payload(self, annotator: str) -> dict:
        resolved = self.store.resolved()
        answered: list[tuple[int, str]] = []
        tallies = {j: 0 for j in JUDGMENTS}
        for (ann, qid, label), judgment in resolved.items():
            if ann == annotator and (qid, label) in self._valid_keys:
                answered.append((qid, label))
                tallies[judgment] += 1
        return {
            "annotator_id": annotator,
            "answered": len(answered),
            "total": len(self._valid_keys),
            "tallies": tallies,
            "answered_keys": sorted(answered),
        }

    def _submit(self, body: dict) -> tuple[int, dict]:
        for fieldname in ("annotator_id", "question_id", "snippet_label", "judgment"):
            if fieldname not in body:
                return 400, {"error": f"missing field {fieldname!r}"}
        annotator = str(body["annotator_id"]).strip()
        if not annotator:
            return 400, {"error": "annotator_id must be non-empty"}
        try:
            qid = int(body["question_id"])
        except (TypeError, ValueError):
            return 400, {"error": "question_id must be an integer"}
        label = str(body["snippet_label"])
        judgment = str(body["judgment"])
        if judgment not in JUDGMENTS:
            return 400, {"error": f"judgment must be one of {'/'.join(JUDGMENTS)}"}
        if (qid, label) not in self._valid_keys:
            return 400, {"error": f"unknown question/label ({qid}, {label})"}
        self.store.append(annotator, qid, label, judgment)
        return 200, {"ok": True}

    def _static(self, path: str) -> tuple[int, bytes, str]:
        if path == "/":
            path = "/index.html"
        if self.ui_dir is None:
            if path == "/index.html":
                return 200, _FALLBACK_PAGE.encode(), "text/html; charset=utf-8"
            return 404, b"not found", "text/plain"
        target = (self.ui_dir / path.lstrip("/")).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            return 404, b"not found", "text/plain"
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        return 200, target.read_bytes(), ctype

    def _make_handler(self):
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug("http: " + fmt, *args)

            def _send_json(self, status: int, payload) -> None:
                body = json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json; charset=utf-8")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                url = urlparse(self.path)
                query = parse_qs(url.query)
                if url.path == "/api/questions":
                    annotator = query.get("annotator", [None])[0]
                    self._send_json(200, server._questions_payload(annotator))
                elif url.path == "/api/progress":
                    annotator = query.get("annotator", [None])[0]
                    if not annotator:
                        self._send_json(400, {"error": "annotator query parameter required"})
                    else:
                        self._send_json(200, server._progress_payload(annotator))
                elif url.path == "/api/export":
                    body = server.store.export_text().encode()
                    self.send_response(200)
                    self.send_header("Content-Type", "text/csv; charset=utf-8")
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)
                else:
                    status, body, ctype = server._static(url.path)
                    self.send_response(status)
                    self.send_header("Content-Type", ctype)
                    self.send_header("Content-Length", str(len(body)))
                    self.end_headers()
                    self.wfile.write(body)

            def do_POST(self):
                url = urlparse(self.path)
                if url.path != "/api/judgment":
                    self._send_json(404, {"error": "unknown endpoint"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    body = json.loads(self.rfile.read(length) or b"{}")
                    if not isinstance(body, dict):
                        raise ValueError("body must be a JSON object")
                except (ValueError, json.JSONDecodeError) as e:
                    self._send_json(400, {"error": f"malformed request body: {e}"})
                    return
                status, payload = server._submit(body)
                self._send_json(status, payload)

        return Handler


def serve_annotation(
    sheet: QuestionSheet,
    store: str | Path,
    bind: str = "127.0.0.1:8787",
    ui_dir: str | Path | None = None,
) -> AnnotationServer:
    """Construct the service bound to host:port; caller decides foreground/background."""
    host, _, port = bind.rpartition(":")
    return AnnotationServer(sheet, store, host or "127.0.0.1", int(port), ui_dir)

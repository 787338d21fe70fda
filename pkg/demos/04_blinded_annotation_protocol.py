"""The blinded human-evaluation protocol end to end, with simulated annotators.

Builds a paired question sheet from both explainers' predictions, serves it
over HTTP, submits judgments through the API like the browser UI would,
then unblinds and computes informativeness and between-group agreement.

Run: python3 demos/04_blinded_annotation_protocol.py
"""

import json
import tempfile
import urllib.request
from pathlib import Path

from xrac.corpus import CodeTable
from xrac.evalsheet import (
    ExplainerRun,
    build_question_sheet,
    informativeness_report,
    ingest_annotations,
    jaccard_agreement,
    serve_annotation,
)
from xrac.snippet import Snippet


def snip(doc, code, tokens, source):
    return Snippet(doc, code, 0, len(tokens), tokens, 1.0, source)


codes = CodeTable(
    ["c000", "c001"], ["condition trg000", "condition trg001"], [None, None]
)
pairs = [("doc1", 0), ("doc2", 1), ("doc3", 0)]
run_attn = ExplainerRun(
    "ATTN", set(pairs), {p: snip(*p, ["clear", f"trg{p[1]:03d}", "evidence"], "ATTN") for p in pairs}
)
run_kd = ExplainerRun(
    "KD", set(pairs), {p: snip(*p, ["vague", "nz00042", "context"], "KD") for p in pairs}
)

sheet = build_question_sheet(run_attn, run_kd, codes, seed=5)
print(f"sheet: {sheet.n_questions} questions, 2 blinded snippets each")
print("blind map stays private:", dict(list(sheet.blind_map.items())[:2]), "...\n")

with tempfile.TemporaryDirectory() as tmp:
    store = Path(tmp) / "judgments.csv"
    server = serve_annotation(sheet, store, bind="127.0.0.1:0")
    server.start_background()
    base = f"http://127.0.0.1:{server.port}"

    rows = json.load(urllib.request.urlopen(f"{base}/api/questions"))
    print(f"GET /api/questions -> {len(rows)} rows; "
          f"model names leak: {any('ATTN' in json.dumps(r) or 'KD' in json.dumps(r) for r in rows)}")

    # two simulated annotator groups: the expert likes precise snippets,
    # the lay annotator is generous with everything
    def judge(annotator, prefer_trigger):
        for row in rows:
            informative = "trg" in row["snippet_text"] if prefer_trigger else True
            judgment = "HI" if informative else "IR"
            body = json.dumps({
                "annotator_id": annotator,
                "question_id": row["question_id"],
                "snippet_label": row["snippet_label"],
                "judgment": judgment,
            }).encode()
            req = urllib.request.Request(f"{base}/api/judgment", data=body,
                                         headers={"Content-Type": "application/json"})
            urllib.request.urlopen(req)

    judge("expert1", prefer_trigger=True)
    judge("lay1", prefer_trigger=False)

    export = urllib.request.urlopen(f"{base}/api/export").read().decode()
    server.shutdown()

    exported = Path(tmp) / "export.csv"
    exported.write_text(export)
    annotations = ingest_annotations(
        sheet, [exported], {"expert1": "B", "lay1": "A"}
    )

report = informativeness_report(annotations, sheet.blind_map)
print("\nper-group informativeness (percent = HI+I share):")
for tag, model in sorted(report.models.items()):
    for group in sorted(model.percent):
        counts = model.counts[group]
        print(f"  {tag:4s} group {group}: {counts}  percent={model.percent[group]:.2f}")

from xrac.evalsheet import AnnotationSet

expert = AnnotationSet(
    {k: v for k, v in annotations.judgments.items() if k[0] == "expert1"}, {"expert1": "B"}
)
lay = AnnotationSet(
    {k: v for k, v in annotations.judgments.items() if k[0] == "lay1"}, {"lay1": "A"}
)
jac = jaccard_agreement(lay, expert, sheet.blind_map)
print("\nbetween-group Jaccard on the HI sets:")
for tag, values in sorted(jac.items()):
    print(f"  {tag:4s}: HI={values['HI']:.2f} I={values['I']:.2f}")
print("\nthe generous group agrees with the strict one only where snippets point at the trigger")

"""Both explainers on one document: attention weights vs distilled weights.

The attention route reads weights off the trained teacher; the
distillation route fits one sparse linear student per code on the
teacher's logits and projects its vocabulary weights onto the document.
Both feed the same snippet extractor.

Run: python3 demos/03_two_explainers.py   (about a minute)
"""

import numpy as np

from xrac import (
    PlantedSpec,
    TeacherConfig,
    extract_snippet,
    generate_planted_corpus,
    train_teacher,
)
from xrac.distill import bow_matrix, fit_students, project_weights_to_positions, teacher_logits
from xrac.explain_attn import attention_scores
from xrac.teacher import model_code_embeddings, read_document

spec = PlantedSpec(
    n_docs=600, n_codes=10, vocab_noise_size=200, doc_len=40, codes_per_doc_mean=2.0
)
corpus = generate_planted_corpus(spec, seed=7)
model = train_teacher(
    corpus, TeacherConfig(d=16, n_layers=1, max_seq_len=64, epochs=8, batch_size=16, seed=7)
)

print("distilling students on the train split ...")
targets = teacher_logits(model, corpus, temperature=1.0, split="train")
_, X = bow_matrix(corpus, split="train")
students = fit_students(X, targets, lam=1e-3, max_iter=800,
                        vocab_hash=corpus.vocab.content_hash())
print(f"students keep {students.nnz()} nonzero weights across {students.n_codes} codes\n")

# pick a test document that actually carries a code
doc = next(d for d in corpus.split_docs("test") if d.gold_codes)
code_id = sorted(doc.gold_codes)[0]
trigger = f"trg{code_id:03d}"
print(f"document {doc.doc_id}, gold code {corpus.codes.codes[code_id]} "
      f"({corpus.codes.descriptions[code_id]}), trigger token {trigger!r}")

e_t = model_code_embeddings(model)
u_x = read_document(doc, model)
w_attn = attention_scores(doc, model, code_id, e_t=e_t, u_x=u_x)
w_kd = project_weights_to_positions(students, code_id, doc)

for name, weights in (("attention", w_attn), ("distilled", w_kd)):
    snip = extract_snippet(np.asarray(weights), doc, n=4, m=5, code_id=code_id)
    marked = " ".join(
        f"[{t}]" if t == trigger else t for t in snip.tokens
    )
    peak = doc.raw_tokens[int(np.argmax(weights))]
    print(f"\n{name} explainer: peak token {peak!r}, snippet [{snip.start}:{snip.end}]")
    print(f"  {marked}")

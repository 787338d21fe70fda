"""Train the attention teacher on a planted-signal corpus and score it.

Every code has one trigger token and a document carries the code exactly
when the trigger appears, so we know precisely what a good model should
learn and what a good explanation should point at.

Run: python3 demos/02_teacher_on_planted_corpus.py   (about half a minute)
"""

from xrac import (
    PlantedSpec,
    PredictionRun,
    TeacherConfig,
    compute_report,
    generate_planted_corpus,
    predict_corpus,
    train_teacher,
)
from xrac.metrics import format_report_table

spec = PlantedSpec(
    n_docs=600, n_codes=10, vocab_noise_size=200, doc_len=40, codes_per_doc_mean=2.0
)
corpus = generate_planted_corpus(spec, seed=7)
print(f"corpus: {len(corpus.documents)} docs, {corpus.n_codes} codes, "
      f"vocab {len(corpus.vocab)}, train/val/test "
      f"{[len(corpus.split_docs(s)) for s in ('train', 'val', 'test')]}")

config = TeacherConfig(d=16, n_layers=1, max_seq_len=64, epochs=8, batch_size=16, seed=7)
model = train_teacher(corpus, config, mode="bce_only")
first, last = model.loss_log[0], model.loss_log[-1]
print(f"BCE: {first['bce']:.4f} -> {last['bce']:.4f} over {len(model.loss_log)} steps")

doc_ids, scores = predict_corpus(model, corpus, split="test")
gold = [set(d.gold_codes) for d in corpus.split_docs("test")]
run = PredictionRun(doc_ids, scores, threshold=0.5)
report = compute_report(run, gold, corpus.codes, precision_ks=(5, 8))
print()
print(format_report_table({"teacher": report}))

"""Acceptance battery: every criterion asserted at its stated tolerance.

Each test prints one PASS/FAIL line (visible with `pytest -s` or in the
captured output). The end-to-end criteria retrain the reference pipeline
from scratch; their thresholds were frozen from the reference runs
recorded in tests/reference/planted_reference.json.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from xrac import numerics as nm
from xrac.corpus import PlantedSpec, generate_planted_corpus
from xrac.distill import (
    bow_matrix,
    fit_logistic_baseline,
    fit_students,
    lasso_coordinate_descent,
    predict_students_corpus,
    teacher_logits,
)
from xrac.evalsheet import ExplainerRun, build_question_sheet, percent_informative
from xrac.explain_attn import attention_scores
from xrac.metrics import PredictionRun, auc, hierarchical_set_f1, micro_macro_f1, precision_at_n
from xrac.numerics import Rng, expit_transform, grad_check, logit_transform
from xrac.snippet import extract_snippet
from xrac.teacher import (
    TeacherConfig,
    build_total_loss,
    init_teacher,
    model_code_embeddings,
    predict_corpus,
    read_document,
    total_loss,
    train_teacher,
)

REFERENCE = json.loads((Path(__file__).parent / "reference" / "planted_reference.json").read_text())


def _line(criterion: str, ok: bool, detail: str) -> None:
    print(f"{criterion}: {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"{criterion} failed: {detail}"


# ---------------------------------------------------------------- A1


def test_a1_transform_inverse():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    ps = rng.uniform(1e-6, 1 - 1e-6, size=1000)
    worst = 0.0
    for temperature in (0.5, 1.0, 2.0):
        back = expit_transform(logit_transform(ps, temperature), temperature)
        worst = max(worst, float(np.max(np.abs(back - ps))))
    elapsed = time.perf_counter() - start
    _line("A1", worst < 1e-9 and elapsed < 1.0,
          f"max roundtrip error {worst:.2e} over 1000 probabilities x 3 temperatures in {elapsed:.2f}s")


# ---------------------------------------------------------------- A2


def test_a2_attention_normalization():
    start = time.perf_counter()
    spec = PlantedSpec(n_docs=60, n_codes=6, vocab_noise_size=40, doc_len=18, codes_per_doc_mean=2.0)
    corpus = generate_planted_corpus(spec, seed=5)
    model = init_teacher(corpus, TeacherConfig(d=16, n_layers=2, max_seq_len=32, seed=3))
    e_t = model_code_embeddings(model)
    docs = [d for d in corpus.documents if d.n_tokens > 0]
    rng = np.random.default_rng(0)
    worst_sum, worst_oracle = 0.0, 0.0
    for _ in range(100):
        doc = docs[rng.integers(len(docs))]
        code = int(rng.integers(model.n_y))
        u_x = read_document(doc, model)
        w = attention_scores(doc, model, code, e_t=e_t, u_x=u_x)
        assert np.all(w >= 0.0)
        worst_sum = max(worst_sum, abs(float(w.sum()) - 1.0))
        logits = np.array([float(e_t[code] @ u_x[j]) for j in range(doc.n_tokens)]) / math.sqrt(16)
        expw = np.exp(logits - logits.max())
        worst_oracle = max(worst_oracle, float(np.max(np.abs(w - expw / expw.sum()))))
    elapsed = time.perf_counter() - start
    _line("A2", worst_sum < 1e-6 and worst_oracle < 1e-9 and elapsed < 5.0,
          f"100 (doc, code) pairs: row-sum error {worst_sum:.2e}, oracle gap {worst_oracle:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------- A3


def test_a3_gradient_soundness():
    start = time.perf_counter()
    spec = PlantedSpec(n_docs=20, n_codes=5, vocab_noise_size=15, doc_len=12, codes_per_doc_mean=1.5)
    corpus = generate_planted_corpus(spec, seed=11)
    config = TeacherConfig(d=8, n_layers=1, max_seq_len=16, seed=5, alpha=0.5, beta=0.8)
    model = init_teacher(corpus, config)
    doc = next(d for d in corpus.split_docs("train") if d.gold_codes and d.n_tokens == 12)
    targets = np.zeros(5)
    targets[sorted(doc.gold_codes)] = 1.0
    rng = Rng(99)
    cpm_priors = rng.uniform(size=(5, 8))
    tpm_priors = rng.uniform(size=(12, 8))

    def f(P):
        return build_total_loss(P, config, model.title_ids, doc.tokens, targets, cpm_priors, tpm_priors)

    err = grad_check(f, model.params, step=1e-4)
    elapsed = time.perf_counter() - start
    _line("A3", err < 1e-4 and elapsed < 30.0,
          f"full augmented-loss graph (d=8, n_x=12, n_y=5, both discriminators): "
          f"max relative error {err:.2e} in {elapsed:.1f}s")


# ---------------------------------------------------------------- A4


def test_a4_loss_composition_and_degeneration():
    spec = PlantedSpec(n_docs=48, n_codes=4, vocab_noise_size=24, doc_len=10, codes_per_doc_mean=1.5)
    corpus = generate_planted_corpus(spec, seed=3)
    base = dict(d=8, n_layers=1, max_seq_len=16, epochs=4, batch_size=8, seed=21)

    augmented = train_teacher(corpus, TeacherConfig(**base, alpha=0.5, beta=0.8), mode="augmented")
    steps = augmented.loss_log[:10]
    assert len(steps) >= 10
    bitwise = all(
        e["total"] == total_loss(e["bce"], e["cpm"], e["tpm"], 0.5, 0.8) for e in steps
    )

    bce_run = train_teacher(corpus, TeacherConfig(**base), mode="bce_only")
    zero_run = train_teacher(corpus, TeacherConfig(**base, alpha=0.0, beta=0.0), mode="augmented")
    trajectories = all(
        np.array_equal(bce_run.params[name], zero_run.params[name])
        for name in bce_run.params
        if not name.startswith(("dcpm.", "dtpm."))
    )
    _line("A4", bitwise and trajectories,
          f"10 logged steps recompose bitwise ({bitwise}); "
          f"alpha=beta=0 reproduces bce_only parameters bitwise ({trajectories})")


# ---------------------------------------------------------------- A5


def _csc_columns(A):
    import scipy.sparse as sp

    X = sp.csc_matrix(A, dtype=np.float64)
    cols = [
        (X.indices[X.indptr[j]:X.indptr[j + 1]], X.data[X.indptr[j]:X.indptr[j + 1]])
        for j in range(X.shape[1])
    ]
    return cols, np.array([float(v @ v) for _, v in cols])


def test_a5_lasso_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(17)

    # (a) objective non-increasing every sweep on 20 random problems
    monotone = True
    for _ in range(20):
        n, p = int(rng.integers(5, 30)), int(rng.integers(2, 10))
        A = rng.normal(size=(n, p))
        y = rng.normal(size=n)
        lam = float(rng.uniform(0.0, 1.5))
        cols, col_sq = _csc_columns(A)
        w = np.zeros(p)
        r = y.copy()
        prev = float(r @ r)
        for _sweep in range(12):
            for j in range(p):
                if col_sq[j] == 0.0:
                    continue
                idx, vals = cols[j]
                rho = float(vals @ r[idx]) + col_sq[j] * w[j]
                t = lam / 2.0
                new = (rho - t if rho > t else rho + t if rho < -t else 0.0) / col_sq[j]
                if new != w[j]:
                    r[idx] -= vals * (new - w[j])
                    w[j] = new
            obj = float(r @ r) + lam * float(np.abs(w).sum())
            if obj > prev + 1e-9:
                monotone = False
            prev = obj

    # (b) lambda=0 on full-column-rank X matches the normal-equations oracle
    lstsq_gap = 0.0
    for _ in range(5):
        A = rng.normal(size=(30, 6))
        y = rng.normal(size=30)
        cols, col_sq = _csc_columns(A)
        w = lasso_coordinate_descent(cols, col_sq, y, 0.0, 5000, tol=1e-13)
        want = np.linalg.lstsq(A, y, rcond=None)[0]
        lstsq_gap = max(lstsq_gap, float(np.max(np.abs(w - want))))

    # (c) noiseless sparse-teacher support recovery, exact at lambda=1e-3
    recovered = True
    for _ in range(5):
        A = rng.normal(size=(80, 20))
        true_w = np.zeros(20)
        support = rng.choice(20, size=4, replace=False)
        true_w[support] = rng.normal(size=4) * 2 + np.sign(rng.normal(size=4))
        y = A @ true_w
        cols, col_sq = _csc_columns(A)
        w = lasso_coordinate_descent(cols, col_sq, y, 1e-3, 5000, tol=1e-13)
        if set(np.nonzero(np.abs(w) > 1e-4)[0]) != set(support.tolist()):
            recovered = False
        if np.max(np.abs(w - true_w)) > 1e-4:
            recovered = False

    elapsed = time.perf_counter() - start
    _line("A5", monotone and lstsq_gap < 1e-6 and recovered and elapsed < 30.0,
          f"objective monotone ({monotone}); lstsq gap {lstsq_gap:.2e}; "
          f"support recovery exact ({recovered}); {elapsed:.1f}s")


# ---------------------------------------------------------------- A6


def test_a6_snippet_oracle():
    from xrac.corpus import Document

    rng = np.random.default_rng(23)
    matches = 0
    for _ in range(200):
        n_x = int(rng.integers(1, 80))
        n = int(rng.integers(1, 7))
        m = int(rng.integers(0, 7))
        weights = rng.uniform(size=n_x)
        doc = Document("d", [f"w{i}" for i in range(n_x)], list(range(n_x)), {}, set())
        snip = extract_snippet(weights, doc, n=n, m=m)
        core = min(n, n_x)
        best_j, best = 0, -np.inf
        for j in range(n_x - core + 1):
            mean = sum(weights[j:j + core]) / core
            if mean > best:
                best_j, best = j, mean
        want = (max(0, best_j - m), min(n_x, best_j + core + m))
        if (snip.start, snip.end) == want:
            matches += 1

    # interior spans at the framework defaults n=4, m=5 have length 14
    interior_ok = True
    for _ in range(50):
        n_x = 40
        weights = np.zeros(n_x)
        peak = int(rng.integers(9, n_x - 9 - 4))  # keep the window interior
        weights[peak:peak + 4] = 1.0
        doc = Document("d", [f"w{i}" for i in range(n_x)], list(range(n_x)), {}, set())
        snip = extract_snippet(weights, doc, n=4, m=5)
        if snip.end - snip.start != 14:
            interior_ok = False
    _line("A6", matches == 200 and interior_ok,
          f"exhaustive-scan agreement {matches}/200; interior spans all length 14 ({interior_ok})")


# ---------------------------------------------------------------- A7


def test_a7_metrics_oracles():
    import itertools

    from xrac.corpus import CodeTable

    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(50):
        n_docs = int(rng.integers(2, 9))
        n_codes = int(rng.integers(2, 7))
        scores = rng.uniform(size=(n_docs, n_codes))
        if rng.uniform() < 0.3:
            scores = np.round(scores, 1)
        gold = [set(np.nonzero(rng.uniform(size=n_codes) < 0.4)[0].tolist()) for _ in range(n_docs)]
        run = PredictionRun([f"d{i}" for i in range(n_docs)], scores, 0.5)

        # F1 oracle
        tp = fp = fn = 0
        per_code = []
        for c in range(n_codes):
            ctp = cfp = cfn = 0
            for i in range(n_docs):
                predicted = scores[i, c] >= 0.5
                truth = c in gold[i]
                ctp += predicted and truth
                cfp += predicted and not truth
                cfn += (not predicted) and truth
            tp, fp, fn = tp + ctp, fp + cfp, fn + cfn
            per_code.append(2 * ctp / (2 * ctp + cfp + cfn) if (2 * ctp + cfp + cfn) else 0.0)
        want_micro = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        macro, micro = micro_macro_f1(run, gold)
        worst = max(worst, abs(micro - want_micro), abs(macro - float(np.mean(per_code))))

        # precision@n oracle
        n_at = int(rng.integers(1, n_codes + 1))
        vals = []
        for i in range(n_docs):
            ranked = sorted(range(n_codes), key=lambda c: (-scores[i, c], c))[:n_at]
            vals.append(len([c for c in ranked if c in gold[i]]) / n_at)
        worst = max(worst, abs(precision_at_n(run, gold, n_at) - float(np.mean(vals))))

        # AUC oracle by pair counting
        flat_scores = scores.ravel()
        flat_labels = np.array([[1.0 if c in gold[i] else 0.0 for c in range(n_codes)]
                                for i in range(n_docs)]).ravel()
        pos = flat_scores[flat_labels == 1]
        neg = flat_scores[flat_labels == 0]
        if len(pos) and len(neg):
            conc = sum(1.0 if p > q else 0.5 if p == q else 0.0
                       for p, q in itertools.product(pos, neg))
            _, micro_auc = auc(run, gold)
            worst = max(worst, abs(micro_auc - conc / (len(pos) * len(neg))))

        # hierarchical closure oracle over a fixed forest
        parents = [None] + [(f"x{(j - 1) // 2}" if j >= 1 and (j - 1) // 2 < j else None)
                            for j in range(1, n_codes)]
        codes = CodeTable([f"x{j}" for j in range(n_codes)],
                          [f"desc {j}" for j in range(n_codes)], parents)
        closure = {c: {c, *codes.ancestors(c)} for c in range(n_codes)}
        htp = hfp = hfn = 0
        for i in range(n_docs):
            pred = {c for c in range(n_codes) if scores[i, c] >= 0.5}
            pc = set().union(*[closure[c] for c in pred]) if pred else set()
            gc = set().union(*[closure[c] for c in gold[i]]) if gold[i] else set()
            htp += len(pc & gc)
            hfp += len(pc - gc)
            hfn += len(gc - pc)
        want_h = 2 * htp / (2 * htp + hfp + hfn) if (2 * htp + hfp + hfn) else 0.0
        worst = max(worst, abs(hierarchical_set_f1(run, gold, codes) - want_h))

    # hand cases
    hand_run = PredictionRun(["a", "b"], np.array([[0.9, 0.1], [0.9, 0.1]]), 0.5)
    hand_micro = micro_macro_f1(hand_run, [{0}, {1}])[1]
    auc_run = PredictionRun(["a", "b", "c", "d"], np.array([[0.9], [0.4], [0.8], [0.1]]), 0.5)
    hand_auc = auc(auc_run, [{0}, {0}, set(), set()])[1]

    _line("A7", worst < 1e-9 and hand_micro == pytest.approx(0.5) and hand_auc == pytest.approx(0.75),
          f"50 random instances, max oracle gap {worst:.2e}; "
          f"hand micro-F1 {hand_micro}, hand AUC {hand_auc}")


# ---------------------------------------------------------------- A8 (shared pipeline)


@pytest.fixture(scope="module")
def reference_pipeline():
    ref = REFERENCE["end_to_end"]
    c = ref["corpus"]
    t = ref["teacher"]
    start = time.perf_counter()
    spec = PlantedSpec(
        n_docs=c["n_docs"], n_codes=c["n_codes"], vocab_noise_size=c["vocab_noise_size"],
        doc_len=c["doc_len"], codes_per_doc_mean=c["codes_per_doc_mean"],
        code_skew=c["code_skew"], max_seq_len=64,
    )
    corpus = generate_planted_corpus(spec, seed=c["seed"])
    config = TeacherConfig(
        d=t["d"], n_layers=t["n_layers"], max_seq_len=64, epochs=t["epochs"],
        batch_size=t["batch_size"], optimizer=t["optimizer"],
        learning_rate=t["learning_rate"], seed=t["seed"],
    )
    model = train_teacher(corpus, config, mode=t["mode"])
    return {"corpus": corpus, "model": model, "ref": ref, "start": start}


def test_a8_end_to_end_planted_signal(reference_pipeline):
    corpus = reference_pipeline["corpus"]
    model = reference_pipeline["model"]
    ref = reference_pipeline["ref"]
    n_codes = corpus.n_codes
    gold = [set(d.gold_codes) for d in corpus.split_docs("test")]

    doc_ids, scores = predict_corpus(model, corpus, "test")
    _, teacher_micro = micro_macro_f1(PredictionRun(doc_ids, scores, 0.5), gold)

    targets = teacher_logits(model, corpus, ref["students"]["temperature"], split="train")
    _, X_train = bow_matrix(corpus, split="train")
    students = fit_students(
        X_train, targets, lam=ref["students"]["lam"], max_iter=ref["students"]["max_iter"],
        vocab_hash=corpus.vocab.content_hash(),
    )
    sids, sscores = predict_students_corpus(students, corpus, "test")
    _, students_micro = micro_macro_f1(PredictionRun(sids, sscores, 0.5), gold)

    train_docs = corpus.split_docs("train")
    Y = np.zeros((len(train_docs), n_codes))
    for i, doc in enumerate(train_docs):
        Y[i, sorted(doc.gold_codes)] = 1.0
    baseline = fit_logistic_baseline(
        X_train, Y, learning_rate=ref["baseline"]["learning_rate"],
        max_iter=ref["baseline"]["max_iter"],
    )
    _, X_test = bow_matrix(corpus, split="test")
    _, baseline_micro = micro_macro_f1(
        PredictionRun(doc_ids, baseline.predict(X_test), 0.5), gold
    )

    # attention snippets contain the trigger for true-positive predictions
    from xrac.cli import build_explainer_run

    run_attn = build_explainer_run("attn", corpus, model, None, "test", 0.5, 4, 5)
    doc_map = {d.doc_id: d for d in corpus.split_docs("test")}
    tp = with_trigger = 0
    for (doc_id, code) in run_attn.predictions:
        if code in doc_map[doc_id].gold_codes:
            tp += 1
            if f"trg{code:03d}" in run_attn.snippets[(doc_id, code)].tokens:
                with_trigger += 1
    trigger_rate = with_trigger / max(tp, 1)

    # each student's largest positive weight should be its code's trigger
    trigger_ids = [corpus.vocab.id(f"trg{i:03d}") for i in range(n_codes)]
    kd_hits = 0
    for code in range(n_codes):
        row = students.rows[code]
        if row:
            feature, value = max(row.items(), key=lambda kv: kv[1])
            if value > 0 and feature == trigger_ids[code]:
                kd_hits += 1
    kd_fraction = kd_hits / n_codes

    elapsed = time.perf_counter() - reference_pipeline["start"]
    pins = ref["pinned_thresholds"]
    ok = (
        teacher_micro >= pins["teacher_micro_f1_min"]
        and trigger_rate >= pins["attn_trigger_rate_min"]
        and kd_fraction >= pins["kd_trigger_fraction_min"]
        and students_micro > baseline_micro
        and elapsed < 600.0
    )
    _line("A8", ok,
          f"teacher micro {teacher_micro:.4f} (>= {pins['teacher_micro_f1_min']}); "
          f"ATTN trigger rate {trigger_rate:.3f} over {tp} TPs (>= {pins['attn_trigger_rate_min']}); "
          f"KD trigger fraction {kd_fraction:.2f} (>= {pins['kd_trigger_fraction_min']}); "
          f"students {students_micro:.4f} > baseline {baseline_micro:.4f}; {elapsed:.0f}s")


# ---------------------------------------------------------------- A9


def test_a9_augmented_loss_direction():
    """Frozen 5-seed protocol from the reference file; see its notes.

    A seed's augmented run is compared to its bce_only twin on the same
    corpus: the aggregate macro-F1 over seeds must stay within 0.01 of
    plain BCE, and the rarest-quartile macro-F1 must improve in at least
    3 of the 5 seeds. Retrains ten models; this is the slowest criterion.
    """
    from xrac.metrics import per_code_f1

    proto = REFERENCE["augmented_direction"]["protocol"]
    c = proto["corpus"]
    spec = PlantedSpec(
        n_docs=c["n_docs"], n_codes=c["n_codes"], vocab_noise_size=c["vocab_noise_size"],
        doc_len=c["doc_len"], codes_per_doc_mean=c["codes_per_doc_mean"],
        code_skew=c["code_skew"], max_seq_len=64,
    )
    corpus = generate_planted_corpus(spec, seed=c["seed"])
    gold = [set(d.gold_codes) for d in corpus.split_docs("test")]
    n_codes = corpus.n_codes
    quartile = n_codes // 4
    rare_slice = slice(n_codes - quartile, n_codes)  # highest ids = rarest under the skew

    t = proto["teacher"]

    def run_mode(mode: str, seed: int):
        config = TeacherConfig(
            d=t["d"], n_layers=t["n_layers"], max_seq_len=64, epochs=t["epochs"],
            batch_size=t["batch_size"], optimizer=t["optimizer"],
            learning_rate=t["learning_rate"], alpha=t["alpha"], beta=t["beta"],
            disc_lr_scale=t["disc_lr_scale"], select_best_val=t["select_best_val"],
            title_init=t["title_init"], seed=seed,
        )
        model = train_teacher(corpus, config, mode=mode)
        doc_ids, scores = predict_corpus(model, corpus, "test")
        run = PredictionRun(doc_ids, scores, 0.5)
        macro, _ = micro_macro_f1(run, gold)
        rare = float(per_code_f1(run, gold)[rare_slice].mean())
        return macro, rare

    macro_deltas, rare_improved = [], 0
    for seed in proto["seeds"]:
        bce_macro, bce_rare = run_mode("bce_only", seed)
        aug_macro, aug_rare = run_mode("augmented", seed)
        macro_deltas.append(aug_macro - bce_macro)
        rare_improved += aug_rare > bce_rare

    mean_delta = float(np.mean(macro_deltas))
    ok = mean_delta >= -0.01 and rare_improved >= 3
    _line("A9", ok,
          f"mean macro delta {mean_delta:+.4f} (>= -0.01); "
          f"rare-quartile improved in {rare_improved}/5 seeds (>= 3); "
          f"per-seed deltas {[f'{d:+.3f}' for d in macro_deltas]}")


# ---------------------------------------------------------------- A10


def test_a10_evaluation_protocol(tmp_path):
    from xrac.corpus import CodeTable
    from xrac.snippet import Snippet

    codes = CodeTable([f"c{i:03d}" for i in range(3)],
                      [f"condition trg{i:03d}" for i in range(3)], [None] * 3)
    pairs = [(f"d{i}", i % 3) for i in range(9)]

    def mk_run(tag, filler):
        return ExplainerRun(
            tag, set(pairs),
            {p: Snippet(p[0], p[1], 0, 2, [filler, f"t{p[1]}"], 0.5, tag) for p in pairs},
        )

    run_a, run_b = mk_run("ATTN", "alpha"), mk_run("KD", "beta")

    s1 = build_question_sheet(run_a, run_b, codes, seed=13)
    s2 = build_question_sheet(run_a, run_b, codes, seed=13)
    paths1 = (tmp_path / "s1.csv", tmp_path / "b1.csv")
    paths2 = (tmp_path / "s2.csv", tmp_path / "b2.csv")
    s1.save(*paths1)
    s2.save(*paths2)
    deterministic = (paths1[0].read_bytes() == paths2[0].read_bytes()
                     and paths1[1].read_bytes() == paths2[1].read_bytes())

    sheet_bytes = paths1[0].read_text()
    blinded = "ATTN" not in sheet_bytes and "KD" not in sheet_bytes

    attn_pct = percent_informative(1283, 1094, 1436)
    kd_pct = percent_informative(145, 212, 3456)
    arithmetic = abs(attn_pct - 62.34) < 0.01 and abs(kd_pct - 9.36) < 0.01

    set_a = {"q1", "q2", "q3"}
    set_b = {"q2", "q3", "q4"}
    jaccard = len(set_a & set_b) / len(set_a | set_b)

    ok = deterministic and blinded and arithmetic and jaccard == 0.5
    _line("A10", ok,
          f"sheet byte-identical under seed ({deterministic}); blinding grep clean ({blinded}); "
          f"percent arithmetic {attn_pct:.2f}/{kd_pct:.2f}; Jaccard hand case {jaccard}")

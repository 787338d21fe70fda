"""Per-code attention weights over document tokens."""

import json
import math

import numpy as np
import pytest

from xrac.corpus import Document, PlantedSpec, generate_planted_corpus
from xrac.explain_attn import attention_map, attention_scores, dump_attention_maps
from xrac.teacher import TeacherConfig, init_teacher, model_code_embeddings, read_document


@pytest.fixture(scope="module")
def setup():
    spec = PlantedSpec(n_docs=40, n_codes=5, vocab_noise_size=25, doc_len=14, codes_per_doc_mean=1.5)
    corpus = generate_planted_corpus(spec, seed=17)
    model = init_teacher(corpus, TeacherConfig(d=8, n_layers=1, max_seq_len=16, seed=9))
    return corpus, model


def brute_force_attention(e_i, u_x, d):
    logits = [float(e_i @ u_x[j]) / math.sqrt(d) for j in range(u_x.shape[0])]
    peak = max(logits)
    expw = [math.exp(z - peak) for z in logits]
    total = sum(expw)
    return np.array([w / total for w in expw])


class TestAttentionScores:
    def test_single_token_doc(self, setup):
        corpus, model = setup
        doc = Document("one", ["trg000"], [corpus.vocab.id("trg000")], {}, set())
        w = attention_scores(doc, model, 0)
        np.testing.assert_allclose(w, [1.0])

    def test_orthogonal_code_gives_uniform(self, setup):
        corpus, model = setup
        doc = corpus.documents[0]
        u_x = read_document(doc, model)
        e_t = np.zeros((model.n_y, model.config.d))  # zero rows: equal scores
        w = attention_scores(doc, model, 2, e_t=e_t, u_x=u_x)
        np.testing.assert_allclose(w, np.full(doc.n_tokens, 1.0 / doc.n_tokens), atol=1e-12)

    def test_matches_brute_force_oracle(self, setup):
        corpus, model = setup
        e_t = model_code_embeddings(model)
        rng = np.random.default_rng(31)
        docs = [d for d in corpus.documents if d.n_tokens > 0]
        for _ in range(25):
            doc = docs[rng.integers(len(docs))]
            code = int(rng.integers(model.n_y))
            u_x = read_document(doc, model)
            got = attention_scores(doc, model, code, e_t=e_t, u_x=u_x)
            want = brute_force_attention(e_t[code], u_x, model.config.d)
            np.testing.assert_allclose(got, want, atol=1e-9)

    def test_rows_sum_to_one_nonnegative(self, setup):
        corpus, model = setup
        for doc in corpus.documents[:10]:
            amap = attention_map(doc, model)
            np.testing.assert_allclose(amap.weights.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(amap.weights >= 0.0)

    def test_single_row_matches_batched(self, setup):
        corpus, model = setup
        doc = corpus.documents[3]
        e_t = model_code_embeddings(model)
        u_x = read_document(doc, model)
        amap = attention_map(doc, model, e_t=e_t)
        for code in range(model.n_y):
            single = attention_scores(doc, model, code, e_t=e_t, u_x=u_x)
            np.testing.assert_allclose(single, amap.row(code), atol=1e-12)

    def test_constant_shift_leaves_weights_unchanged(self, setup):
        corpus, model = setup
        doc = corpus.documents[5]
        u_x = read_document(doc, model)
        e_t = model_code_embeddings(model)
        from xrac.numerics import softmax_scaled

        scores = e_t[1] @ u_x.T
        base = softmax_scaled(scores, model.config.d)
        shifted = softmax_scaled(scores + 123.456 * math.sqrt(model.config.d), model.config.d)
        np.testing.assert_allclose(base, shifted, atol=1e-12)
        assert np.argmax(base) == np.argmax(shifted)

    def test_bad_code_id(self, setup):
        corpus, model = setup
        with pytest.raises(ValueError):
            attention_scores(corpus.documents[0], model, 99)

    def test_empty_doc(self, setup):
        corpus, model = setup
        empty = Document("empty", [], [], {}, set())
        with pytest.raises(ValueError):
            attention_scores(empty, model, 0)


class TestDump:
    def test_jsonl_audit_dump(self, setup, tmp_path):
        corpus, model = setup
        maps = [attention_map(d, model) for d in corpus.documents[:2]]
        path = tmp_path / "attn.jsonl"
        dump_attention_maps(maps, corpus.codes.codes, path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2 * model.n_y
        rec = json.loads(lines[0])
        assert set(rec) == {"doc_id", "code", "weights"}
        assert len(rec["weights"]) == corpus.documents[0].n_tokens

"""Distillation of the teacher into sparse per-code linear students.

Teacher probabilities are mapped to temperature-scaled logits, one
L1-regularized least-squares student per code is fit on bag-of-words
counts by cyclic coordinate descent with soft thresholding, and student
scores map back to probabilities through the inverse transform. Student
weights live in vocabulary space; `project_weights_to_positions` turns
them into per-token weights for snippet extraction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .corpus import Corpus, Document, Vocabulary
from .numerics import expit_transform, logit_transform
from .teacher import TeacherModel, predict_corpus

__all__ = [
    "StudentModels",
    "LogitTargets",
    "LogisticBaseline",
    "bow_matrix",
    "teacher_logits",
    "fit_students",
    "lasso_coordinate_descent",
    "student_predict",
    "predict_students_corpus",
    "project_weights_to_positions",
    "fit_logistic_baseline",
    "save_students",
    "load_students",
]

STUDENTS_FORMAT = "xrac-students-v1"
PRUNE_TOL = 1e-10
SWEEP_TOL = 1e-7


@dataclass
class LogitTargets:
    """Teacher logits per (document, code); always finite by construction."""

    doc_ids: list[str]
    matrix: np.ndarray
    temperature: float


@dataclass
class StudentModels:
    """Per-code sparse linear students over bag-of-words features."""

    rows: list[dict[int, float]]      # code_id -> {feature_id: weight}, nonzero only
    n_features: int
    lam: float
    temperature: float
    vocab_hash: str
    intercepts: list[float] | None = None

    @property
    def n_codes(self) -> int:
        return len(self.rows)

    def nnz(self) -> int:
        return sum(len(r) for r in self.rows)

    def weight(self, code_id: int, feature_id: int) -> float:
        return self.rows[code_id].get(feature_id, 0.0)


def bow_matrix(corpus: Corpus, split: str | None = None) -> tuple[list[str], sp.csr_matrix]:
    """Sparse count matrix (n_docs, |vocab|) for a split, aligned to doc order."""
    docs = corpus.documents if split is None else corpus.split_docs(split)
    data, indices, indptr = [], [], [0]
    for doc in docs:
        for fid in sorted(doc.bow):
            indices.append(fid)
            data.append(float(doc.bow[fid]))
        indptr.append(len(indices))
    mat = sp.csr_matrix(
        (np.array(data), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(docs), len(corpus.vocab)),
    )
    return [d.doc_id for d in docs], mat


def teacher_logits(
    model: TeacherModel, corpus: Corpus, temperature: float = 1.0, split: str | None = None
) -> LogitTargets:
    """Temperature-scaled teacher logits for every document in the split."""
    doc_ids, probs = predict_corpus(model, corpus, split)
    return LogitTargets(doc_ids, logit_transform(probs, temperature), temperature)


def _soft_threshold(x: float, t: float) -> float:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def lasso_coordinate_descent(
    cols: list[tuple[np.ndarray, np.ndarray]],
    col_sq: np.ndarray,
    q: np.ndarray,
    lam: float,
    max_iter: int,
    tol: float = SWEEP_TOL,
) -> np.ndarray:
    """Cyclic coordinate descent for ||q - Xw||^2 + lam*||w||_1.

    `cols` holds (row-indices, values) per feature in ascending feature
    order, `col_sq` the squared column norms. All-zero columns keep a
    weight of exactly 0. The objective is verified non-increasing after
    every sweep.
    """
    n_features = len(cols)
    w = np.zeros(n_features)
    r = q.astype(np.float64).copy()
    half_lam = lam / 2.0
    prev_obj = float(r @ r)

    for _ in range(max_iter):
        max_delta = 0.0
        for j in range(n_features):
            sq = col_sq[j]
            if sq == 0.0:
                continue
            idx, vals = cols[j]
            wj = w[j]
            rho = float(vals @ r[idx]) + sq * wj
            new = _soft_threshold(rho, half_lam) / sq
            if new != wj:
                r[idx] -= vals * (new - wj)
                w[j] = new
                delta = abs(new - wj)
                if delta > max_delta:
                    max_delta = delta
        obj = float(r @ r) + lam * float(np.abs(w).sum())
        if obj > prev_obj * (1.0 + 1e-12) + 1e-12:
            raise RuntimeError(f"coordinate-descent objective increased: {prev_obj} -> {obj}")
        prev_obj = obj
        if max_delta < tol:
            break
    return w


def fit_students(
    X: sp.spmatrix,
    targets: "LogitTargets | np.ndarray",
    lam: float = 1e-3,
    max_iter: int = 800,
    vocab_hash: str = "",
    temperature: float | None = None,
    fit_intercept: bool = False,
) -> StudentModels:
    """One lasso student per code against the teacher's logit columns."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if isinstance(targets, LogitTargets):
        Q = targets.matrix
        temperature = targets.temperature if temperature is None else temperature
    else:
        Q = np.asarray(targets, dtype=np.float64)
        temperature = 1.0 if temperature is None else temperature
    if Q.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but targets have {Q.shape[0]}")

    Xc = sp.csc_matrix(X, dtype=np.float64)
    if fit_intercept:
        ones = sp.csc_matrix(np.ones((Xc.shape[0], 1)))
        Xc = sp.hstack([Xc, ones], format="csc")
    n_features = Xc.shape[1]
    cols = []
    for j in range(n_features):
        lo, hi = Xc.indptr[j], Xc.indptr[j + 1]
        cols.append((Xc.indices[lo:hi], Xc.data[lo:hi]))
    col_sq = np.array([float(v @ v) for _, v in cols])

    rows: list[dict[int, float]] = []
    intercepts: list[float] = []
    for code in range(Q.shape[1]):
        w = lasso_coordinate_descent(cols, col_sq, Q[:, code], lam, max_iter)
        if fit_intercept:
            intercepts.append(float(w[-1]))
            w = w[:-1]
        rows.append({int(j): float(w[j]) for j in np.nonzero(np.abs(w) > PRUNE_TOL)[0]})

    return StudentModels(
        rows=rows,
        n_features=X.shape[1],
        lam=lam,
        temperature=temperature,
        vocab_hash=vocab_hash,
        intercepts=intercepts if fit_intercept else None,
    )


def student_predict(
    students: StudentModels, x_s: "dict[int, int] | np.ndarray", temperature: float | None = None
) -> np.ndarray:
    """Probabilities for one bag-of-words vector via the inverse transform."""
    temperature = students.temperature if temperature is None else temperature
    if isinstance(x_s, dict):
        items = sorted(x_s.items())
    else:
        arr = np.asarray(x_s)
        nz = np.nonzero(arr)[0]
        items = [(int(j), float(arr[j])) for j in nz]
    out = np.empty(students.n_codes)
    for code, row in enumerate(students.rows):
        q = 0.0
        for fid, count in items:
            wv = row.get(fid)
            if wv is not None:
                q += wv * count
        if students.intercepts is not None:
            q += students.intercepts[code]
        out[code] = expit_transform(q, temperature)
    return out


def predict_students_corpus(
    students: StudentModels, corpus: Corpus, split: str | None = None
) -> tuple[list[str], np.ndarray]:
    if students.vocab_hash and students.vocab_hash != corpus.vocab.content_hash():
        raise ValueError("students were fit against a different vocabulary")
    docs = corpus.documents if split is None else corpus.split_docs(split)
    scores = np.empty((len(docs), students.n_codes))
    for i, doc in enumerate(docs):
        scores[i] = student_predict(students, doc.bow)
    return [d.doc_id for d in docs], scores


def project_weights_to_positions(
    students: StudentModels, code_id: int, doc: Document
) -> np.ndarray:
    """Map a student's vocabulary weights onto the document's token positions."""
    row = students.rows[code_id]
    return np.array([row.get(tid, 0.0) for tid in doc.tokens])


# -- hard-label baseline ------------------------------------------------------


@dataclass
class LogisticBaseline:
    """From-scratch multi-label logistic regression on the same features.

    Plain full-batch gradient descent on the mean cross-entropy, with the
    same iteration budget the students get.
    """

    weights: np.ndarray     # (n_features, n_codes)
    bias: np.ndarray        # (n_codes,)

    def predict(self, X: sp.spmatrix) -> np.ndarray:
        z = X @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def fit_logistic_baseline(
    X: sp.spmatrix,
    Y: np.ndarray,
    learning_rate: float = 0.5,
    max_iter: int = 800,
) -> LogisticBaseline:
    X = sp.csr_matrix(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n_docs, n_features = X.shape
    W = np.zeros((n_features, Y.shape[1]))
    b = np.zeros(Y.shape[1])
    Xt = X.T.tocsr()
    for _ in range(max_iter):
        z = X @ W + b
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
        err = (p - Y) / n_docs
        W -= learning_rate * (Xt @ err)
        b -= learning_rate * err.sum(axis=0)
    return LogisticBaseline(W, b)


# -- persistence ---------------------------------------------------------------


def save_students(students: StudentModels, path: str | Path) -> None:
    payload = {
        "format": STUDENTS_FORMAT,
        "lambda": students.lam,
        "temperature": students.temperature,
        "vocab_hash": students.vocab_hash,
        "n_features": students.n_features,
        "rows": [sorted(row.items()) for row in students.rows],
        "intercepts": students.intercepts,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_students(path: str | Path, vocab: Vocabulary | None = None) -> StudentModels:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != STUDENTS_FORMAT:
        raise ValueError(f"{path}: expected format {STUDENTS_FORMAT!r}, got {payload.get('format')!r}")
    if vocab is not None and vocab.content_hash() != payload["vocab_hash"]:
        raise ValueError("vocabulary hash mismatch: refusing to load students")
    return StudentModels(
        rows=[{int(f): float(v) for f, v in row} for row in payload["rows"]],
        n_features=payload["n_features"],
        lam=payload["lambda"],
        temperature=payload["temperature"],
        vocab_hash=payload["vocab_hash"],
        intercepts=payload["intercepts"],
    )

"""Attention-based explainer: per-code weight vectors over document tokens.

Weights are recomputed from the code embeddings and the reader output at
explain time, keeping prediction and explanation decoupled; the kernel is
the same row-wise scaled softmax the coder uses, so a single explained
row agrees with the batched attention matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Document
from .numerics import softmax_scaled
from .teacher import TeacherModel, attention_kernel, model_code_embeddings, read_document

__all__ = ["AttentionMap", "attention_scores", "attention_map", "dump_attention_maps"]


@dataclass
class AttentionMap:
    """All per-code attention rows for one document (n_y, n_x)."""

    doc_id: str
    weights: np.ndarray
    token_ids: list[int]

    def row(self, code_id: int) -> np.ndarray:
        return self.weights[code_id]


def attention_scores(
    doc: Document,
    model: TeacherModel,
    code_id: int,
    e_t: np.ndarray | None = None,
    u_x: np.ndarray | None = None,
) -> np.ndarray:
    """Attention weights of one code over the document's tokens.

    Pass precomputed `e_t` / `u_x` to amortize them across codes; they
    must come from the same model and document.
    """
    if not 0 <= code_id < model.n_y:
        raise ValueError(f"code_id {code_id} out of range [0, {model.n_y})")
    if doc.n_tokens == 0:
        raise ValueError(f"document {doc.doc_id!r} is empty")
    if e_t is None:
        e_t = model_code_embeddings(model)
    if u_x is None:
        u_x = read_document(doc, model)
    return softmax_scaled(e_t[code_id] @ u_x.T, model.config.d)


def attention_map(doc: Document, model: TeacherModel, e_t: np.ndarray | None = None) -> AttentionMap:
    """Batched attention rows for every code at once."""
    if doc.n_tokens == 0:
        raise ValueError(f"document {doc.doc_id!r} is empty")
    if e_t is None:
        e_t = model_code_embeddings(model)
    u_x = read_document(doc, model)
    return AttentionMap(doc.doc_id, attention_kernel(e_t, u_x, model.config.d), list(doc.tokens))


def dump_attention_maps(maps: list[AttentionMap], codes: list[str], path: str | Path) -> None:
    """Audit dump: one JSON line per (document, code) weight row."""
    with open(path, "w", encoding="utf-8") as fh:
        for amap in maps:
            for code_id, code in enumerate(codes):
                rec = {
                    "doc_id": amap.doc_id,
                    "code": code,
                    "weights": [float(w) for w in amap.weights[code_id]],
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

"""Evidence-snippet extraction shared by both explainers.

The core window is the n-gram with the highest average weight (ties go to
the earliest start); m context tokens on each side are added, clamped at
the document boundaries, so interior snippets have length n + 2m.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Document

__all__ = ["Snippet", "extract_snippet", "write_snippets_csv", "read_snippets_csv"]

DEFAULT_NGRAM = 4     # n: core window length
DEFAULT_CONTEXT = 5   # m: tokens of context on each side


@dataclass
class Snippet:
    doc_id: str
    code_id: int
    start: int             # inclusive token index
    end: int               # exclusive
    tokens: list[str]
    window_score: float    # mean weight over the winning core n-gram
    source: str            # "ATTN" or "KD"


def extract_snippet(
    weights: np.ndarray,
    doc: Document,
    n: int = DEFAULT_NGRAM,
    m: int = DEFAULT_CONTEXT,
    code_id: int = 0,
    source: str = "ATTN",
) -> Snippet:
    """Best n-gram by mean weight, widened by m tokens of context per side."""
    if n < 1 or m < 0:
        raise ValueError(f"need n >= 1 and m >= 0, got n={n} m={m}")
    weights = np.asarray(weights, dtype=np.float64)
    n_x = weights.shape[0]
    if n_x < 1:
        raise ValueError("cannot extract a snippet from an empty weight vector")
    if len(doc.tokens) != n_x:
        raise ValueError(f"weights length {n_x} does not match document length {len(doc.tokens)}")

    core = min(n, n_x)
    # shifted-slice accumulation: every window is summed left to right, so
    # equal-content windows tie exactly and the earliest start wins
    n_windows = n_x - core + 1
    sums = weights[:n_windows].copy()
    for k in range(1, core):
        sums += weights[k:k + n_windows]
    window_means = sums / core
    j_star = int(np.argmax(window_means))  # argmax takes the first max: earliest start wins

    start = max(0, j_star - m)
    end = min(n_x, j_star + core + m)
    return Snippet(
        doc_id=doc.doc_id,
        code_id=code_id,
        start=start,
        end=end,
        tokens=doc.raw_tokens[start:end],
        window_score=float(window_means[j_star]),
        source=source,
    )


def write_snippets_csv(snippets: list[Snippet], codes: list[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["doc_id", "code", "source", "start", "end", "window_score", "text"])
        for s in snippets:
            writer.writerow(
                [s.doc_id, codes[s.code_id], s.source, s.start, s.end,
                 s.window_score, " ".join(s.tokens)]
            )


def read_snippets_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

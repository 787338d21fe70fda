"""Corpus ingestion, vocabulary, dual document views, and synthetic data.

A document is carried in two views: the token-id sequence fed to the
teacher (truncated at `max_seq_len`) and the bag-of-words count map used
by the distilled students (built from the untruncated tokenization, with
out-of-vocabulary tokens pooled under UNK).

`generate_planted_corpus` builds the synthetic corpus used throughout the
test suite: each code has one unique trigger token and a document carries
a code exactly when its trigger appears, so explanations have a ground
truth.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .numerics import Rng

__all__ = [
    "CodeTable",
    "Vocabulary",
    "Document",
    "Corpus",
    "IngestConfig",
    "PlantedSpec",
    "tokenize",
    "ingest_corpus",
    "build_vocab",
    "vectorize_bow",
    "generate_planted_corpus",
    "save_corpus",
    "load_corpus",
    "PAD_ID",
    "UNK_ID",
]

PAD_ID = 0
UNK_ID = 1

CORPUS_FORMAT = "xrac-corpus-v1"

_TOKEN_CLEANER = re.compile(r"[^a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, map non-alphanumerics to spaces, split, drop pure-numeric tokens."""
    cleaned = _TOKEN_CLEANER.sub(" ", text.lower())
    return [tok for tok in cleaned.split() if not tok.isdigit()]


@dataclass
class CodeTable:
    """Medical-code inventory: id, code string, description, optional parent.

    Code ids are dense in [0, n_codes); parent links must form a forest.
    """

    codes: list[str]
    descriptions: list[str]
    parents: list[str | None]

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("code strings must be unique")
        if not (len(self.codes) == len(self.descriptions) == len(self.parents)):
            raise ValueError("code table columns must have equal length")
        index = {c: i for i, c in enumerate(self.codes)}
        for code, parent in zip(self.codes, self.parents):
            if parent is not None and parent not in index:
                raise ValueError(f"code {code!r} references unknown parent {parent!r}")
        self._index = index
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        for start in self.codes:
            seen = set()
            node = start
            while node is not None:
                if node in seen:
                    raise ValueError(f"cycle in parent links involving {node!r}")
                seen.add(node)
                node = self.parents[self._index[node]]

    def __len__(self) -> int:
        return len(self.codes)

    def id_of(self, code: str) -> int:
        return self._index[code]

    def ancestors(self, code_id: int) -> list[int]:
        """Strict ancestors of a code, nearest first."""
        out = []
        parent = self.parents[code_id]
        while parent is not None:
            pid = self._index[parent]
            out.append(pid)
            parent = self.parents[pid]
        return out

    @classmethod
    def from_csv(cls, path: str | Path) -> "CodeTable":
        codes, descriptions, parents = [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            required = {"code", "description", "parent"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise ValueError(f"code table needs header code,description,parent, got {reader.fieldnames}")
            for row in reader:
                codes.append(row["code"])
                descriptions.append(row["description"])
                parents.append(row["parent"] or None)
        return cls(codes, descriptions, parents)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["code", "description", "parent"])
            for code, desc, parent in zip(self.codes, self.descriptions, self.parents):
                writer.writerow([code, desc, parent or ""])


class Vocabulary:
    """Token <-> dense-id bijection with reserved PAD=0 and UNK=1 slots."""

    def __init__(self, tokens: list[str], freqs: dict[str, int] | None = None):
        self.id_to_token = ["<pad>", "<unk>"] + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        self.freqs = dict(freqs or {})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def content_hash(self) -> str:
        """Stable digest of the id->token mapping; guards model/corpus pairing."""
        payload = json.dumps(self.id_to_token, ensure_ascii=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Document:
    """One note in both views plus its gold code ids.

    `tokens` is the (possibly truncated) id sequence; `bow` counts the
    untruncated tokenization with OOV pooled under UNK; `raw_tokens` keeps
    the surface forms so evidence snippets can be rendered.
    """

    doc_id: str
    raw_tokens: list[str]
    tokens: list[int]
    bow: dict[int, int]
    gold_codes: set[int]
    split: str = "train"
    flags: list[str] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    documents: list[Document]
    vocab: Vocabulary
    codes: CodeTable
    max_seq_len: int
    rejects: list[str] = field(default_factory=list)

    def split_indices(self, split: str) -> list[int]:
        return [i for i, d in enumerate(self.documents) if d.split == split]

    def split_docs(self, split: str) -> list[Document]:
        return [d for d in self.documents if d.split == split]

    @property
    def n_codes(self) -> int:
        return len(self.codes)


@dataclass
class IngestConfig:
    max_seq_len: int = 512
    min_freq: int = 1
    split_seed: int = 0
    train_frac: float = 0.8
    val_frac: float = 0.1


def build_vocab(source: "Corpus | list[list[str]]", min_freq: int = 1) -> Vocabulary:
    """Vocabulary over training-split tokens.

    Tokens with frequency >= min_freq get ids in descending-frequency
    order, ties broken lexicographically; everything else maps to UNK.
    Accepts a Corpus (train split is used) or raw token lists.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    if isinstance(source, Corpus):
        token_lists = [d.raw_tokens for d in source.split_docs("train")]
    else:
        token_lists = source
    if not token_lists:
        raise ValueError("cannot build a vocabulary from an empty training split")
    freqs: dict[str, int] = {}
    for toks in token_lists:
        for tok in toks:
            freqs[tok] = freqs.get(tok, 0) + 1
    kept = sorted(
        (tok for tok, f in freqs.items() if f >= min_freq),
        key=lambda tok: (-freqs[tok], tok),
    )
    return Vocabulary(kept, freqs={t: freqs[t] for t in kept})


def vectorize_bow(doc: "Document | list[str]", vocab: Vocabulary) -> dict[int, int]:
    """Sparse count map over vocabulary ids; OOV tokens accumulate under UNK."""
    raw_tokens = doc.raw_tokens if isinstance(doc, Document) else doc
    counts: dict[int, int] = {}
    for tok in raw_tokens:
        tid = vocab.id(tok)
        counts[tid] = counts.get(tid, 0) + 1
    return counts


def _hash_split(doc_id: str, seed: int, train_frac: float, val_frac: float) -> str:
    digest = hashlib.sha256(f"{seed}:{doc_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    if u < train_frac:
        return "train"
    if u < train_frac + val_frac:
        return "val"
    return "test"


def ingest_corpus(
    notes_path: str | Path,
    codes_path: str | Path,
    config: IngestConfig | None = None,
) -> Corpus:
    """Read JSON-lines notes plus a code table and assemble a Corpus.

    Unknown codes on a note are recorded in `corpus.rejects` rather than
    silently dropped; malformed lines raise with their line number.
    """
    config = config or IngestConfig()
    codes = CodeTable.from_csv(codes_path)

    parsed = []
    with open(notes_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{notes_path}: line {lineno}: invalid JSON ({e})") from e
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise ValueError(f"{notes_path}: line {lineno}: note needs 'id' and 'text' fields")
            split = obj.get("split")
            if split is not None and split not in ("train", "val", "test"):
                raise ValueError(f"{notes_path}: line {lineno}: bad split {split!r}")
            parsed.append((lineno, str(obj["id"]), str(obj["text"]), obj.get("codes", []), split))

    rejects: list[str] = []
    prepared = []
    for lineno, doc_id, text, code_strs, split in parsed:
        raw_tokens = tokenize(text)
        gold = set()
        for code in code_strs:
            if code in codes._index:
                gold.add(codes.id_of(code))
            else:
                rejects.append(f"line {lineno}: doc {doc_id!r}: unknown code {code!r}")
        if split is None:
            split = _hash_split(doc_id, config.split_seed, config.train_frac, config.val_frac)
        flags = [] if raw_tokens else ["empty_text"]
        prepared.append(Document(doc_id, raw_tokens, [], {}, gold, split, flags))

    train_tokens = [d.raw_tokens for d in prepared if d.split == "train"]
    if not train_tokens:
        raise ValueError("training split is empty; cannot build a vocabulary")
    vocab = build_vocab(train_tokens, config.min_freq)

    for doc in prepared:
        doc.tokens = [vocab.id(t) for t in doc.raw_tokens[: config.max_seq_len]]
        doc.bow = vectorize_bow(doc.raw_tokens, vocab)

    return Corpus(prepared, vocab, codes, config.max_seq_len, rejects)


@dataclass
class PlantedSpec:
    """Shape of a synthetic planted-signal corpus.

    Each code gets a unique trigger token; a document carries a code iff
    the trigger occurs in it. `codes_per_doc_mean` sets the expected gold
    set size: every code is included independently with probability
    mean/n_codes (skewed by a power law when `code_skew` > 0), so a mean
    equal to n_codes plants every trigger in every document.
    """

    n_docs: int
    n_codes: int
    vocab_noise_size: int = 500
    trigger_per_code: int = 1
    doc_len: int = 60
    codes_per_doc_mean: float = 3.0
    code_skew: float = 0.0
    max_seq_len: int = 512
    train_frac: float = 0.8
    val_frac: float = 0.1


def _planted_code_probs(spec: PlantedSpec) -> list[float]:
    if spec.code_skew <= 0.0:
        p = spec.codes_per_doc_mean / spec.n_codes
        return [min(p, 1.0)] * spec.n_codes
    # cap below 1 so no trigger is planted in literally every document
    weights = [(i + 1) ** (-spec.code_skew) for i in range(spec.n_codes)]
    scale = spec.codes_per_doc_mean / sum(weights)
    return [min(w * scale, 0.9) for w in weights]


def generate_planted_corpus(spec: PlantedSpec, seed: int) -> Corpus:
    """Deterministic synthetic corpus with one trigger token per code."""
    if min(spec.n_docs, spec.n_codes, spec.vocab_noise_size, spec.doc_len) < 1:
        raise ValueError("all planted-corpus sizes must be >= 1")
    if spec.trigger_per_code != 1:
        raise ValueError("exactly one trigger token per code is supported")

    triggers = [f"trg{i:03d}" for i in range(spec.n_codes)]
    noise = [f"nz{j:05d}" for j in range(spec.vocab_noise_size)]
    if set(triggers) & set(noise):
        raise ValueError("trigger tokens collide with the noise vocabulary")

    codes = CodeTable(
        codes=[f"c{i:03d}" for i in range(spec.n_codes)],
        descriptions=[f"condition {t}" for t in triggers],
        parents=[None] * spec.n_codes,
    )

    rng = Rng(seed)
    probs = _planted_code_probs(spec)

    documents: list[Document] = []
    for d in range(spec.n_docs):
        draws = rng.uniform(size=spec.n_codes)
        members = [i for i in range(spec.n_codes) if draws[i] < probs[i]]
        members = members[: spec.doc_len]
        toks = [noise[j] for j in rng.integers(0, spec.vocab_noise_size, size=spec.doc_len)]
        if members:
            slots = rng.choice(spec.doc_len, size=len(members), replace=False)
            for code_id, slot in zip(members, slots):
                toks[slot] = triggers[code_id]
        documents.append(
            Document(f"doc{d:05d}", toks, [], {}, set(members), "train")
        )

    order = rng.permutation(spec.n_docs)
    n_train = int(round(spec.train_frac * spec.n_docs))
    n_val = int(round(spec.val_frac * spec.n_docs))
    for rank, idx in enumerate(order):
        if rank < n_train:
            documents[idx].split = "train"
        elif rank < n_train + n_val:
            documents[idx].split = "val"
        else:
            documents[idx].split = "test"

    vocab = build_vocab([d.raw_tokens for d in documents if d.split == "train"], min_freq=1)
    for doc in documents:
        doc.tokens = [vocab.id(t) for t in doc.raw_tokens[: spec.max_seq_len]]
        doc.bow = vectorize_bow(doc.raw_tokens, vocab)

    return Corpus(documents, vocab, codes, spec.max_seq_len)


# -- persistence -----------------------------------------------------------


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    payload = {
        "format": CORPUS_FORMAT,
        "max_seq_len": corpus.max_seq_len,
        "codes": {
            "codes": corpus.codes.codes,
            "descriptions": corpus.codes.descriptions,
            "parents": [p or "" for p in corpus.codes.parents],
        },
        "vocab": {
            "tokens": corpus.vocab.id_to_token[2:],
            "freqs": corpus.vocab.freqs,
        },
        "documents": [
            {
                "doc_id": d.doc_id,
                "raw_tokens": d.raw_tokens,
                "tokens": d.tokens,
                "bow": sorted(d.bow.items()),
                "gold_codes": sorted(d.gold_codes),
                "split": d.split,
                "flags": d.flags,
            }
            for d in corpus.documents
        ],
        "rejects": corpus.rejects,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_corpus(path: str | Path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CORPUS_FORMAT:
        raise ValueError(f"{path}: expected format {CORPUS_FORMAT!r}, got {payload.get('format')!r}")
    codes = CodeTable(
        codes=payload["codes"]["codes"],
        descriptions=payload["codes"]["descriptions"],
        parents=[p or None for p in payload["codes"]["parents"]],
    )
    vocab = Vocabulary(payload["vocab"]["tokens"], freqs=payload["vocab"]["freqs"])
    documents = [
        Document(
            doc_id=d["doc_id"],
            raw_tokens=d["raw_tokens"],
            tokens=d["tokens"],
            bow={int(k): int(v) for k, v in d["bow"]},
            gold_codes=set(d["gold_codes"]),
            split=d["split"],
            flags=d["flags"],
        )
        for d in payload["documents"]
    ]
    return Corpus(documents, vocab, codes, payload["max_seq_len"], payload.get("rejects", []))

"""Desk-scale attention teacher with prior-matching regularizers.

The model reads a note with a small transformer encoder, embeds each code
title with a 1-d convolution plus global max pooling, attends from code
embeddings to token representations, and scores each code with a sigmoid
head. Training minimizes binary cross-entropy, optionally augmented with
two adversarial prior-matching losses that push code vectors (CPM) and
token vectors (TPM) toward a uniform prior, spreading gradient across
rare codes and tokens.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Rng, Tensor, no_grad
from .corpus import Corpus, CodeTable, Document, Vocabulary, tokenize, UNK_ID

__all__ = [
    "TeacherConfig",
    "TeacherModel",
    "Discriminator",
    "PriorSampler",
    "init_teacher",
    "embed_code_titles",
    "model_code_embeddings",
    "read_document",
    "code_attend",
    "attention_kernel",
    "predict_probs",
    "predict_corpus",
    "cpm_loss",
    "tpm_loss",
    "total_loss",
    "train_teacher",
    "build_total_loss",
    "save_teacher",
    "load_teacher",
]

logger = logging.getLogger(__name__)

TEACHER_FORMAT = "xrac-teacher-v1"


@dataclass
class TeacherConfig:
    d: int = 32                 # embedding dim; must be even and >= 4
    n_layers: int = 2
    n_heads: int = 1            # single-head only
    cnn_kernel: int = 3
    max_seq_len: int = 512
    alpha: float = 0.5          # CPM weight
    beta: float = 0.8           # TPM weight
    optimizer: str = "adam"     # "adam" or "momentum"
    learning_rate: float = 3e-3
    disc_lr_scale: float = 0.1  # discriminators step slower than the model
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    ffn_multiplier: int = 2
    threshold: float = 0.5
    select_best_val: bool = False   # keep the epoch with the best val micro-F1
    title_init: str = "identity"    # "identity" anchors code embeddings to their
                                    # own titles; "random" is the plain init,
                                    # prone to frequent-code domination

    def __post_init__(self):
        if self.d < 4 or self.d % 2 != 0:
            raise ValueError(f"embedding dim must be even and >= 4, got {self.d}")
        if self.n_heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.title_init not in ("identity", "random"):
            raise ValueError(f"unknown title_init {self.title_init!r}")


@dataclass
class Discriminator:
    """Sigmoid input squash, then two affine layers d -> d/2 -> 1 with tanh
    between and sigmoid output.

    The squash maps embeddings into the prior's (0, 1) box so the match is
    about the distribution inside the box, not raw scale; without it the
    game degenerates into unbounded displacement pressure on embeddings.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        h = np.tanh(nm._sigmoid_values(x) @ self.w1 + self.b1)
        return nm._sigmoid_values(h @ self.w2 + self.b2).reshape(-1)


@dataclass
class PriorSampler:
    """Uniform [0, 1) prior vectors of width `dim`, drawn from a seeded stream."""

    rng: Rng
    dim: int

    def sample(self, n: int) -> np.ndarray:
        return self.rng.uniform(size=(n, self.dim))


class TeacherModel:
    """Parameter container plus the tokenized code titles it was built against."""

    def __init__(
        self,
        config: TeacherConfig,
        params: dict[str, np.ndarray],
        n_y: int,
        vocab_hash: str,
        title_ids: list[list[int]],
        vocab: Vocabulary | None = None,
        loss_log: list[dict] | None = None,
    ):
        self.config = config
        self.params = params
        self.n_y = n_y
        self.vocab_hash = vocab_hash
        self.title_ids = title_ids
        self.vocab = vocab
        self.loss_log = loss_log if loss_log is not None else []

    def discriminator(self, which: str) -> Discriminator:
        p = self.params
        return Discriminator(p[f"{which}.w1"], p[f"{which}.b1"], p[f"{which}.w2"], p[f"{which}.b2"])

    def param_names(self) -> list[str]:
        return list(self.params)

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _init_params(config: TeacherConfig, vocab_size: int, n_y: int, rng: Rng) -> dict[str, np.ndarray]:
    d = config.d
    h = d * config.ffn_multiplier
    params: dict[str, np.ndarray] = {}
    # token scale 0.5 keeps the bilinear attention/score path out of its flat
    # region (smaller inits leave predictions stuck at the base rate); the
    # position table starts an order quieter so it cannot drown lexical signal
    params["token_emb"] = rng.normal(size=(vocab_size, d), scale=0.5)
    params["pos_emb"] = rng.normal(size=(config.max_seq_len, d), scale=0.05)
    for i in range(config.n_layers):
        base = f"layer{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            params[f"{base}.{proj}"] = rng.normal(size=(d, d), scale=1.0 / math.sqrt(d))
        for bias in ("bq", "bk", "bv", "bo"):
            params[f"{base}.{bias}"] = np.zeros(d)
        params[f"{base}.ln1_g"] = np.ones(d)
        params[f"{base}.ln1_b"] = np.zeros(d)
        params[f"{base}.ffn_w1"] = rng.normal(size=(d, h), scale=1.0 / math.sqrt(d))
        params[f"{base}.ffn_b1"] = np.zeros(h)
        params[f"{base}.ffn_w2"] = rng.normal(size=(h, d), scale=1.0 / math.sqrt(h))
        params[f"{base}.ffn_b2"] = np.zeros(d)
        params[f"{base}.ln2_g"] = np.ones(d)
        params[f"{base}.ln2_b"] = np.zeros(d)
    if config.title_init == "identity":
        # identity-centered kernel: each code embedding starts anchored to its
        # own title tokens, so rare codes keep distinct embeddings instead of
        # collapsing onto whatever direction the frequent codes pull the
        # shared filters
        kernel = rng.normal(size=(config.cnn_kernel, d, d), scale=0.1)
        kernel[config.cnn_kernel // 2] += np.eye(d)
    else:
        kernel = rng.normal(size=(config.cnn_kernel, d, d), scale=1.0 / math.sqrt(config.cnn_kernel * d))
    params["title_kernel"] = kernel
    params["title_bias"] = np.zeros(d)
    params["out_bias"] = np.zeros(n_y)
    for disc in ("dcpm", "dtpm"):
        params[f"{disc}.w1"] = rng.normal(size=(d, d // 2), scale=1.0 / math.sqrt(d))
        params[f"{disc}.b1"] = np.zeros(d // 2)
        params[f"{disc}.w2"] = rng.normal(size=(d // 2, 1), scale=1.0 / math.sqrt(d // 2))
        params[f"{disc}.b2"] = np.zeros(1)
    return params


def title_token_ids(codes: CodeTable, vocab: Vocabulary) -> list[list[int]]:
    """Tokenize each code description; empty descriptions fall back to UNK."""
    out = []
    for code, desc in zip(codes.codes, codes.descriptions):
        toks = tokenize(desc)
        ids = [vocab.id(t) for t in toks]
        if not ids:
            logger.warning("code %s has an empty description; using UNK", code)
            ids = [UNK_ID]
        out.append(ids)
    return out


def init_teacher(corpus: Corpus, config: TeacherConfig) -> TeacherModel:
    rng = Rng(config.seed).child(0)
    params = _init_params(config, len(corpus.vocab), corpus.n_codes, rng)
    return TeacherModel(
        config=config,
        params=params,
        n_y=corpus.n_codes,
        vocab_hash=corpus.vocab.content_hash(),
        title_ids=title_token_ids(corpus.codes, corpus.vocab),
        vocab=corpus.vocab,
    )


# -- forward graph builders (Tensor-valued) --------------------------------


def _forward_titles(P: dict[str, Tensor], title_ids: list[list[int]], config: TeacherConfig) -> Tensor:
    rows = []
    for ids in title_ids:
        emb = nm.gather_rows(P["token_emb"], ids)
        conv = nm.conv1d_same(emb, P["title_kernel"], P["title_bias"])
        rows.append(nm.global_max_pool(conv))
    return nm.stack_rows(rows)


def _forward_reader(P: dict[str, Tensor], token_ids: list[int], config: TeacherConfig) -> Tensor:
    n_x = len(token_ids)
    if n_x == 0:
        raise ValueError("cannot read an empty document")
    if n_x > config.max_seq_len:
        raise ValueError(f"document length {n_x} exceeds max_seq_len {config.max_seq_len}")
    d = config.d
    x = nm.gather_rows(P["token_emb"], token_ids) + nm.gather_rows(P["pos_emb"], list(range(n_x)))
    for i in range(config.n_layers):
        base = f"layer{i}"
        q = x @ P[f"{base}.wq"] + P[f"{base}.bq"]
        k = x @ P[f"{base}.wk"] + P[f"{base}.bk"]
        v = x @ P[f"{base}.wv"] + P[f"{base}.bv"]
        attn = nm.softmax_scaled(q @ nm.transpose(k), d)
        ctx = (attn @ v) @ P[f"{base}.wo"] + P[f"{base}.bo"]
        x = nm.layer_norm(x + ctx, P[f"{base}.ln1_g"], P[f"{base}.ln1_b"])
        hidden = nm.relu(x @ P[f"{base}.ffn_w1"] + P[f"{base}.ffn_b1"])
        ffn = hidden @ P[f"{base}.ffn_w2"] + P[f"{base}.ffn_b2"]
        x = nm.layer_norm(x + ffn, P[f"{base}.ln2_g"], P[f"{base}.ln2_b"])
    return x


def _attend(e_t: Tensor, u_x: Tensor, d: int) -> tuple[Tensor, Tensor]:
    attn = nm.softmax_scaled(e_t @ nm.transpose(u_x), d)
    return attn @ u_x, attn


def _predict(P: dict[str, Tensor], v_x: Tensor, e_t: Tensor, d: int) -> Tensor:
    scores = (v_x * e_t).sum(axis=1) / math.sqrt(d)
    return nm.sigmoid(scores + P["out_bias"])


def _bce(probs: Tensor, targets: np.ndarray) -> Tensor:
    # summed over codes (the usual multi-label coding convention), averaged
    # over documents by the caller; keeps BCE the dominant term of the
    # augmented objective at desk scale
    p = nm.clamp(probs, nm.EPS_PROB, 1.0 - nm.EPS_PROB)
    y = np.asarray(targets, dtype=np.float64)
    return -(y * nm.log(p) + (1.0 - y) * nm.log(1.0 - p)).sum()


def _disc_probs(P: dict[str, Tensor], which: str, x: Tensor) -> Tensor:
    h = nm.tanh(nm.sigmoid(x) @ P[f"{which}.w1"] + P[f"{which}.b1"])
    return nm.sigmoid(h @ P[f"{which}.w2"] + P[f"{which}.b2"])


def _prior_matching(P: dict[str, Tensor], which: str, rows: Tensor, priors: np.ndarray) -> tuple[Tensor, Tensor]:
    """Per-row discriminator loss -(log D(prior) + log(1 - D(row))) and its mean."""
    d_prior = nm.clamp(_disc_probs(P, which, Tensor(priors)), nm.EPS_PROB, 1.0 - nm.EPS_PROB)
    d_rows = nm.clamp(_disc_probs(P, which, rows), nm.EPS_PROB, 1.0 - nm.EPS_PROB)
    per_row = -(nm.log(d_prior) + nm.log(1.0 - d_rows))
    return per_row.mean(), per_row


def _generator_term(P: dict[str, Tensor], which: str, rows: Tensor) -> Tensor:
    """Non-saturating generator loss: -mean log D(row)."""
    d_rows = nm.clamp(_disc_probs(P, which, rows), nm.EPS_PROB, 1.0 - nm.EPS_PROB)
    return -nm.log(d_rows).mean()


def build_total_loss(
    P: dict[str, Tensor],
    config: TeacherConfig,
    title_ids: list[list[int]],
    token_ids: list[int],
    targets: np.ndarray,
    cpm_priors: np.ndarray,
    tpm_priors: np.ndarray,
) -> Tensor:
    """The full augmented objective BCE + alpha*CPM + beta*TPM as one graph."""
    e_t = _forward_titles(P, title_ids, config)
    u_x = _forward_reader(P, token_ids, config)
    v_x, _ = _attend(e_t, u_x, config.d)
    probs = _predict(P, v_x, e_t, config.d)
    bce = _bce(probs, targets)
    l_c, _ = _prior_matching(P, "dcpm", v_x, cpm_priors)
    l_t, _ = _prior_matching(P, "dtpm", u_x, tpm_priors)
    return bce + config.alpha * l_c + config.beta * l_t


# -- public inference operations -------------------------------------------


def _param_tensors(model: TeacherModel) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in model.params.items()}


def embed_code_titles(codes: CodeTable, model: TeacherModel) -> np.ndarray:
    """Code embeddings: token embeddings -> conv (same padding) -> global max pool."""
    if model.vocab is not None:
        ids = title_token_ids(codes, model.vocab)
    else:
        if len(codes) != model.n_y:
            raise ValueError("code table size does not match the model")
        ids = model.title_ids
    with no_grad():
        return _forward_titles(_param_tensors(model), ids, model.config).data


def model_code_embeddings(model: TeacherModel) -> np.ndarray:
    """Code embeddings from the title ids frozen into the model."""
    with no_grad():
        return _forward_titles(_param_tensors(model), model.title_ids, model.config).data


def read_document(doc: Document, model: TeacherModel) -> np.ndarray:
    """Token representations after the transformer reader (n_x, d)."""
    if doc.n_tokens == 0:
        raise ValueError(f"document {doc.doc_id!r} is empty")
    with no_grad():
        return _forward_reader(_param_tensors(model), doc.tokens, model.config).data


def attention_kernel(e_t: np.ndarray, u_x: np.ndarray, d: int) -> np.ndarray:
    """Row-wise scaled softmax attention weights over tokens (n_y, n_x)."""
    return nm.softmax_scaled(np.asarray(e_t) @ np.asarray(u_x).T, d)


def code_attend(e_t: np.ndarray, u_x: np.ndarray) -> np.ndarray:
    """Attention-weighted token averages per code: (n_y, d)."""
    e_t = np.asarray(e_t, dtype=np.float64)
    u_x = np.asarray(u_x, dtype=np.float64)
    if e_t.shape[1] != u_x.shape[1]:
        raise ValueError(f"dimension mismatch: {e_t.shape} vs {u_x.shape}")
    return attention_kernel(e_t, u_x, e_t.shape[1]) @ u_x


def predict_probs(v_x: np.ndarray, e_t: np.ndarray, model: TeacherModel) -> np.ndarray:
    """Per-code probabilities sigmoid(<v_i, e_i>/sqrt(d) + bias_i)."""
    with no_grad():
        return _predict(_param_tensors(model), Tensor(v_x), Tensor(e_t), model.config.d).data


def predict_corpus(
    model: TeacherModel, corpus: Corpus, split: str | None = None
) -> tuple[list[str], np.ndarray]:
    """Score every (document, code) pair; empty documents get all-zero rows."""
    docs = corpus.documents if split is None else corpus.split_docs(split)
    with no_grad():
        P = _param_tensors(model)
        e_t = _forward_titles(P, model.title_ids, model.config)
        scores = np.zeros((len(docs), model.n_y))
        for row, doc in enumerate(docs):
            if doc.n_tokens == 0:
                continue
            u_x = _forward_reader(P, doc.tokens, model.config)
            v_x, _ = _attend(e_t, u_x, model.config.d)
            scores[row] = _predict(P, v_x, e_t, model.config.d).data
    return [d.doc_id for d in docs], scores


def cpm_loss(
    v_x: np.ndarray, disc: Discriminator, prior: "PriorSampler | np.ndarray"
) -> tuple[float, np.ndarray]:
    """Code-prior-matching loss: mean over codes of -(log D(prior) + log(1 - D(v)))."""
    v_x = np.atleast_2d(np.asarray(v_x, dtype=np.float64))
    priors = prior.sample(v_x.shape[0]) if isinstance(prior, PriorSampler) else np.asarray(prior)
    if priors.shape != v_x.shape:
        raise ValueError(f"prior shape {priors.shape} does not match rows {v_x.shape}")
    d_prior = np.clip(disc(priors), nm.EPS_PROB, 1.0 - nm.EPS_PROB)
    d_rows = np.clip(disc(v_x), nm.EPS_PROB, 1.0 - nm.EPS_PROB)
    per_row = -(np.log(d_prior) + np.log(1.0 - d_rows))
    return float(per_row.mean()), per_row


def tpm_loss(
    u_x: np.ndarray, disc: Discriminator, prior: "PriorSampler | np.ndarray"
) -> tuple[float, np.ndarray]:
    """Text-prior-matching loss; same construction as cpm_loss over token rows."""
    return cpm_loss(u_x, disc, prior)


def total_loss(bce: float, l_c: float, l_t: float, alpha: float, beta: float) -> float:
    """Exact composition of the three logged terms."""
    return bce + alpha * l_c + beta * l_t


# -- training ---------------------------------------------------------------


_DISC_PREFIXES = ("dcpm.", "dtpm.")


def _is_disc_param(name: str) -> bool:
    return name.startswith(_DISC_PREFIXES)


class _MomentumSgd:
    def __init__(self, names: list[str], lr: float, momentum: float):
        self.names = names
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name in self.names:
            g = grads[name]
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v
            params[name] -= self.lr * v


class _Adam:
    """Per-parameter adaptive steps; rare codes and tokens keep learning even
    when frequent ones dominate the raw gradient scale."""

    def __init__(self, names: list[str], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.names = names
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name in self.names:
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _make_optimizer(names: list[str], config: TeacherConfig, lr_scale: float = 1.0):
    lr = config.learning_rate * lr_scale
    if config.optimizer == "adam":
        return _Adam(names, lr)
    return _MomentumSgd(names, lr, config.momentum)


def train_teacher(corpus: Corpus, config: TeacherConfig, mode: str = "bce_only") -> TeacherModel:
    """Train on the corpus train split; returns the model with a per-step loss log.

    mode "bce_only" minimizes plain BCE. mode "augmented" alternates one
    discriminator step (minimizing the prior-matching losses as written)
    with one model step (BCE plus the non-saturating generator terms
    weighted by alpha and beta). Randomness is split into separate seeded
    streams for init, shuffling, and priors so that the two modes share
    identical batch order under one seed.
    """
    if mode not in ("bce_only", "augmented"):
        raise ValueError(f"unknown training mode {mode!r}")

    model = init_teacher(corpus, config)
    root = Rng(config.seed)
    shuffle_rng = root.child(1)
    prior_rng = root.child(2)
    sampler = PriorSampler(prior_rng, config.d)

    train_docs = [d for d in corpus.split_docs("train") if d.gold_codes and d.n_tokens > 0]
    if not train_docs:
        raise ValueError("no trainable documents in the train split")

    model_names = [n for n in model.params if not _is_disc_param(n)]
    disc_names = [n for n in model.params if _is_disc_param(n)]
    model_opt = _make_optimizer(model_names, config)
    disc_opt = _make_optimizer(disc_names, config, lr_scale=config.disc_lr_scale)

    targets = np.zeros((len(train_docs), model.n_y))
    for i, doc in enumerate(train_docs):
        targets[i, sorted(doc.gold_codes)] = 1.0

    step = 0
    best_val, best_params, best_epoch = -1.0, None, -1
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(train_docs))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            l_c_val, l_t_val = 0.0, 0.0

            if mode == "augmented":
                l_c_val, l_t_val = _discriminator_step(
                    model, train_docs, batch, sampler, disc_opt, config
                )

            bce_val = _model_step(model, train_docs, targets, batch, mode, model_opt, config)

            entry = {
                "epoch": epoch,
                "step": step,
                "bce": bce_val,
                "cpm": l_c_val,
                "tpm": l_t_val,
                "total": total_loss(bce_val, l_c_val, l_t_val, config.alpha, config.beta),
            }
            if not math.isfinite(entry["total"]):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} step {step}: {entry}; "
                    f"batch docs {[train_docs[i].doc_id for i in batch]}"
                )
            model.loss_log.append(entry)
            step += 1
        if config.select_best_val:
            score = _val_macro_f1(model, corpus)
            if score > best_val:  # strict: ties keep the earlier epoch
                best_val, best_params, best_epoch = score, model.copy_params(), epoch
    if config.select_best_val and best_params is not None:
        model.params = best_params
        model.loss_log.append({"selected_epoch": best_epoch, "val_macro_f1": best_val})
    return model


def _val_macro_f1(model: TeacherModel, corpus: Corpus) -> float:
    docs = [d for d in corpus.split_docs("val") if d.n_tokens > 0]
    if not docs:
        return 0.0
    n_y = model.n_y
    tp = np.zeros(n_y)
    fp = np.zeros(n_y)
    fn = np.zeros(n_y)
    with no_grad():
        P = _param_tensors(model)
        e_t = _forward_titles(P, model.title_ids, model.config)
        for doc in docs:
            u_x = _forward_reader(P, doc.tokens, model.config)
            v_x, _ = _attend(e_t, u_x, model.config.d)
            probs = _predict(P, v_x, e_t, model.config.d).data
            predicted = set(np.nonzero(probs >= model.config.threshold)[0].tolist())
            for c in predicted & doc.gold_codes:
                tp[c] += 1
            for c in predicted - doc.gold_codes:
                fp[c] += 1
            for c in doc.gold_codes - predicted:
                fn[c] += 1
    per_code = [
        (2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])) if (2 * tp[c] + fp[c] + fn[c]) else 0.0
        for c in range(n_y)
    ]
    return float(np.mean(per_code))


def _discriminator_step(
    model: TeacherModel,
    train_docs: list[Document],
    batch: np.ndarray,
    sampler: PriorSampler,
    disc_opt,
    config: TeacherConfig,
) -> tuple[float, float]:
    """One update of both discriminators on detached embeddings."""
    with no_grad():
        P_frozen = _param_tensors(model)
        e_t = _forward_titles(P_frozen, model.title_ids, config).data
        v_rows, u_rows = [], []
        for i in batch:
            u_x = _forward_reader(P_frozen, train_docs[i].tokens, config).data
            v_x = attention_kernel(e_t, u_x, config.d) @ u_x
            v_rows.append(v_x)
            u_rows.append(u_x)

    tape = nm.GradTape()
    P_disc = {n: tape.param(n, model.params[n]) for n in disc_opt.names}
    c_losses, t_losses = [], []
    for v_x, u_x in zip(v_rows, u_rows):
        l_c, _ = _prior_matching(P_disc, "dcpm", Tensor(v_x), sampler.sample(v_x.shape[0]))
        l_t, _ = _prior_matching(P_disc, "dtpm", Tensor(u_x), sampler.sample(u_x.shape[0]))
        c_losses.append(l_c)
        t_losses.append(l_t)
    l_c_mean = nm.stack_rows(c_losses).mean()
    l_t_mean = nm.stack_rows(t_losses).mean()
    tape.backward(l_c_mean + l_t_mean)
    grads = {n: t.grad for n, t in tape.params.items()}
    new = {n: model.params[n].copy() for n in disc_opt.names}
    disc_opt.step(new, grads)
    model.params.update(new)
    return float(l_c_mean.data), float(l_t_mean.data)


def _model_step(
    model: TeacherModel,
    train_docs: list[Document],
    targets: np.ndarray,
    batch: np.ndarray,
    mode: str,
    model_opt,
    config: TeacherConfig,
) -> float:
    """One update of all non-discriminator parameters; returns the batch BCE."""
    tape = nm.GradTape()
    P = {n: tape.param(n, model.params[n]) for n in model.params}
    e_t = _forward_titles(P, model.title_ids, config)

    # a term weighted exactly 0 degenerates out of the objective; skipping it
    # keeps the graph (and so the gradient summation order) identical to the
    # plain-BCE run, which is what makes the two modes bitwise comparable
    use_cpm = mode == "augmented" and config.alpha != 0.0
    use_tpm = mode == "augmented" and config.beta != 0.0

    bce_terms, gen_c_terms, gen_t_terms = [], [], []
    for i in batch:
        u_x = _forward_reader(P, train_docs[i].tokens, config)
        v_x, _ = _attend(e_t, u_x, config.d)
        probs = _predict(P, v_x, e_t, config.d)
        bce_terms.append(_bce(probs, targets[i]))
        if use_cpm:
            gen_c_terms.append(_generator_term(P, "dcpm", v_x))
        if use_tpm:
            gen_t_terms.append(_generator_term(P, "dtpm", u_x))

    bce = nm.stack_rows(bce_terms).mean()
    loss = bce
    if use_cpm:
        loss = loss + config.alpha * nm.stack_rows(gen_c_terms).mean()
    if use_tpm:
        loss = loss + config.beta * nm.stack_rows(gen_t_terms).mean()
    tape.backward(loss)

    grads = {n: t.grad for n, t in tape.params.items()}
    new = {n: model.params[n].copy() for n in model_opt.names}
    model_opt.step(new, grads)
    model.params.update(new)
    return float(bce.data)


# -- persistence -------------------------------------------------------------


def save_teacher(model: TeacherModel, path: str | Path) -> None:
    payload = {
        "format": TEACHER_FORMAT,
        "config": asdict(model.config),
        "n_y": model.n_y,
        "vocab_hash": model.vocab_hash,
        "title_ids": model.title_ids,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in model.params.items()
        },
        "loss_log": model.loss_log,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_teacher(path: str | Path, vocab: Vocabulary | None = None) -> TeacherModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != TEACHER_FORMAT:
        raise ValueError(f"{path}: expected format {TEACHER_FORMAT!r}, got {payload.get('format')!r}")
    config = TeacherConfig(**payload["config"])
    params = {
        name: np.array(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in payload["params"].items()
    }
    if vocab is not None and vocab.content_hash() != payload["vocab_hash"]:
        raise ValueError("vocabulary hash mismatch: model was trained against a different vocabulary")
    return TeacherModel(
        config=config,
        params=params,
        n_y=payload["n_y"],
        vocab_hash=payload["vocab_hash"],
        title_ids=[list(map(int, ids)) for ids in payload["title_ids"]],
        vocab=vocab,
        loss_log=payload["loss_log"],
    )

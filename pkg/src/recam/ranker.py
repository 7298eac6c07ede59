"""Question-aware passage re-ranking with greedy token-matching similarity."""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from recam.config import PLACEHOLDER
from recam.errors import UndefinedSimilarityError, ValidationError

_WORD_RE = re.compile(r"\w+|[^\w\s]")
_BOUNDARY_RE = re.compile(r"[.!?]+[\"')\]]*\s+")

ABBREVIATIONS = frozenset(
    "mr. mrs. ms. dr. prof. st. jr. sr. vs. etc. e.g. i.e. u.s. u.k. inc. ltd. co. no. mt. gen. sgt. col. lt.".split()
)


class EmbeddingProvider(Protocol):
    """Maps texts to per-token vectors.

    ``embed`` receives every text that will be compared in one call so
    providers with lazily built vocabularies stay consistent.
    """

    concurrent_safe: bool

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


class OneHotEmbedder:
    """Lexical one-hot token vectors; similarity becomes token-overlap F1."""

    concurrent_safe = True

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        tokenized = [_WORD_RE.findall(t.lower()) for t in texts]
        vocab: dict[str, int] = {}
        for toks in tokenized:
            for tok in toks:
                vocab.setdefault(tok, len(vocab))
        out = []
        for toks in tokenized:
            m = np.zeros((len(toks), max(len(vocab), 1)))
            for row, tok in enumerate(toks):
                m[row, vocab[tok]] = 1.0
            out.append(m)
        return out


class HashedRandomEmbedder:
    """Seeded random vector per (lower-cased) word; deterministic across runs."""

    concurrent_safe = True

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            toks = _WORD_RE.findall(text.lower())
            out.append(np.stack([self._vector(t) for t in toks]) if toks else np.zeros((0, self.dim)))
        return out


class ScriptedEmbedder:
    """Returns preset token matrices for known texts."""

    concurrent_safe = True

    def __init__(self, table: Mapping[str, np.ndarray]):
        self.table = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in table.items()}

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.table[t] for t in texts]


@dataclass(frozen=True)
class SentenceList:
    sentences: tuple[str, ...]
    source_spans: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class RankedPassage:
    order: tuple[int, ...]
    scores: tuple[float, ...]  # indexed by original sentence position
    rearranged_text: str
    sentences: tuple[str, ...] = ()


def split_sentences(article: str) -> SentenceList:
    """Rule-based split after ``. ! ?`` (plus closing quotes) and whitespace.

    No split before a lower-case letter or after a known abbreviation.

    Spans are contiguous and cover the whole article; each sentence is its
    span with surrounding whitespace stripped.
    """
    if not article.strip():
        return SentenceList((), ())
    cuts = [0]
    for m in _BOUNDARY_RE.finditer(article):
        if m.end() >= len(article):
            break
        if article[m.end()].islower():
            continue
        head = article[: m.start() + 1]
        word = head.rsplit(None, 1)[-1].lstrip("\"'([").lower()
        if word in ABBREVIATIONS:
            continue
        cuts.append(m.end())
    spans = tuple(zip(cuts, cuts[1:] + [len(article)]))
    return SentenceList(tuple(article[a:b].strip() for a, b in spans), spans)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise UndefinedSimilarityError("zero-norm token embedding")
    return m / norms


def greedy_match(query_emb: np.ndarray, sent_emb: np.ndarray, recall_only: bool = False) -> float:
    """Greedy max-cosine matching score between two token matrices.

    Recall averages, over query tokens, the best cosine to any sentence
    token; precision does the same from the sentence side; the result is
    their harmonic mean (or recall alone). Mixed-sign P/R make the
    harmonic mean meaningless, so the value is clipped to [-1, 1] and a
    zero denominator yields 0.
    """
    if len(query_emb) == 0 or len(sent_emb) == 0:
        raise UndefinedSimilarityError("similarity needs non-empty token sequences")
    q = _unit_rows(np.asarray(query_emb, dtype=float))
    s = _unit_rows(np.asarray(sent_emb, dtype=float))
    if q.shape[1] != s.shape[1]:
        raise UndefinedSimilarityError(f"embedding dims differ: {q.shape[1]} vs {s.shape[1]}")
    sim = q @ s.T
    recall = float(sim.max(axis=1).mean())
    if recall_only:
        return float(np.clip(recall, -1.0, 1.0))
    precision = float(sim.max(axis=0).mean())
    denom = precision + recall
    if denom == 0:
        return 0.0
    return float(np.clip(2 * precision * recall / denom, -1.0, 1.0))


def similarity(query: str, sentence: str, embedder: EmbeddingProvider, recall_only: bool = False) -> float:
    q_emb, s_emb = embedder.embed([query, sentence])
    return greedy_match(q_emb, s_emb, recall_only)


def _strip_placeholder(question: str, placeholder: str) -> str:
    return " ".join(question.replace(placeholder, " ").split())


class Ranker:
    """Scores and reorders passage sentences against a question.

    Calls into the embedder are serialized with a lock unless the embedder
    declares itself concurrency-safe.
    """

    def __init__(self, embedder: EmbeddingProvider, recall_only: bool = False,
                 strip_placeholder: bool = False, placeholder: str = PLACEHOLDER):
        self.embedder = embedder
        self.recall_only = recall_only
        self.strip_placeholder = strip_placeholder
        self.placeholder = placeholder
        self._lock = None if getattr(embedder, "concurrent_safe", False) else threading.Lock()

    def _embed(self, texts):
        if self._lock is None:
            return self.embedder.embed(texts)
        with self._lock:
            return self.embedder.embed(texts)

    def rank(self, article: str, question: str) -> RankedPassage:
        if not article.strip():
            raise ValidationError("cannot rank an empty article")
        if self.strip_placeholder:
            question = _strip_placeholder(question, self.placeholder)
        sents = split_sentences(article).sentences
        embs = self._embed([question, *sents])
        q_emb = embs[0]
        scores = tuple(greedy_match(q_emb, e, self.recall_only) for e in embs[1:])
        # sorted() is stable, so equal scores keep their original order
        order = tuple(sorted(range(len(sents)), key=lambda i: -scores[i]))
        return RankedPassage(order, scores, " ".join(sents[i] for i in order), sents)


def rank(article: str, question: str, embedder: EmbeddingProvider, recall_only: bool = False,
         strip_placeholder: bool = False, placeholder: str = PLACEHOLDER) -> RankedPassage:
    return Ranker(embedder, recall_only, strip_placeholder, placeholder).rank(article, question)

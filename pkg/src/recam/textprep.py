"""Encoder input construction: concept wrapping, [Q; A; D] layout, truncation."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from recam.config import PLACEHOLDER, RunConfig, SpecialTokenScheme
from recam.dataset import NUM_OPTIONS, Example
from recam.errors import InstanceTooLongError, ValidationError

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class Tokenizer:
    """What assembly needs from a tokenizer.

    Implementations: :class:`WordTokenizer` here and the pretrained adapter
    in :mod:`recam.backends`.
    """

    bos_id: int
    eos_id: int
    pad_id: int

    @property
    def sep_block(self) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    @property
    def special_tokens(self) -> tuple[str, ...]:
        raise NotImplementedError

    def encode(self, text: str) -> list[int]:
        """Token ids for ``text`` without sequence-start/end markers."""
        raise NotImplementedError

    def decode(self, ids: Sequence[int]) -> str:
        raise NotImplementedError

    def add_special_tokens(self, tokens: Iterable[str]) -> list[int]:
        """Register atomic markers; returns their ids."""
        raise NotImplementedError


class WordTokenizer(Tokenizer):
    """Lower-cased word/punctuation tokenizer with a closed vocabulary.

    Registered special tokens are matched verbatim (case-sensitive) before
    the word split, so each always maps to a single id.
    """

    PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"

    def __init__(self, tokens: Sequence[str], special_tokens: Sequence[str] = ()):
        base = [self.PAD, self.BOS, self.EOS, self.UNK]
        self._itos: list[str] = list(base)
        for tok in tokens:
            if tok not in base:
                self._itos.append(tok)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        if len(self._stoi) != len(self._itos):
            raise ValidationError("duplicate tokens in vocabulary")
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = (self._stoi[t] for t in base)
        self._special: list[str] = []
        self._special_re = None
        self.add_special_tokens(special_tokens)

    @classmethod
    def from_texts(cls, texts: Iterable[str], min_freq: int = 1) -> "WordTokenizer":
        counts = Counter()
        for text in texts:
            counts.update(_WORD_RE.findall(text.lower()))
        # frequency-descending, ties alphabetical: independent of text order
        tokens = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
        return cls(tokens)

    @property
    def sep_block(self) -> tuple[int, ...]:
        return (self.eos_id, self.eos_id)

    @property
    def vocab_size(self) -> int:
        return len(self._itos)

    @property
    def special_tokens(self) -> tuple[str, ...]:
        return tuple(self._special)

    def add_special_tokens(self, tokens: Iterable[str]) -> list[int]:
        ids = []
        for tok in tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValidationError(f"special token must be non-empty without whitespace: {tok!r}")
            if tok not in self._stoi:
                self._stoi[tok] = len(self._itos)
                self._itos.append(tok)
            if tok not in self._special:
                self._special.append(tok)
            ids.append(self._stoi[tok])
        if self._special:
            alts = sorted(self._special, key=len, reverse=True)
            self._special_re = re.compile("(" + "|".join(re.escape(t) for t in alts) + ")")
        return ids

    def tokenize(self, text: str) -> list[str]:
        pieces = self._special_re.split(text) if self._special_re else [text]
        out = []
        for i, piece in enumerate(pieces):
            # re.split with one capture group alternates text / delimiter
            if self._special_re and i % 2 == 1:
                out.append(piece)
            else:
                out.extend(_WORD_RE.findall(piece.lower()))
        return out

    def encode(self, text: str) -> list[int]:
        return [self._stoi.get(t, self.unk_id) for t in self.tokenize(text)]

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self._itos[i] for i in ids)

    def id_of(self, token: str) -> int:
        return self._stoi[token]

    def to_dict(self) -> dict:
        return {"kind": "word", "itos": list(self._itos), "special_tokens": list(self._special)}

    @classmethod
    def from_dict(cls, d: dict) -> "WordTokenizer":
        return cls(d["itos"], d.get("special_tokens", ()))


def wrap_concept(concept: str, scheme: SpecialTokenScheme) -> str:
    if not concept or not concept.strip():
        raise ValidationError("concept must be non-empty")
    if not scheme.enabled:
        return concept
    return f"{scheme.open} {concept} {scheme.close}"


def build_complete_question(question: str, candidate: str, scheme: SpecialTokenScheme,
                            placeholder: str = PLACEHOLDER) -> str:
    """Fill the placeholder with the (wrapped) candidate; nothing else changes."""
    n = question.count(placeholder)
    if n != 1:
        raise ValidationError(f"question must contain {placeholder!r} exactly once, found {n}")
    return question.replace(placeholder, wrap_concept(candidate, scheme))


@dataclass(frozen=True)
class EncodedInstance:
    example_id: str
    candidate_index: int
    joint_ids: tuple[int, ...]
    question_only_ids: tuple[int, ...] | None
    truncated_subwords: int


def assemble(example: Example, candidate_index: int, passage: str, tokenizer: Tokenizer,
             config: RunConfig) -> EncodedInstance:
    """Lay out ``<s> Q <sep> A_i <sep> D </s>``, cutting only the tail of D."""
    if candidate_index not in range(NUM_OPTIONS):
        raise ValidationError(f"candidate_index {candidate_index} not in 0..{NUM_OPTIONS - 1}")
    scheme = config.scheme
    candidate = example.options[candidate_index]
    q_ids = tokenizer.encode(example.question)
    a_ids = tokenizer.encode(wrap_concept(candidate, scheme))
    d_ids = tokenizer.encode(passage) if passage else []
    sep = list(tokenizer.sep_block)

    fixed = 1 + len(q_ids) + len(sep) + len(a_ids) + len(sep) + 1
    budget = config.max_input_length - fixed
    if budget < 0:
        raise InstanceTooLongError(
            f"example {example.id} candidate {candidate_index}: question + option need {fixed} "
            f"tokens, over max_input_length={config.max_input_length}"
        )
    kept = d_ids[:budget]
    joint = [tokenizer.bos_id, *q_ids, *sep, *a_ids, *sep, *kept, tokenizer.eos_id]

    complete = build_complete_question(example.question, candidate, scheme, config.placeholder)
    body = tokenizer.encode(complete)[: config.max_input_length - 2]
    question_only = [tokenizer.bos_id, *body, tokenizer.eos_id]

    return EncodedInstance(
        example_id=example.id,
        candidate_index=candidate_index,
        joint_ids=tuple(joint),
        question_only_ids=tuple(question_only),
        truncated_subwords=len(d_ids) - len(kept),
    )


def encode_example(example: Example, passage: str, tokenizer: Tokenizer,
                   config: RunConfig) -> list[EncodedInstance]:
    return [assemble(example, i, passage, tokenizer, config) for i in range(NUM_OPTIONS)]

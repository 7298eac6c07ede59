"""Loading, validating and summarizing ReCAM-style cloze datasets."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from recam.config import PLACEHOLDER, subtask_name
from recam.errors import IntegrityError, ParseError, SchemaError, ValidationError

logger = logging.getLogger(__name__)

NUM_OPTIONS = 5
SPLIT_NAMES = ("train", "trial", "dev", "test")
OPTION_KEYS = tuple(f"option_{i}" for i in range(NUM_OPTIONS))

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


@dataclass(frozen=True)
class Example:
    id: str
    article: str
    question: str
    options: tuple[str, ...]
    label: Optional[int] = None
    provenance: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != NUM_OPTIONS:
            raise ValidationError(f"example {self.id}: expected {NUM_OPTIONS} options, got {len(self.options)}")
        if self.label is not None and (isinstance(self.label, bool) or self.label not in range(NUM_OPTIONS)):
            raise ValidationError(f"example {self.id}: label {self.label!r} not in 0..{NUM_OPTIONS - 1}")

    def check_placeholder(self, marker: str = PLACEHOLDER) -> None:
        n = self.question.count(marker)
        if n != 1:
            raise ValidationError(f"example {self.id}: question must contain {marker!r} exactly once, found {n}")

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {"id": self.id, "article": self.article, "question": self.question}
        for key, opt in zip(OPTION_KEYS, self.options):
            rec[key] = opt
        if self.label is not None:
            rec["label"] = self.label
        if self.provenance is not None:
            rec["provenance"] = self.provenance
        return rec


@dataclass(frozen=True)
class DatasetSplit:
    name: str
    examples: tuple[Example, ...]
    subtask: str = "imperceptibility"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValidationError(f"split name must be one of {SPLIT_NAMES}, got {self.name!r}")
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "subtask", subtask_name(self.subtask))
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise IntegrityError(f"duplicate example id {ex.id!r} in split {self.name}")
            seen.add(ex.id)
            if ex.label is None and self.name != "test":
                raise ValidationError(f"example {ex.id} in labeled split {self.name!r} has no label")

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def labeled(self) -> bool:
        return all(ex.label is not None for ex in self.examples)

    def labels(self) -> list[Optional[int]]:
        return [ex.label for ex in self.examples]


def _parse_record(rec: Any, path, line_no: int, split_name: str) -> Example:
    if not isinstance(rec, dict):
        raise ParseError(path, line_no, "record is not a JSON object")
    missing = [k for k in ("article", "question", *OPTION_KEYS) if k not in rec]
    if missing:
        raise SchemaError(f"{path}:{line_no}: missing field(s) {missing}")
    for k in ("article", "question", *OPTION_KEYS):
        if not isinstance(rec[k], str):
            raise SchemaError(f"{path}:{line_no}: field {k!r} must be a string")
    label = rec.get("label")
    if label is not None and (isinstance(label, bool) or not isinstance(label, int)):
        raise SchemaError(f"{path}:{line_no}: label must be an integer, got {label!r}")
    ex_id = rec.get("id")
    if ex_id is None:
        ex_id = f"{split_name}-{line_no}"
    try:
        return Example(
            id=str(ex_id),
            article=rec["article"],
            question=rec["question"],
            options=tuple(rec[k] for k in OPTION_KEYS),
            label=label,
            provenance=rec.get("provenance"),
        )
    except ValidationError as e:
        raise SchemaError(f"{path}:{line_no}: {e}") from e


def load_jsonl(
    path: str | Path,
    split_name: str,
    subtask: str = "imperceptibility",
    placeholder: str = PLACEHOLDER,
) -> DatasetSplit:
    """Read one split from a JSONL file, preserving line order.

    Blank lines are skipped but still counted, so error messages and
    synthesized ids refer to physical line numbers.
    """
    path = Path(path)
    examples = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_no, f"invalid JSON ({e.msg})") from e
            ex = _parse_record(rec, path, line_no, split_name)
            try:
                ex.check_placeholder(placeholder)
            except ValidationError as e:
                raise SchemaError(f"{path}:{line_no}: {e}") from e
            examples.append(ex)
    split = DatasetSplit(split_name, tuple(examples), subtask, meta={"source": str(path)})
    logger.info("loaded %d examples from %s", len(split), path)
    return split


def save_jsonl(split: DatasetSplit | Iterable[Example], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for ex in split:
            f.write(json.dumps(ex.to_record(), ensure_ascii=False) + "\n")


def find_split_file(data_dir: str | Path, split_name: str, subtask: str = "imperceptibility") -> Optional[Path]:
    """Locate ``<split>.jsonl`` or the official ``Task_<n>_<split>.jsonl`` naming."""
    data_dir = Path(data_dir)
    n = 1 if subtask_name(subtask) == "imperceptibility" else 2
    for cand in (data_dir / f"{split_name}.jsonl", data_dir / f"Task_{n}_{split_name}.jsonl"):
        if cand.exists():
            return cand
    return None


def load_data_dir(data_dir: str | Path, subtask: str = "imperceptibility",
                  placeholder: str = PLACEHOLDER) -> dict[str, DatasetSplit]:
    splits = {}
    for name in SPLIT_NAMES:
        path = find_split_file(data_dir, name, subtask)
        if path is not None:
            splits[name] = load_jsonl(path, name, subtask, placeholder)
    return splits


@dataclass(frozen=True)
class SplitStats:
    name: str
    count: int
    labeled: int
    label_histogram: tuple[int, ...]
    # token-length percentiles (p50, p90, p95, max) of article and question
    article_length: dict[str, float]
    question_length: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "count": self.count,
            "labeled": self.labeled,
            "label_histogram": list(self.label_histogram),
            "article_length": self.article_length,
            "question_length": self.question_length,
        }


def _percentiles(lengths: list[int]) -> dict[str, float]:
    if not lengths:
        return {"p50": 0.0, "p90": 0.0, "p95": 0.0, "max": 0.0}
    arr = np.asarray(lengths, dtype=float)
    return {
        "p50": float(np.percentile(arr, 50)),
        "p90": float(np.percentile(arr, 90)),
        "p95": float(np.percentile(arr, 95)),
        "max": float(arr.max()),
    }


def describe(split: DatasetSplit, tokenize=None) -> SplitStats:
    """Counts, label histogram and length percentiles.

    ``tokenize`` maps text to a token list; by default a word/punctuation
    split is used, which matches the tiny backend's tokenizer.
    """
    tokenize = tokenize or (lambda text: _TOKEN_RE.findall(text))
    hist = [0] * NUM_OPTIONS
    for ex in split:
        if ex.label is not None:
            hist[ex.label] += 1
    return SplitStats(
        name=split.name,
        count=len(split),
        labeled=sum(hist),
        label_histogram=tuple(hist),
        article_length=_percentiles([len(tokenize(ex.article)) for ex in split]),
        question_length=_percentiles([len(tokenize(ex.question)) for ex in split]),
    )

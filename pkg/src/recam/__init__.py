"""Multiple-choice cloze reading comprehension over abstract concepts."""

from recam.config import RunConfig, SpecialTokenScheme, TOKEN_SCHEMES
from recam.dataset import DatasetSplit, Example, describe, load_jsonl, save_jsonl

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit",
    "Example",
    "RunConfig",
    "SpecialTokenScheme",
    "TOKEN_SCHEMES",
    "describe",
    "load_jsonl",
    "save_jsonl",
]

"""Run configuration and special-token schemes."""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Iterable

import yaml

from recam.errors import ValidationError

PLACEHOLDER = "@placeholder"

SUBTASKS = ("imperceptibility", "nonspecificity")

TECHNIQUES = (
    "special_tokens",
    "sentence_ranking",
    "label_smoothing",
    "siamese",
    "back_translation",
)

# Allowed hyper-parameter values for a "safe" run.
LEARNING_RATES = (1e-5, 2e-5)
BATCH_SIZES = (16, 32)
WARMUPS = (0.1, 1.0, 2.0)
EPOCH_RANGE = (3, 10)
GRAD_CLIP_NORM = 1.0
MAX_INPUT_LENGTH = 200


@dataclass(frozen=True)
class SpecialTokenScheme:
    open: str
    close: str
    enabled: bool = True

    def __post_init__(self):
        if self.enabled:
            if not self.open or not self.close:
                raise ValidationError("special token scheme needs non-empty open/close markers")
            if self.open == self.close:
                raise ValidationError(f"open and close markers must differ, got {self.open!r}")

    @property
    def name(self) -> str:
        return self.open if self.enabled else "none"

    @property
    def tokens(self) -> tuple[str, ...]:
        return (self.open, self.close) if self.enabled else ()


NO_SCHEME = SpecialTokenScheme("", "", enabled=False)

# Keyed by the opening marker; "none" disables wrapping.
TOKEN_SCHEMES: dict[str, SpecialTokenScheme] = {
    "<e>": SpecialTokenScheme("<e>", "</e>"),
    "<#>": SpecialTokenScheme("<#>", "</#>"),
    "<$>": SpecialTokenScheme("<$>", "</$>"),
    "#": SpecialTokenScheme("#", "/#"),
    "$": SpecialTokenScheme("$", "/$"),
    "none": NO_SCHEME,
}


def get_scheme(name: str) -> SpecialTokenScheme:
    try:
        return TOKEN_SCHEMES[name]
    except KeyError:
        raise ValidationError(
            f"unknown special token scheme {name!r}; choose from {sorted(TOKEN_SCHEMES)}"
        ) from None


def subtask_name(value: str | int) -> str:
    """Accept 1/2, "1"/"2" or the full subtask name."""
    s = str(value).strip().lower()
    if s in ("1", "subtask-1", "imperceptibility"):
        return "imperceptibility"
    if s in ("2", "subtask-2", "nonspecificity", "nonspecificility"):
        return "nonspecificity"
    raise ValidationError(f"unknown subtask {value!r}")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a training/evaluation run.

    Values outside the published hyper-parameter grid are rejected unless
    ``unsafe`` is set; desk-scale tests rely on that escape hatch.
    """

    learning_rate: float = 1e-5
    batch_size: int = 16
    grad_clip_norm: float = GRAD_CLIP_NORM
    warmup: float = 0.1
    max_input_length: int = MAX_INPUT_LENGTH
    epochs: int = 3
    seed: int = 42
    unsafe: bool = False

    subtask: str = "imperceptibility"
    backend: str = "tiny"
    placeholder: str = PLACEHOLDER

    # technique switches
    special_tokens: bool = False
    sentence_ranking: bool = False
    label_smoothing: bool = False
    siamese: bool = False
    back_translation: bool = False

    special_token_scheme: str = "<e>"
    label_smoothing_alpha: float = 0.1
    smooth_both_branches: bool = True
    use_uncertainty_loss: bool = True
    pivots: tuple[str, ...] = ("fr",)
    rank_strip_placeholder: bool = False
    rank_recall_only: bool = False

    head_depth: int = 1
    head_init: str = "zeros"
    dropout: float = 0.0
    weight_decay: float = 0.01
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    eval_batch_size: int = 32

    def __post_init__(self):
        # yaml/json round-trips hand back lists
        object.__setattr__(self, "pivots", tuple(self.pivots))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        object.__setattr__(self, "subtask", subtask_name(self.subtask))
        self.validate()

    def validate(self) -> None:
        get_scheme(self.special_token_scheme)
        if not 0.0 <= self.label_smoothing_alpha < 1.0:
            raise ValidationError(f"label_smoothing_alpha must be in [0, 1), got {self.label_smoothing_alpha}")
        if self.backend not in ("tiny", "pretrained"):
            raise ValidationError(f"unknown backend {self.backend!r}")
        if self.head_init not in ("zeros", "normal"):
            raise ValidationError(f"unknown head_init {self.head_init!r}")
        if self.head_depth < 1:
            raise ValidationError("head_depth must be >= 1")
        if not self.placeholder:
            raise ValidationError("placeholder marker must be non-empty")
        if self.max_input_length < 8:
            raise ValidationError("max_input_length too small")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")
        if self.learning_rate < 0 or self.warmup < 0:
            raise ValidationError("learning_rate and warmup must be non-negative")
        if self.unsafe:
            return
        problems = []
        if self.learning_rate not in LEARNING_RATES:
            problems.append(f"learning_rate={self.learning_rate} not in {LEARNING_RATES}")
        if self.batch_size not in BATCH_SIZES:
            problems.append(f"batch_size={self.batch_size} not in {BATCH_SIZES}")
        if self.grad_clip_norm != GRAD_CLIP_NORM:
            problems.append(f"grad_clip_norm={self.grad_clip_norm} != {GRAD_CLIP_NORM}")
        if self.warmup not in WARMUPS:
            problems.append(f"warmup={self.warmup} not in {WARMUPS}")
        if self.max_input_length != MAX_INPUT_LENGTH:
            problems.append(f"max_input_length={self.max_input_length} != {MAX_INPUT_LENGTH}")
        if not EPOCH_RANGE[0] <= self.epochs <= EPOCH_RANGE[1]:
            problems.append(f"epochs={self.epochs} outside {EPOCH_RANGE}")
        if problems:
            raise ValidationError("; ".join(problems) + " (set unsafe=True to override)")

    @property
    def scheme(self) -> SpecialTokenScheme:
        """The wrapping actually applied: disabled unless the switch is on."""
        if not self.special_tokens:
            return NO_SCHEME
        return get_scheme(self.special_token_scheme)

    @property
    def alpha(self) -> float:
        return self.label_smoothing_alpha if self.label_smoothing else 0.0

    def techniques(self) -> tuple[str, ...]:
        return tuple(t for t in TECHNIQUES if getattr(self, t))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_techniques(self, techniques: Iterable[str]) -> "RunConfig":
        chosen = set(techniques)
        unknown = chosen - set(TECHNIQUES)
        if unknown:
            raise ValidationError(f"unknown techniques {sorted(unknown)}")
        return self.replace(**{t: t in chosen for t in TECHNIQUES})

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["pivots"] = list(self.pivots)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls.from_dict(data)


def table2_grid(base: RunConfig) -> list[RunConfig]:
    """All learning-rate x batch-size x warm-up combinations, in a fixed order."""
    return [
        base.replace(learning_rate=lr, batch_size=bs, warmup=wu)
        for lr, bs, wu in itertools.product(LEARNING_RATES, BATCH_SIZES, WARMUPS)
    ]

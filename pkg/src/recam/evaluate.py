"""Accuracy reports, ablation runner, special-token sweep and transfer matrix."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

from recam.config import SUBTASKS, TECHNIQUES, TOKEN_SCHEMES, RunConfig, get_scheme
from recam.dataset import DatasetSplit
from recam.errors import ValidationError
from recam.ranker import EmbeddingProvider
from recam.train import Checkpoint, predict_features, prepare_features, train

logger = logging.getLogger(__name__)

TECHNIQUE_LABELS = {
    "special_tokens": "w/ special tokens",
    "sentence_ranking": "w/ sentence ranking",
    "label_smoothing": "w/ label smoothing",
    "siamese": "w/ siamese encoders",
    "back_translation": "w/ back translation",
}

# The technique mix reported as the final system for each subtask.
FINAL_COMBOS = {
    "imperceptibility": ("special_tokens",),
    "nonspecificity": ("special_tokens", "label_smoothing"),
}

TOKEN_SWEEP_ORDER = ("<e>", "<#>", "<$>", "#", "$", "none")

# Published large-encoder results (accuracy %), kept as report metadata
# only; desk-scale runs are not expected to approach them.
REFERENCE_RESULTS = {
    "ablation": {
        "imperceptibility": {
            "baseline": (85.85, 82.12), "special_tokens": (87.81, 87.69),
            "sentence_ranking": (86.54, 83.52), "label_smoothing": (86.88, 85.85),
            "siamese": (86.62, 83.22), "back_translation": (87.23, 84.32), "final": (87.81, 87.69),
        },
        "nonspecificity": {
            "baseline": (88.51, 85.93), "special_tokens": (87.47, 88.98),
            "sentence_ranking": (87.29, 86.84), "label_smoothing": (87.67, 87.08),
            "siamese": (87.34, 86.18), "back_translation": (88.41, 87.54), "final": (87.10, 89.54),
        },
    },
    "transfer": {
        "imperceptibility->imperceptibility": 87.51,
        "imperceptibility->nonspecificity": 84.13,
        "nonspecificity->nonspecificity": 89.64,
        "nonspecificity->imperceptibility": 81.09,
    },
    "token_sweep": {
        "<e>": (88.01, 87.10), "<#>": (88.63, 86.93), "<$>": (88.12, 86.26),
        "#": (87.34, 85.89), "$": (87.73, 86.13), "none": (86.23, 83.12),
    },
}


@dataclass
class EvalReport:
    split: str
    accuracy: float
    predictions: list[dict]
    config: dict
    correct: int = 0
    total: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"split": self.split, "accuracy": self.accuracy, "correct": self.correct, "total": self.total,
                "predictions": self.predictions, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["split"], d["accuracy"], d["predictions"], d["config"], d["correct"], d["total"])

    def save(self, path: str | Path) -> None:
        _write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def predict_split(checkpoint: Checkpoint, split: DatasetSplit,
                  embedder: EmbeddingProvider | None = None) -> list[int]:
    feats = prepare_features(split, checkpoint.tokenizer, checkpoint.config, embedder)
    return predict_features(checkpoint.model, feats, checkpoint.config.eval_batch_size)


def evaluate(checkpoint: Checkpoint, split: DatasetSplit, embedder: EmbeddingProvider | None = None) -> EvalReport:
    if len(split) == 0:
        raise ValidationError(f"split {split.name!r} is empty; accuracy is undefined")
    if not split.labeled:
        raise ValidationError(f"split {split.name!r} has unlabeled examples; use predict mode instead")
    preds = predict_split(checkpoint, split, embedder)
    rows = [{"id": ex.id, "prediction": p, "label": ex.label} for ex, p in zip(split, preds)]
    correct = sum(r["prediction"] == r["label"] for r in rows)
    return EvalReport(split.name, correct / len(rows), rows, checkpoint.config.to_dict(), correct, len(rows))


@dataclass
class ResultTable:
    """Rows of one experiment, serializable as JSON and as an aligned text table."""

    title: str
    columns: list[str]
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"title": self.title, "columns": self.columns, "rows": self.rows, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultTable":
        return cls(d["title"], d["columns"], d["rows"], d.get("metadata", {}))

    def to_text(self) -> str:
        def fmt(v):
            if v is None:
                return "-"
            if isinstance(v, float):
                return f"{100 * v:.2f}"
            return str(v)

        cells = [[fmt(r.get(c)) for c in self.columns] for r in self.rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
                  for i, c in enumerate(self.columns)]
        line = "  ".join(c.ljust(w) for c, w in zip(self.columns, widths))
        rule = "-" * len(line)
        body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join([self.title, rule, line, rule, *body, rule]) + "\n"

    def save(self, directory: str | Path, stem: str) -> None:
        directory = Path(directory)
        _write_json(directory / f"{stem}.json", self.to_dict())
        (directory / f"{stem}.txt").write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ResultTable":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def ablation_plan(techniques: Sequence[str], subtask: str,
                  final_combo: Sequence[str] | None = None) -> list[tuple[str, str, tuple[str, ...]]]:
    """``(key, label, techniques)`` per row: baseline, one row per technique, final mix."""
    techniques = tuple(techniques)
    unknown = set(techniques) - set(TECHNIQUES)
    if unknown:
        raise ValidationError(f"unknown techniques {sorted(unknown)}")
    if len(set(techniques)) != len(techniques):
        raise ValidationError("duplicate technique in ablation list")
    plan = [("baseline", "baseline", ())]
    if not techniques:
        return plan
    plan += [(t, TECHNIQUE_LABELS[t], (t,)) for t in techniques]
    combo = tuple(final_combo) if final_combo is not None else FINAL_COMBOS[subtask]
    plan.append(("final", "our approach", combo))
    return plan


TrainFn = Callable[..., Checkpoint]


def _train_and_score(config: RunConfig, data: Mapping[str, DatasetSplit], train_fn: TrainFn,
                     **train_kwargs) -> dict:
    ckpt = train_fn(data["train"], data["dev"], config, **train_kwargs)
    embedder = train_kwargs.get("embedder")
    row = {"dev": evaluate(ckpt, data["dev"], embedder).accuracy, "trial": None, "status": "ok", "error": None}
    if data.get("trial") is not None and len(data["trial"]):
        row["trial"] = evaluate(ckpt, data["trial"], embedder).accuracy
    return row


def _failed_row(e: Exception) -> dict:
    return {"dev": None, "trial": None, "status": "failed", "error": f"{type(e).__name__}: {e}"}


def run_ablation(base_config: RunConfig, techniques: Sequence[str], data: Mapping[str, DatasetSplit],
                 final_combo: Sequence[str] | None = None, train_fn: TrainFn = train,
                 **train_kwargs) -> ResultTable:
    """Baseline, baseline plus each technique alone, and the final mix.

    Every row shares ``base_config.seed``; a failing row is recorded and
    the remaining rows still run.
    """
    plan = ablation_plan(techniques, base_config.subtask, final_combo)
    rows = []
    for key, label, techs in plan:
        cfg = base_config.with_techniques(techs)
        logger.info("ablation row %s: %s", key, techs)
        try:
            res = _train_and_score(cfg, data, train_fn, **train_kwargs)
        except Exception as e:  # noqa: BLE001 - isolate row failures
            logger.exception("ablation row %s failed", key)
            res = _failed_row(e)
        rows.append({"row": key, "model": label, "techniques": list(techs), "trial_acc": res["trial"],
                     "dev_acc": res["dev"], "status": res["status"], "error": res["error"]})
    ref = REFERENCE_RESULTS["ablation"][base_config.subtask]
    return ResultTable(
        title=f"Ablation ({base_config.subtask})",
        columns=["model", "trial_acc", "dev_acc", "status"],
        rows=rows,
        metadata={"seed": base_config.seed, "base_config": base_config.to_dict(),
                  "reference_accuracy_pct": {k: list(v) for k, v in ref.items()}, "reproducible": False},
    )


def run_token_sweep(base_config: RunConfig, data: Mapping[str, DatasetSplit],
                    schemes: Sequence[str] = TOKEN_SWEEP_ORDER, train_fn: TrainFn = train,
                    **train_kwargs) -> ResultTable:
    """One row per special-token scheme; ``"none"`` trains without markers."""
    schemes = list(schemes)
    if len(set(schemes)) != len(schemes):
        raise ValidationError(f"duplicate scheme in sweep: {schemes}")
    for s in schemes:
        get_scheme(s)
    rows = []
    for name in schemes:
        scheme = TOKEN_SCHEMES[name]
        if scheme.enabled:
            cfg = base_config.replace(special_tokens=True, special_token_scheme=name)
        else:
            cfg = base_config.replace(special_tokens=False)
        try:
            res = _train_and_score(cfg, data, train_fn, **train_kwargs)
        except Exception as e:  # noqa: BLE001
            logger.exception("token sweep row %s failed", name)
            res = _failed_row(e)
        label = f"{scheme.open} {scheme.close}" if scheme.enabled else "N/A"
        rows.append({"scheme": name, "tokens": label, "enabled": scheme.enabled, "trial_acc": res["trial"],
                     "dev_acc": res["dev"], "status": res["status"], "error": res["error"]})
    return ResultTable(
        title="Special token sweep",
        columns=["tokens", "trial_acc", "dev_acc", "status"],
        rows=rows,
        metadata={"seed": base_config.seed,
                  "reference_accuracy_pct": {k: list(v) for k, v in REFERENCE_RESULTS["token_sweep"].items()},
                  "reproducible": False},
    )


@dataclass
class TransferMatrix:
    """Accuracy of a model trained on one subtask (row) tested on another (column)."""

    cells: dict[str, dict[str, Optional[float]]]
    metadata: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return all(self.cells[r][c] is not None for r in SUBTASKS for c in SUBTASKS)

    def to_dict(self) -> dict[str, Any]:
        return {"rows": list(SUBTASKS), "cols": list(SUBTASKS), "cells": self.cells,
                "complete": self.complete, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "TransferMatrix":
        return cls(d["cells"], d.get("metadata", {}))

    def to_table(self) -> ResultTable:
        rows = [{"trained_on": r, "tested_on": c, "test_acc": self.cells[r][c]}
                for r in SUBTASKS for c in ((r,) + tuple(x for x in SUBTASKS if x != r))]
        return ResultTable("Cross-subtask transfer", ["trained_on", "tested_on", "test_acc"], rows, self.metadata)


def run_transfer(ckpt_by_subtask: Mapping[str, Optional[Checkpoint]],
                 test_by_subtask: Mapping[str, Optional[DatasetSplit]]) -> TransferMatrix:
    cells: dict[str, dict[str, Optional[float]]] = {r: {c: None for c in SUBTASKS} for r in SUBTASKS}
    missing = []
    for r in SUBTASKS:
        for c in SUBTASKS:
            ckpt, split = ckpt_by_subtask.get(r), test_by_subtask.get(c)
            if ckpt is None or split is None or len(split) == 0 or not split.labeled:
                missing.append(f"{r}->{c}")
                continue
            cells[r][c] = evaluate(ckpt, split).accuracy
    meta = {"missing": missing, "reference_accuracy_pct": dict(REFERENCE_RESULTS["transfer"]), "reproducible": False}
    return TransferMatrix(cells, meta)

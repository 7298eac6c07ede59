"""Fine-tuning loop, checkpoints and hyper-parameter grid search."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from recam.augment import Translator, TranslationCache, augment_split, concat_splits
from recam.backends import (
    EncoderBackend,
    backend_from_spec,
    build_backend,
    build_tokenizer,
    make_embedder,
    tokenizer_from_dict,
)
from recam.config import RunConfig
from recam.dataset import DatasetSplit, Example
from recam.errors import ResourceExhausted, TrainingAborted, ValidationError
from recam.losses import UncertaintyParams, classification_loss
from recam.model import ClassifierHead, MultipleChoiceModel, collate
from recam.ranker import EmbeddingProvider, Ranker
from recam.textprep import EncodedInstance, Tokenizer, encode_example

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class Features:
    example_id: str
    instances: tuple[EncodedInstance, ...]
    label: Optional[int]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def passage_for(example: Example, config: RunConfig, ranker: Ranker | None) -> str:
    if ranker is None or not example.article.strip():
        return example.article
    return ranker.rank(example.article, example.question).rearranged_text


def prepare_features(split: DatasetSplit | Sequence[Example], tokenizer: Tokenizer, config: RunConfig,
                     embedder: EmbeddingProvider | None = None) -> list[Features]:
    """Encode every example; re-ranks passages first when sentence ranking is on."""
    ranker = None
    if config.sentence_ranking:
        ranker = Ranker(embedder or make_embedder(config), recall_only=config.rank_recall_only,
                        strip_placeholder=config.rank_strip_placeholder, placeholder=config.placeholder)
    out = []
    for ex in split:
        insts = encode_example(ex, passage_for(ex, config, ranker), tokenizer, config)
        out.append(Features(ex.id, tuple(insts), ex.label))
    return out


def build_model(config: RunConfig, tokenizer: Tokenizer, backend: EncoderBackend | None = None) -> MultipleChoiceModel:
    """Register the scheme's markers, grow the embedding table, attach the head."""
    if backend is None:
        backend = build_backend(config.backend, seed=config.seed, vocab_size=tokenizer.vocab_size,
                                max_positions=config.max_input_length, dropout=config.dropout)
    tokenizer.add_special_tokens(config.scheme.tokens)
    backend.resize_embeddings(tokenizer.vocab_size, seed=config.seed)
    head = ClassifierHead(backend.hidden_size, config.head_depth, config.head_init, seed=config.seed)
    uncertainty = UncertaintyParams() if config.siamese and config.use_uncertainty_loss else None
    return MultipleChoiceModel(backend, head, tokenizer.pad_id, uncertainty)


def compute_loss(model: MultipleChoiceModel, batch: dict, labels: torch.Tensor,
                 config: RunConfig) -> tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """Returns ``(total, question-branch loss or None, joint-branch loss)``.

    Named after the two siamese branches: loss1 comes from the completed
    question, loss2 from the passage-joint input.
    """
    out = model(**batch)
    alpha = config.alpha
    loss2 = classification_loss(out.joint_logits, labels, alpha)
    if not config.siamese:
        return loss2, None, loss2
    loss1 = classification_loss(out.question_logits, labels, alpha if config.smooth_both_branches else 0.0)
    if model.uncertainty is not None:
        total = model.uncertainty(loss1, loss2)
    else:
        total = loss1 + loss2
    return total, loss1, loss2


def make_batch(features: Sequence[Features], pad_id: int, siamese: bool) -> tuple[dict, torch.Tensor | None]:
    batch = collate([f.instances for f in features], pad_id, siamese=siamese)
    labels = None
    if all(f.label is not None for f in features):
        labels = torch.tensor([f.label for f in features], dtype=torch.long)
    return batch, labels


@torch.no_grad()
def predict_features(model: MultipleChoiceModel, features: Sequence[Features], batch_size: int = 32) -> list[int]:
    was_training = model.training
    model.eval()
    preds: list[int] = []
    for start in range(0, len(features), batch_size):
        batch, _ = make_batch(features[start:start + batch_size], model.pad_id, siamese=False)
        out = model(batch["joint_ids"], batch["joint_mask"])
        preds.extend(int(p) for p in torch.argmax(out.scores, dim=-1))
    model.train(was_training)
    return preds


def accuracy(model: MultipleChoiceModel, features: Sequence[Features], batch_size: int = 32) -> float:
    if not features:
        raise ValidationError("accuracy of an empty split is undefined")
    preds = predict_features(model, features, batch_size)
    return sum(p == f.label for p, f in zip(preds, features)) / len(features)


def warmup_steps(config: RunConfig, steps_per_epoch: int, total_steps: int) -> int:
    """Fractions below 1 are a share of all steps; 1 and above count epochs."""
    if config.warmup < 1:
        return int(round(config.warmup * total_steps))
    return int(round(config.warmup * steps_per_epoch))


def linear_schedule(warmup: int, total: int) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if step < warmup:
            return step / warmup
        if total <= warmup:
            return 1.0
        return max(0.0, (total - step) / (total - warmup))

    return factor


def param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "bias" or "norm" in name.lower() or name.startswith("uncertainty."):
            no_decay.append(p)
        else:
            decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


@dataclass
class Checkpoint:
    model: MultipleChoiceModel
    tokenizer: Tokenizer
    config: RunConfig
    dev_accuracy: float
    epoch: int
    optimizer_state: dict = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    def save(self, directory: str | Path) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save(self.model.state_dict(), d / "model.pt")
        torch.save(self.optimizer_state, d / "optimizer.pt")
        (d / "config.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        (d / "tokenizer.json").write_text(json.dumps(self.tokenizer.to_dict(), ensure_ascii=False) + "\n")
        with open(d / "train_log.jsonl", "w", encoding="utf-8") as f:
            for rec in self.log:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        manifest = {
            "format_version": CHECKPOINT_FORMAT,
            "backend": self.model.backend.spec(),
            "dev_accuracy": self.dev_accuracy,
            "epoch": self.epoch,
            "history": self.history,
            "has_uncertainty": self.model.uncertainty is not None,
            "files": ["model.pt", "optimizer.pt", "config.json", "tokenizer.json", "train_log.jsonl"],
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format_version") != CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
        config = RunConfig.from_dict(json.loads((d / "config.json").read_text()))
        tokenizer = tokenizer_from_dict(json.loads((d / "tokenizer.json").read_text()))
        backend = backend_from_spec(manifest["backend"])
        head = ClassifierHead(backend.hidden_size, config.head_depth, config.head_init, seed=config.seed)
        uncertainty = UncertaintyParams() if manifest["has_uncertainty"] else None
        model = MultipleChoiceModel(backend, head, tokenizer.pad_id, uncertainty)
        model.load_state_dict(torch.load(d / "model.pt", weights_only=True))
        model.eval()
        log = [json.loads(line) for line in (d / "train_log.jsonl").read_text().splitlines() if line]
        return cls(model, tokenizer, config, manifest["dev_accuracy"], manifest["epoch"],
                   torch.load(d / "optimizer.pt", weights_only=True), log, manifest.get("history", []))


StepHook = Callable[[dict, MultipleChoiceModel], None]


def _grad_norm(params) -> float:
    grads = [p.grad.detach().flatten() for p in params if p.grad is not None]
    return float(torch.cat(grads).norm()) if grads else 0.0


def train(train_split: DatasetSplit, dev_split: DatasetSplit, config: RunConfig,
          backend: EncoderBackend | None = None, tokenizer: Tokenizer | None = None,
          embedder: EmbeddingProvider | None = None, translator: Translator | None = None,
          cache: TranslationCache | None = None, hooks: Sequence[StepHook] = (),
          log_path: str | Path | None = None) -> Checkpoint:
    """Fine-tune on ``train_split`` and keep the epoch with the best dev accuracy.

    AdamW with linear warm-up then linear decay to zero, global-norm
    clipping every step. The step log is also written to ``log_path``
    when given. Ties in dev accuracy keep the earlier epoch.
    """
    if not train_split.labeled or not dev_split.labeled:
        raise ValidationError("train and dev splits must be labeled")
    if len(train_split) == 0 or len(dev_split) == 0:
        raise ValidationError("train and dev splits must be non-empty")
    seed_everything(config.seed)

    if config.back_translation:
        if translator is None:
            raise ValidationError("back_translation is on but no translator was given")
        pseudo = augment_split(train_split, translator, config.pivots, cache)
        logger.info("back translation added %d pseudo examples", len(pseudo))
        train_split = concat_splits(train_split, pseudo)

    if tokenizer is None:
        tokenizer = build_tokenizer(config.backend, (t for ex in train_split
                                                     for t in (ex.article, ex.question, *ex.options)))
    model = build_model(config, tokenizer, backend)
    if embedder is None and config.sentence_ranking:
        embedder = make_embedder(config)
    train_feats = prepare_features(train_split, tokenizer, config, embedder)
    dev_feats = prepare_features(dev_split, tokenizer, config, embedder)

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = AdamW(param_groups(model, config.weight_decay), lr=config.learning_rate,
                      betas=config.adam_betas, eps=config.adam_eps)
    steps_per_epoch = math.ceil(len(train_feats) / config.batch_size)
    total = steps_per_epoch * config.epochs
    scheduler = LambdaLR(optimizer, linear_schedule(warmup_steps(config, steps_per_epoch, total), total))
    gen = torch.Generator().manual_seed(config.seed)

    log: list[dict] = []
    history: list[dict] = []
    best = None
    step = 0
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = torch.randperm(len(train_feats), generator=gen).tolist()
            for start in range(0, len(order), config.batch_size):
                chunk = [train_feats[i] for i in order[start:start + config.batch_size]]
                batch, labels = make_batch(chunk, model.pad_id, config.siamese)
                lr = optimizer.param_groups[0]["lr"]
                try:
                    loss, loss1, loss2 = compute_loss(model, batch, labels, config)
                    if not torch.isfinite(loss):
                        raise TrainingAborted("non-finite loss", {
                            "step": step, "batch_ids": [f.example_id for f in chunk],
                            "loss": float(loss.detach()), "loss1": None if loss1 is None else float(loss1.detach()),
                            "loss2": float(loss2.detach())})
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                except RuntimeError as e:
                    if "out of memory" in str(e).lower():
                        raise ResourceExhausted(
                            f"out of memory at step {step} with batch_size={config.batch_size}; "
                            "try a smaller batch size or max_input_length") from e
                    raise
                grad_norm = float(torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm))
                rec = {
                    "step": step,
                    "epoch": epoch,
                    "loss": float(loss.detach()),
                    "loss1": None if loss1 is None else float(loss1.detach()),
                    "loss2": float(loss2.detach()),
                    "lr": lr,
                    "grad_norm": grad_norm,
                    "grad_norm_clipped": _grad_norm(params),
                }
                for hook in hooks:
                    hook(rec, model)
                optimizer.step()
                scheduler.step()
                step += 1
                log.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            dev_acc = accuracy(model, dev_feats, config.eval_batch_size)
            history.append({"epoch": epoch, "dev_accuracy": dev_acc})
            logger.info("epoch %d dev accuracy %.4f", epoch, dev_acc)
            if best is None or dev_acc > best["dev_accuracy"]:
                best = {"dev_accuracy": dev_acc, "epoch": epoch,
                        "state": copy.deepcopy(model.state_dict()),
                        "optimizer": copy.deepcopy(optimizer.state_dict())}
    finally:
        if log_file:
            log_file.close()

    model.load_state_dict(best["state"])
    model.eval()
    return Checkpoint(model, tokenizer, config, best["dev_accuracy"], best["epoch"],
                      best["optimizer"], log, history)


@dataclass
class GridCell:
    index: int
    config: RunConfig
    dev_accuracy: Optional[float]
    status: str
    error: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "config": self.config.to_dict(), "dev_accuracy": self.dev_accuracy,
                "status": self.status, "error": self.error}


def grid_search(configs: Sequence[RunConfig], train_split: DatasetSplit, dev_split: DatasetSplit,
                **train_kwargs) -> tuple[Optional[Checkpoint], list[GridCell]]:
    """Train every config; leaderboard sorted by dev accuracy, ties by config order.

    A failing cell is recorded and the search carries on.
    """
    if not configs:
        raise ValidationError("grid_search needs at least one config")
    cells: list[GridCell] = []
    best: Optional[Checkpoint] = None
    for i, cfg in enumerate(configs):
        try:
            ckpt = train(train_split, dev_split, cfg, **train_kwargs)
        except Exception as e:  # noqa: BLE001 - a bad cell must not sink the sweep
            logger.exception("grid cell %d failed", i)
            cells.append(GridCell(i, cfg, None, "failed", f"{type(e).__name__}: {e}"))
            continue
        cells.append(GridCell(i, cfg, ckpt.dev_accuracy, "ok"))
        if best is None or ckpt.dev_accuracy > best.dev_accuracy:
            best = ckpt
    ranked = sorted(cells, key=lambda c: (c.dev_accuracy is None, -(c.dev_accuracy or 0.0), c.index))
    return best, ranked

"""Multiple-choice scorer over a pluggable encoder, with an optional siamese branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from recam.backends import EncoderBackend
from recam.dataset import NUM_OPTIONS
from recam.errors import ContractError
from recam.losses import UncertaintyParams
from recam.textprep import EncodedInstance


class ClassifierHead(nn.Module):
    """Feed-forward map from a first-token state to one logit.

    ``depth=1`` is a single linear layer; deeper heads insert tanh hidden
    layers. ``init="zeros"`` zeroes the output layer so an untrained model
    scores every candidate equally.
    """

    def __init__(self, hidden_size: int, depth: int = 1, init: str = "zeros", seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers: list[nn.Module] = []
            for _ in range(depth - 1):
                layers += [nn.Linear(hidden_size, hidden_size), nn.Tanh()]
            self.out = nn.Linear(hidden_size, 1)
            self.hidden = nn.Sequential(*layers)
            if init == "zeros":
                nn.init.zeros_(self.out.weight)
                nn.init.zeros_(self.out.bias)
            else:
                nn.init.normal_(self.out.weight, std=0.02)
                nn.init.zeros_(self.out.bias)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        return self.out(self.hidden(states)).squeeze(-1)


@dataclass
class ModelOutput:
    joint_first_token_states: torch.Tensor  # (..., 5, H)
    joint_logits: torch.Tensor  # (..., 5)
    scores: torch.Tensor  # softmax of joint_logits
    question_first_token_states: Optional[torch.Tensor] = None
    question_logits: Optional[torch.Tensor] = None
    question_scores: Optional[torch.Tensor] = None


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[row, : len(s)] = True
    return ids, mask


def collate(groups: Sequence[Sequence[EncodedInstance]], pad_id: int, siamese: bool = False):
    """Stack per-example candidate groups into ``(B, 5, L)`` id/mask tensors."""
    for g in groups:
        if len(g) != NUM_OPTIONS:
            raise ContractError(f"expected {NUM_OPTIONS} instances per example, got {len(g)}")
        if len({inst.example_id for inst in g}) != 1:
            raise ContractError("instances in one group must come from one example")
    b = len(groups)
    joint_ids, joint_mask = pad_batch([i.joint_ids for g in groups for i in g], pad_id)
    batch = {
        "joint_ids": joint_ids.view(b, NUM_OPTIONS, -1),
        "joint_mask": joint_mask.view(b, NUM_OPTIONS, -1),
    }
    if siamese:
        if any(i.question_only_ids is None for g in groups for i in g):
            raise ContractError("siamese scoring needs question_only_ids on every instance")
        q_ids, q_mask = pad_batch([i.question_only_ids for g in groups for i in g], pad_id)
        batch["question_ids"] = q_ids.view(b, NUM_OPTIONS, -1)
        batch["question_mask"] = q_mask.view(b, NUM_OPTIONS, -1)
    return batch


def _branch(backend: EncoderBackend, head: ClassifierHead, ids: torch.Tensor, mask: torch.Tensor):
    lead = ids.shape[:-1]
    hidden = backend.encode(ids.reshape(-1, ids.shape[-1]), mask.reshape(-1, mask.shape[-1]))
    first = hidden[:, 0].reshape(*lead, -1)
    return first, head(first)


class MultipleChoiceModel(nn.Module):
    """Encoder + head; the siamese branch reuses the very same modules."""

    def __init__(self, backend: EncoderBackend, head: ClassifierHead, pad_id: int = 0,
                 uncertainty: UncertaintyParams | None = None):
        super().__init__()
        self.backend = backend
        self.head = head
        self.pad_id = pad_id
        self.uncertainty = uncertainty

    def forward(self, joint_ids, joint_mask, question_ids=None, question_mask=None) -> ModelOutput:
        states, logits = _branch(self.backend, self.head, joint_ids, joint_mask)
        out = ModelOutput(states, logits, torch.softmax(logits, dim=-1))
        if question_ids is not None:
            q_states, q_logits = _branch(self.backend, self.head, question_ids, question_mask)
            out.question_first_token_states = q_states
            out.question_logits = q_logits
            out.question_scores = torch.softmax(q_logits, dim=-1)
        return out


def _single(output: ModelOutput) -> ModelOutput:
    return ModelOutput(*(None if v is None else v[0] for v in vars(output).values()))


def score_candidates(instances: Sequence[EncodedInstance], backend: EncoderBackend,
                     head: ClassifierHead, pad_id: int = 0) -> ModelOutput:
    """Softmax over the five joint-input logits of one example."""
    batch = collate([list(instances)], pad_id)
    return _single(MultipleChoiceModel(backend, head, pad_id)(batch["joint_ids"], batch["joint_mask"]))


def score_siamese(instances: Sequence[EncodedInstance], backend: EncoderBackend,
                  head: ClassifierHead, pad_id: int = 0) -> ModelOutput:
    """Joint path plus the completed-question path through the shared encoder/head."""
    batch = collate([list(instances)], pad_id, siamese=True)
    return _single(MultipleChoiceModel(backend, head, pad_id)(**batch))


def predict(output: ModelOutput) -> int | torch.Tensor:
    """Argmax of the joint scores; ties go to the lowest index."""
    if output.scores is None:
        raise ContractError("scores not populated")
    # torch.argmax returns the first maximal index
    pred = torch.argmax(output.scores, dim=-1)
    return int(pred) if pred.dim() == 0 else pred

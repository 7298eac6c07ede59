"""Concrete encoders and embedding providers.

``tiny``: a small trainable transformer, deterministic for a given seed.
``pretrained``: an adapter over a locally stored Hugging Face encoder.
The asset root comes from ``$RECAM_ASSETS`` (default ``~/.cache/recam``);
the encoder is expected under ``<root>/<name>`` with its tokenizer files.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from recam.config import RunConfig
from recam.errors import MissingAssetsError, ValidationError
from recam.ranker import EmbeddingProvider, OneHotEmbedder
from recam.textprep import Tokenizer, WordTokenizer

ASSETS_ENV = "RECAM_ASSETS"
DEFAULT_PRETRAINED = "roberta-large"


def assets_root() -> Path:
    return Path(os.environ.get(ASSETS_ENV, Path.home() / ".cache" / "recam"))


class EncoderBackend(nn.Module):
    """Token ids in, per-position hidden states out."""

    hidden_size: int
    deterministic: bool = True

    def encode(self, input_ids: torch.Tensor, attention_mask: torch.Tensor | None = None) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, input_ids, attention_mask=None):
        return self.encode(input_ids, attention_mask)

    def resize_embeddings(self, new_size: int, seed: int = 0) -> None:
        raise NotImplementedError

    def spec(self) -> dict:
        """What a checkpoint needs to rebuild this backend."""
        raise NotImplementedError


class TinyEncoder(EncoderBackend):
    def __init__(self, vocab_size: int, hidden: int = 32, layers: int = 2, heads: int = 2,
                 ff: int = 64, max_positions: int = 512, dropout: float = 0.0, seed: int = 0):
        super().__init__()
        self.hidden_size = hidden
        self._spec = dict(kind="tiny", vocab_size=vocab_size, hidden=hidden, layers=layers, heads=heads,
                          ff=ff, max_positions=max_positions, dropout=dropout, seed=seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.tokens = nn.Embedding(vocab_size, hidden)
            self.positions = nn.Embedding(max_positions, hidden)
            self.norm = nn.LayerNorm(hidden)
            layer = nn.TransformerEncoderLayer(hidden, heads, ff, dropout=dropout, activation="gelu",
                                               batch_first=True)
            self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
            nn.init.normal_(self.tokens.weight, std=0.02)
            nn.init.normal_(self.positions.weight, std=0.02)

    def encode(self, input_ids, attention_mask=None):
        n = input_ids.shape[-1]
        if n > self.positions.num_embeddings:
            raise ValidationError(f"sequence length {n} exceeds {self.positions.num_embeddings} positions")
        pos = torch.arange(n, device=input_ids.device)
        h = self.norm(self.tokens(input_ids) + self.positions(pos))
        pad_mask = None if attention_mask is None else ~attention_mask.bool()
        return self.encoder(h, src_key_padding_mask=pad_mask)

    def resize_embeddings(self, new_size: int, seed: int = 0) -> None:
        old = self.tokens
        if new_size < old.num_embeddings:
            raise ValidationError("cannot shrink the embedding table")
        if new_size == old.num_embeddings:
            return
        gen = torch.Generator().manual_seed(seed * 1_000_003 + old.num_embeddings)
        extra = torch.randn(new_size - old.num_embeddings, self.hidden_size, generator=gen) * 0.02
        table = nn.Embedding(new_size, self.hidden_size)
        with torch.no_grad():
            table.weight.copy_(torch.cat([old.weight.detach(), extra.to(old.weight.dtype)]))
        self.tokens = table.to(old.weight.dtype)
        self._spec["vocab_size"] = new_size

    def spec(self) -> dict:
        return dict(self._spec)


class PretrainedEncoder(EncoderBackend):
    """Adapter over a Hugging Face encoder loaded from a local directory."""

    def __init__(self, path: str | Path):
        super().__init__()
        from transformers import AutoModel

        self.path = Path(path)
        self.model = AutoModel.from_pretrained(str(self.path))
        self.hidden_size = self.model.config.hidden_size
        self._extra_vocab = 0

    def encode(self, input_ids, attention_mask=None):
        if attention_mask is None:
            attention_mask = torch.ones_like(input_ids)
        return self.model(input_ids=input_ids, attention_mask=attention_mask.long()).last_hidden_state

    def resize_embeddings(self, new_size: int, seed: int = 0) -> None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.model.resize_token_embeddings(new_size, mean_resizing=False)

    def spec(self) -> dict:
        return {"kind": "pretrained", "path": str(self.path),
                "vocab_size": self.model.get_input_embeddings().num_embeddings}


class PretrainedTokenizer(Tokenizer):
    """:class:`~recam.textprep.Tokenizer` over a Hugging Face tokenizer."""

    def __init__(self, path: str | Path):
        from transformers import AutoTokenizer

        self.path = Path(path)
        self.tok = AutoTokenizer.from_pretrained(str(self.path))
        t = self.tok
        self.bos_id = t.cls_token_id if t.cls_token_id is not None else t.bos_token_id
        self.eos_id = t.sep_token_id if t.sep_token_id is not None else t.eos_token_id
        self.pad_id = t.pad_token_id if t.pad_token_id is not None else self.eos_id
        if self.bos_id is None or self.eos_id is None:
            raise ValidationError(f"tokenizer at {path} lacks start/end tokens")
        self._special: list[str] = []
        self._sep_block = self._pair_separator()

    def _pair_separator(self) -> tuple[int, ...]:
        # the special ids the tokenizer itself puts between two segments
        enc = self.tok("a", "b", return_special_tokens_mask=True)
        ids, mask = enc["input_ids"], enc["special_tokens_mask"]
        i = mask.index(0)
        while i < len(mask) and mask[i] == 0:
            i += 1
        j = i
        while j < len(mask) and mask[j] == 1:
            j += 1
        if j == len(mask):
            return (self.eos_id,)
        return tuple(ids[i:j])

    @property
    def sep_block(self):
        return self._sep_block

    @property
    def vocab_size(self):
        return len(self.tok)

    @property
    def special_tokens(self):
        return tuple(self._special)

    def encode(self, text):
        return list(self.tok(text, add_special_tokens=False)["input_ids"])

    def decode(self, ids):
        return self.tok.decode(list(ids))

    def add_special_tokens(self, tokens: Iterable[str]) -> list[int]:
        tokens = list(tokens)
        self.tok.add_tokens(tokens, special_tokens=True)
        for t in tokens:
            if t not in self._special:
                self._special.append(t)
        return [self.tok.convert_tokens_to_ids(t) for t in tokens]

    def to_dict(self) -> dict:
        return {"kind": "pretrained", "path": str(self.path), "special_tokens": list(self._special)}

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainedTokenizer":
        tok = cls(d["path"])
        tok.add_special_tokens(d.get("special_tokens", ()))
        return tok


class EncoderEmbedder:
    """Contextual token vectors from a frozen encoder (start/end positions dropped)."""

    concurrent_safe = False

    def __init__(self, backend: EncoderBackend, tokenizer: Tokenizer):
        self.backend = backend.eval()
        self.tokenizer = tokenizer

    @torch.no_grad()
    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            ids = [self.tokenizer.bos_id, *self.tokenizer.encode(text), self.tokenizer.eos_id]
            h = self.backend.encode(torch.tensor([ids]))[0, 1:-1]
            out.append(h.double().numpy())
        return out


def pretrained_path(name: str = DEFAULT_PRETRAINED) -> Path:
    path = Path(name) if os.path.isabs(name) else assets_root() / name
    if not (path / "config.json").exists():
        raise MissingAssetsError(
            f"pretrained encoder not found: expected {path / 'config.json'}. "
            f"Download the model there or point ${ASSETS_ENV} at the directory holding {name!r}."
        )
    return path


def build_backend(kind: str, seed: int = 0, vocab_size: int | None = None,
                  name: str = DEFAULT_PRETRAINED, **tiny_kwargs) -> EncoderBackend:
    if kind == "tiny":
        if vocab_size is None:
            raise ValidationError("tiny backend needs vocab_size")
        return TinyEncoder(vocab_size, seed=seed, **tiny_kwargs)
    if kind == "pretrained":
        return PretrainedEncoder(pretrained_path(name))
    raise ValidationError(f"unknown backend kind {kind!r}")


def backend_from_spec(spec: dict) -> EncoderBackend:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "tiny":
        return TinyEncoder(**spec)
    enc = PretrainedEncoder(spec["path"])
    enc.resize_embeddings(spec["vocab_size"])
    return enc


def build_tokenizer(kind: str, texts: Iterable[str] = (), name: str = DEFAULT_PRETRAINED) -> Tokenizer:
    if kind == "tiny":
        return WordTokenizer.from_texts(texts)
    if kind == "pretrained":
        return PretrainedTokenizer(pretrained_path(name))
    raise ValidationError(f"unknown backend kind {kind!r}")


def tokenizer_from_dict(d: dict) -> Tokenizer:
    if d["kind"] == "word":
        return WordTokenizer.from_dict(d)
    return PretrainedTokenizer.from_dict(d)


def make_embedder(config: RunConfig, name: str = DEFAULT_PRETRAINED) -> EmbeddingProvider:
    """Ranking embedder, independent of the model being fine-tuned."""
    if config.backend == "tiny":
        return OneHotEmbedder()
    path = pretrained_path(name)
    return EncoderEmbedder(PretrainedEncoder(path), PretrainedTokenizer(path))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

"""Back-translation of passages (en -> pivot -> en) into pseudo training examples.

Questions and options are never translated: the placeholder marker would
not survive a round trip.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Protocol, Sequence

import httpx

from recam.dataset import DatasetSplit
from recam.errors import TranslationError, ValidationError
from recam.ranker import split_sentences

logger = logging.getLogger(__name__)

CACHE_ENV = "RECAM_TRANSLATION_CACHE"
MAX_REQUEST_CHARS = 4500


class Translator(Protocol):
    is_concurrent_safe: bool

    def translate(self, text: str, source: str, target: str) -> str: ...


class IdentityTranslator:
    is_concurrent_safe = True

    def __init__(self):
        self.calls = 0

    def translate(self, text, source, target):
        self.calls += 1
        return text


class MockTranslator:
    """Upper-cases on the way out of English, lower-cases on the way back."""

    is_concurrent_safe = True

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def translate(self, text, source, target):
        with self._lock:
            self.calls += 1
        return text.upper() if source == "en" else text.lower()


def chunk_text(text: str, limit: int = MAX_REQUEST_CHARS) -> list[str]:
    """Greedy packing of whole sentences into pieces of at most ``limit`` chars.

    A sentence longer than ``limit`` is cut at whitespace, or hard-cut if
    it has none.
    """
    pieces: list[str] = []
    for sent in split_sentences(text).sentences:
        while len(sent) > limit:
            cut = sent.rfind(" ", 0, limit + 1)
            cut = cut if cut > 0 else limit
            pieces.append(sent[:cut].strip())
            sent = sent[cut:].strip()
        if sent:
            pieces.append(sent)
    chunks: list[str] = []
    for p in pieces:
        if chunks and len(chunks[-1]) + 1 + len(p) <= limit:
            chunks[-1] = f"{chunks[-1]} {p}"
        else:
            chunks.append(p)
    return chunks


class HttpTranslator:
    """JSON-over-HTTP client for a LibreTranslate-style endpoint.

    Sends ``{"q", "source", "target", "format", "api_key"}`` and reads
    ``translatedText``. Endpoint and key come from the caller or from
    ``RECAM_TRANSLATE_URL`` / ``RECAM_TRANSLATE_KEY``.
    """

    is_concurrent_safe = True

    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 client: httpx.Client | None = None, timeout: float = 30.0,
                 max_chars: int = MAX_REQUEST_CHARS, min_interval: float = 0.0):
        self.endpoint = endpoint or os.environ.get("RECAM_TRANSLATE_URL")
        if not self.endpoint:
            raise ValidationError("HTTP translator needs an endpoint (argument or $RECAM_TRANSLATE_URL)")
        self.api_key = api_key if api_key is not None else os.environ.get("RECAM_TRANSLATE_KEY")
        self.client = client or httpx.Client(timeout=timeout)
        self.max_chars = max_chars
        self.min_interval = min_interval
        self._last = 0.0
        self._lock = threading.Lock()
        self.requests = 0

    def _throttle(self):
        if self.min_interval <= 0:
            return
        with self._lock:
            wait = self._last + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last = time.monotonic()

    def _request(self, chunk: str, source: str, target: str) -> str:
        self._throttle()
        payload = {"q": chunk, "source": source, "target": target, "format": "text"}
        if self.api_key:
            payload["api_key"] = self.api_key
        self.requests += 1
        try:
            resp = self.client.post(self.endpoint, json=payload)
        except httpx.HTTPError as e:
            raise TranslationError(f"request failed: {e}") from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TranslationError(f"service returned {resp.status_code}")
        if resp.status_code >= 400:
            raise TranslationError(f"service rejected request ({resp.status_code})", retriable=False)
        try:
            out = resp.json()["translatedText"]
        except (ValueError, KeyError, TypeError) as e:
            raise TranslationError(f"malformed response: {e}") from e
        if chunk.strip() and not str(out).strip():
            raise TranslationError("empty translation for non-empty input")
        return str(out)

    def translate(self, text, source, target):
        return " ".join(self._request(c, source, target) for c in chunk_text(text, self.max_chars))


class TranslationCache:
    """Translation memo keyed by ``(sha256(text), source, target)``.

    With a directory, entries persist as one file each, written to a temp
    file and renamed into place.
    """

    def __init__(self, directory: str | Path | None = None):
        if directory is None and os.environ.get(CACHE_ENV):
            directory = os.environ[CACHE_ENV]
        self.directory = Path(directory) if directory else None
        self._mem: dict[tuple[str, str, str], str] = {}
        self._lock = threading.Lock()
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(text: str, source: str, target: str) -> tuple[str, str, str]:
        return hashlib.sha256(text.encode("utf-8")).hexdigest(), source, target

    def _path(self, key) -> Path:
        digest, src, tgt = key
        return self.directory / digest[:2] / f"{digest}.{src}-{tgt}.txt"

    def get(self, text, source, target) -> Optional[str]:
        key = self.key(text, source, target)
        with self._lock:
            if key in self._mem:
                return self._mem[key]
        if self.directory:
            path = self._path(key)
            if path.exists():
                value = path.read_text(encoding="utf-8")
                with self._lock:
                    self._mem[key] = value
                return value
        return None

    def put(self, text, source, target, value: str) -> None:
        key = self.key(text, source, target)
        with self._lock:
            self._mem[key] = value
        if self.directory:
            path = self._path(key)
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(value)
            os.replace(tmp, path)


def _translate_with_retry(translator: Translator, text: str, source: str, target: str,
                          cache: TranslationCache, max_retries: int, backoff: float) -> str:
    hit = cache.get(text, source, target)
    if hit is not None:
        return hit
    for attempt in range(1, max_retries + 1):
        try:
            out = translator.translate(text, source, target)
        except TranslationError as e:
            if not e.retriable or attempt == max_retries:
                raise TranslationError(f"{source}->{target} failed: {e}", attempts=attempt, retriable=False) from e
            logger.warning("translation %s->%s failed (attempt %d/%d): %s", source, target, attempt, max_retries, e)
            if backoff:
                time.sleep(backoff * 2 ** (attempt - 1))
            continue
        if text.strip() and not out.strip():
            raise TranslationError("translator returned empty text", attempts=attempt, retriable=False)
        cache.put(text, source, target, out)
        return out
    raise AssertionError("unreachable")


def back_translate(article: str, translator: Translator, pivot: str = "fr",
                   cache: TranslationCache | None = None, max_retries: int = 3,
                   backoff: float = 0.0, source: str = "en") -> str:
    """Round-trip ``article`` through ``pivot``; both legs are cached."""
    if not article.strip():
        raise ValidationError("cannot back-translate an empty article")
    cache = cache if cache is not None else TranslationCache()
    there = _translate_with_retry(translator, article, source, pivot, cache, max_retries, backoff)
    return _translate_with_retry(translator, there, pivot, source, cache, max_retries, backoff)


def augment_split(split: DatasetSplit, translator: Translator, pivots: Sequence[str] = ("fr",),
                  cache: TranslationCache | None = None, max_retries: int = 3, backoff: float = 0.0,
                  parallelism: int = 1) -> DatasetSplit:
    """One pseudo example per (example, pivot) with a back-translated article.

    Examples whose translation keeps failing are skipped; their ids are
    listed in ``meta["skipped"]``. Copies whose article came back
    unchanged are kept.
    """
    if not split.labeled:
        raise ValidationError(f"augmentation needs a labeled split, {split.name!r} is not")
    cache = cache if cache is not None else TranslationCache()
    pivots = tuple(pivots)

    def one(job):
        ex, pivot = job
        suffix = "-bt" if len(pivots) == 1 else f"-bt-{pivot}"
        try:
            new_article = back_translate(ex.article, translator, pivot, cache, max_retries, backoff) \
                if ex.article.strip() else ex.article
        except TranslationError as e:
            logger.error("skipping %s (pivot %s) after %d attempt(s): %s", ex.id, pivot, e.attempts, e)
            return None
        return dataclasses.replace(ex, id=ex.id + suffix, article=new_article,
                                   provenance={"pivot_language": pivot, "original_id": ex.id})

    jobs = [(ex, p) for ex in split for p in pivots]
    workers = parallelism if getattr(translator, "is_concurrent_safe", False) else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]

    kept = tuple(r for r in results if r is not None)
    skipped = [ex.id for (ex, _), r in zip(jobs, results) if r is None]
    if skipped:
        logger.warning("back translation skipped %d example(s)", len(skipped))
    meta = {"source": split.meta.get("source"), "pivots": list(pivots), "skipped": skipped}
    return DatasetSplit(split.name, kept, split.subtask, meta=meta)


def concat_splits(first: DatasetSplit, *others: DatasetSplit) -> DatasetSplit:
    examples = list(first.examples)
    for s in others:
        examples.extend(s.examples)
    return DatasetSplit(first.name, tuple(examples), first.subtask, meta=dict(first.meta))

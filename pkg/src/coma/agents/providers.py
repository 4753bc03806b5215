"""Chat and embedding providers.

Live chat speaks the common chat-completions JSON shape over HTTP; the scripted
provider replays a transcript so whole workflows run offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

API_KEY_ENV = "COMA_API_KEY"


class ProviderError(RuntimeError):
    pass


class TranscriptExhausted(ProviderError):
    pass


class TranscriptMismatch(ProviderError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad role {self.role!r}")
        if not self.content:
            raise ValueError("empty message content")

    def to_json(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass
class ProviderConfig:
    endpoint: Optional[str] = None
    model: str = "gpt-4o"
    api_key_env: str = API_KEY_ENV
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 1.0
    transcript: Optional[str] = None

    def __post_init__(self):
        if (self.endpoint is None) == (self.transcript is None):
            raise ValueError("provider config needs exactly one of endpoint or transcript")


class ScriptedProvider:
    """Returns transcript replies in order; each entry must match the request's template id."""

    def __init__(self, entries: Sequence[dict]):
        self.entries = [dict(e) for e in entries]
        self.position = 0
        self.calls: List[dict] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ScriptedProvider":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, list):
            raise ProviderError(f"{path}: transcript must be a JSON array")
        return cls(data)

    def chat(self, messages: Sequence[ChatMessage], template_id: Optional[str] = None) -> str:
        with self._lock:
            if self.position >= len(self.entries):
                raise TranscriptExhausted(
                    f"transcript exhausted after {len(self.entries)} replies (wanted {template_id!r})")
            entry = self.entries[self.position]
            want = entry.get("template_id")
            if template_id is not None and want is not None and want != template_id:
                raise TranscriptMismatch(
                    f"transcript entry {self.position} is for {want!r}, request is {template_id!r}")
            self.position += 1
            self.calls.append({"template_id": template_id, "messages": [m.to_json() for m in messages]})
            return str(entry["reply"])

    @property
    def remaining(self) -> int:
        return len(self.entries) - self.position


class LiveProvider:
    def __init__(self, cfg: ProviderConfig, client=None, sleep=time.sleep):
        if cfg.endpoint is None:
            raise ValueError("live provider needs an endpoint")
        import httpx

        self.cfg = cfg
        self._httpx = httpx
        self.client = client or httpx.Client(timeout=cfg.timeout)
        self.sleep = sleep
        self.trace: List[dict] = []

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def chat(self, messages: Sequence[ChatMessage], template_id: Optional[str] = None) -> str:
        body = {"model": self.cfg.model, "messages": [m.to_json() for m in messages]}
        delay = self.cfg.backoff
        last_err: Optional[Exception] = None
        for attempt in range(self.cfg.max_retries + 1):
            try:
                resp = self.client.post(self.cfg.endpoint, json=body, headers=self._headers(),
                                        timeout=self.cfg.timeout)
            except self._httpx.TransportError as exc:
                last_err = exc
                self.trace.append({"attempt": attempt, "outcome": type(exc).__name__})
            else:
                if resp.status_code == 429 or resp.status_code >= 500:
                    last_err = ProviderError(f"HTTP {resp.status_code}")
                    self.trace.append({"attempt": attempt, "outcome": f"http_{resp.status_code}"})
                elif resp.status_code >= 400:
                    self.trace.append({"attempt": attempt, "outcome": f"http_{resp.status_code}"})
                    raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    self.trace.append({"attempt": attempt, "outcome": "ok"})
                    return _reply_text(resp.json())
            if attempt < self.cfg.max_retries:
                logger.warning("chat request failed (%s); retrying in %.2fs", last_err, delay)
                self.sleep(delay)
                delay *= 2
        raise ProviderError(f"chat request failed after {self.cfg.max_retries + 1} attempts: {last_err}")


def _reply_text(payload: dict) -> str:
    try:
        choice = payload["choices"][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProviderError("response has no choices") from exc
    if isinstance(choice.get("message"), dict):
        return str(choice["message"].get("content") or "")
    return str(choice.get("text") or "")


def make_provider(cfg: ProviderConfig):
    if cfg.transcript is not None:
        return ScriptedProvider.from_file(cfg.transcript)
    return LiveProvider(cfg)


_WORD = re.compile(r"[a-z0-9']+")


class HashEmbedder:
    """Offline text embedder: hashed word unigrams/bigrams and character trigrams.

    Deterministic across processes (no reliance on Python's salted ``hash``).
    The empty prompt maps to the all-zero null embedding.
    """

    def __init__(self, dim: int = 32):
        self.dim = dim
        self._cache: dict = {}

    def _feature(self, key: str) -> np.ndarray:
        vec = self._cache.get(key)
        if vec is None:
            seed = int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            self._cache[key] = vec
        return vec

    def embed(self, prompt: str) -> np.ndarray:
        text = prompt.strip().lower()
        if not text:
            return np.zeros(self.dim, dtype=np.float32)
        words = _WORD.findall(text)
        acc = np.zeros(self.dim)
        for w in words:
            acc += self._feature("w:" + w)
        for a, b in zip(words, words[1:]):
            acc += 0.5 * self._feature(f"b:{a} {b}")
        padded = f"  {text}  "
        for i in range(len(padded) - 2):
            acc += 0.25 * self._feature("c:" + padded[i:i + 3])
        norm = np.linalg.norm(acc)
        if norm == 0:
            acc = self._feature("raw:" + text)
            norm = np.linalg.norm(acc)
        return (acc / norm).astype(np.float32)

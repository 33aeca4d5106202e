"""Frozen semantic embeddings from prompt documents.

Providers turn a prompt into comprehension text and the text into a vector.
Three modes exist: ``mock`` (deterministic hash embedding, no network),
``file`` (vectors supplied externally, no provider at all), and ``remote``
(generic JSON-over-HTTP chat plus embedding endpoints). All provider output
is cached on disk by content hash so interrupted builds resume for free.

Embedding generation and model training are decoupled stages: once a table
is built, nothing downstream ever invokes a provider. A module-level call
counter makes that assertable.
"""

from __future__ import annotations

import hashlib
import io
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prompts import PromptDocument

log = logging.getLogger(__name__)

API_KEY_ENV = "COLAKG_API_KEY"

_TOTAL_PROVIDER_CALLS = 0


def provider_call_count() -> int:
    """Total provider invocations in this process (all providers)."""
    return _TOTAL_PROVIDER_CALLS


def _count_call() -> None:
    global _TOTAL_PROVIDER_CALLS
    _TOTAL_PROVIDER_CALLS += 1


class EmbeddingError(RuntimeError):
    pass


class CredentialError(EmbeddingError):
    pass


def hash_embed(text: str, dim: int) -> np.ndarray:
    """Deterministic bag-of-tokens embedding, L2-normalised, float32.

    Each whitespace token is hashed (SHA-256) to an (index, sign) pair and
    accumulated into a ``dim``-vector. A text whose tokens cancel exactly
    falls back to a one-hot vector derived from the full text hash, so the
    result is never the zero vector.
    """
    if not text:
        raise EmbeddingError("cannot embed empty text")
    vec = np.zeros(dim, dtype=np.float64)
    for token in text.split():
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        idx = int.from_bytes(digest[:8], "little") % dim
        sign = 1.0 if digest[8] % 2 == 0 else -1.0
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        vec[int.from_bytes(digest[:8], "little") % dim] = 1.0
        norm = 1.0
    return (vec / norm).astype(np.float32)


class MockProvider:
    """Offline provider: identity comprehension, hash embedding."""

    tag = "mock"

    def __init__(self, dim: int):
        self.dim = dim
        self.calls = 0

    def comprehend(self, prompt: PromptDocument) -> str:
        # Identity: the prompt body is its own comprehension. No model runs,
        # so this does not count as a provider call.
        return prompt.body

    def embed_text(self, text: str) -> np.ndarray:
        self.calls += 1
        _count_call()
        return hash_embed(text, self.dim)


def _dig(payload, path: str):
    """Fetch a value from nested dicts/lists by a dotted path like 'data.0.embedding'."""
    node = payload
    for part in path.split("."):
        if isinstance(node, list):
            node = node[int(part)]
        elif isinstance(node, dict):
            node = node[part]
        else:
            raise KeyError(path)
    return node


@dataclass
class RemoteSettings:
    """Endpoint configuration for generic chat and embedding HTTP APIs."""

    chat_url: str = ""
    embed_url: str = ""
    chat_model: str = ""
    embed_model: str = ""
    temperature: float = 0.0
    top_p: float = 0.001
    chat_text_path: str = "choices.0.message.content"
    embed_vector_path: str = "data.0.embedding"
    max_attempts: int = 3
    backoff_seconds: float = 0.5
    timeout_seconds: float = 60.0


def _requests_post(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    import requests

    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    resp.raise_for_status()
    return resp.json()


class RemoteProvider:
    """JSON-over-HTTP provider with retry and exponential backoff.

    ``post`` is injectable for tests; the default uses requests. The API key
    is read from the COLAKG_API_KEY environment variable.
    """

    tag = "remote"

    def __init__(self, dim: int, settings: RemoteSettings, post=None, api_key: str | None = None):
        self.dim = dim
        self.settings = settings
        self.calls = 0
        self._post = post or _requests_post
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not key:
            raise CredentialError(f"remote mode requires {API_KEY_ENV} to be set")
        self._headers = {"Authorization": f"Bearer {key}"}

    def _call(self, url: str, payload: dict):
        last: Exception | None = None
        for attempt in range(self.settings.max_attempts):
            try:
                self.calls += 1
                _count_call()
                return self._post(url, payload, self._headers, self.settings.timeout_seconds)
            except Exception as exc:  # transport or HTTP failure
                last = exc
                if attempt + 1 < self.settings.max_attempts and self.settings.backoff_seconds > 0:
                    time.sleep(self.settings.backoff_seconds * (2**attempt))
        raise EmbeddingError(f"remote call to {url} failed after {self.settings.max_attempts} attempts: {last}")

    def comprehend(self, prompt: PromptDocument) -> str:
        payload = {
            "model": self.settings.chat_model,
            "messages": [
                {"role": "system", "content": prompt.system_instruction},
                {"role": "user", "content": prompt.body},
            ],
            "temperature": self.settings.temperature,
            "top_p": self.settings.top_p,
        }
        response = self._call(self.settings.chat_url, payload)
        text = str(_dig(response, self.settings.chat_text_path))
        if not text.strip():
            raise EmbeddingError(f"empty comprehension for {prompt.kind} {prompt.subject_id}")
        return text

    def embed_text(self, text: str) -> np.ndarray:
        if not text:
            raise EmbeddingError("cannot embed empty text")
        payload = {"model": self.settings.embed_model, "input": text}
        response = self._call(self.settings.embed_url, payload)
        vec = np.asarray(_dig(response, self.settings.embed_vector_path), dtype=np.float32)
        if vec.shape != (self.dim,):
            raise EmbeddingError(f"embedding dimension {vec.shape} does not match configured {self.dim}")
        return vec


class EmbeddingCache:
    """Content-addressed file cache for comprehension text and vectors."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def prompt_key(provider_tag: str, prompt: PromptDocument) -> str:
        blob = "\x1f".join([provider_tag, prompt.kind, prompt.system_instruction, prompt.body])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @staticmethod
    def text_key(provider_tag: str, text: str) -> str:
        blob = "\x1f".join([provider_tag, "embed", text])
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def get_text(self, key: str) -> str | None:
        path = self.directory / f"{key}.txt"
        return path.read_text(encoding="utf-8") if path.exists() else None

    def put_text(self, key: str, text: str) -> None:
        (self.directory / f"{key}.txt").write_text(text, encoding="utf-8")

    def get_vector(self, key: str) -> np.ndarray | None:
        path = self.directory / f"{key}.npy"
        return np.load(path) if path.exists() else None

    def put_vector(self, key: str, vec: np.ndarray) -> None:
        np.save(self.directory / f"{key}.npy", vec)


@dataclass
class SemanticEmbeddingTable:
    """Frozen item and user vectors keyed by dense id."""

    dim: int
    item_vectors: dict[int, np.ndarray] = field(default_factory=dict)
    user_vectors: dict[int, np.ndarray] = field(default_factory=dict)
    provider_tag: str = "mock"

    def missing_ids(self, n_items: int, n_users: int) -> tuple[list[int], list[int]]:
        missing_items = [v for v in range(n_items) if v not in self.item_vectors]
        missing_users = [u for u in range(n_users) if u not in self.user_vectors]
        return missing_items, missing_users

    def validate_complete(self, n_items: int, n_users: int) -> None:
        mi, mu = self.missing_ids(n_items, n_users)
        if mi or mu:
            raise EmbeddingError(f"embedding table incomplete: missing items {mi}, missing users {mu}")

    def item_matrix(self, n_items: int) -> np.ndarray:
        return np.stack([self.item_vectors[v] for v in range(n_items)]).astype(np.float64)

    def user_matrix(self, n_users: int) -> np.ndarray:
        return np.stack([self.user_vectors[u] for u in range(n_users)]).astype(np.float64)


def build_embedding_table(
    provider,
    item_prompts: dict[int, PromptDocument],
    user_prompts: dict[int, PromptDocument],
    dim: int,
    cache: EmbeddingCache | None = None,
) -> SemanticEmbeddingTable:
    """Run comprehension + embedding over every prompt, with resume via cache.

    Ids whose vectors are already cached cost zero provider calls, so an
    interrupted build picks up where it left off.
    """
    table = SemanticEmbeddingTable(dim=dim, provider_tag=provider.tag)
    for kind, prompts, target in (
        ("item", item_prompts, table.item_vectors),
        ("user", user_prompts, table.user_vectors),
    ):
        for subject_id in sorted(prompts):
            prompt = prompts[subject_id]
            pkey = EmbeddingCache.prompt_key(provider.tag, prompt) if cache else None
            vec = cache.get_vector(pkey) if cache else None
            if vec is None:
                text = cache.get_text(pkey) if cache else None
                if text is None:
                    text = provider.comprehend(prompt)
                    if cache:
                        cache.put_text(pkey, text)
                vec = provider.embed_text(text)
                if cache:
                    cache.put_vector(pkey, vec)
            if vec.shape != (dim,):
                raise EmbeddingError(
                    f"{kind} {subject_id}: vector dimension {vec.shape[0]} does not match {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise EmbeddingError(f"{kind} {subject_id}: non-finite embedding components")
            target[subject_id] = np.asarray(vec, dtype=np.float32)
    return table


def save_table_text(table: SemanticEmbeddingTable, path: str | Path) -> None:
    """Header 'dim=<d>' then one 'kind\\tid\\tfloats' record per vector.

    Floats are written with shortest round-trip precision, so reloading gives
    bitwise-identical float32 vectors.
    """
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"dim={table.dim}\n")
        for kind, vectors in (("item", table.item_vectors), ("user", table.user_vectors)):
            for subject_id in sorted(vectors):
                floats = " ".join(repr(float(x)) for x in vectors[subject_id])
                fh.write(f"{kind}\t{subject_id}\t{floats}\n")


def load_table_text(path: str | Path, provider_tag: str = "file") -> SemanticEmbeddingTable:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise EmbeddingError(f"{path}: missing 'dim=<d>' header")
        dim = int(header[4:])
        table = SemanticEmbeddingTable(dim=dim, provider_tag=provider_tag)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 3 or fields[0] not in ("item", "user"):
                raise EmbeddingError(f"{path}:{lineno}: bad embedding record")
            vec = np.asarray([float(x) for x in fields[2].split()], dtype=np.float32)
            if vec.shape != (dim,):
                raise EmbeddingError(f"{path}:{lineno}: expected {dim} floats, got {vec.shape[0]}")
            target = table.item_vectors if fields[0] == "item" else table.user_vectors
            target[int(fields[1])] = vec
    return table


_BINARY_MAGIC = b"CLKG"
_KIND_BYTES = {"item": 0, "user": 1}


def save_table_binary(table: SemanticEmbeddingTable, path: str | Path) -> None:
    """Compact binary variant: magic, u32 dim, then (kind, u64 id, f32 data) records."""
    buf = io.BytesIO()
    buf.write(_BINARY_MAGIC)
    buf.write(struct.pack("<I", table.dim))
    for kind, vectors in (("item", table.item_vectors), ("user", table.user_vectors)):
        for subject_id in sorted(vectors):
            buf.write(struct.pack("<BQ", _KIND_BYTES[kind], subject_id))
            buf.write(vectors[subject_id].astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_table_binary(path: str | Path, provider_tag: str = "file") -> SemanticEmbeddingTable:
    raw = Path(path).read_bytes()
    if raw[:4] != _BINARY_MAGIC:
        raise EmbeddingError(f"{path}: bad magic, expected {_BINARY_MAGIC!r}")
    (dim,) = struct.unpack_from("<I", raw, 4)
    table = SemanticEmbeddingTable(dim=dim, provider_tag=provider_tag)
    offset = 8
    record = struct.Struct("<BQ")
    vec_bytes = 4 * dim
    while offset < len(raw):
        kind_byte, subject_id = record.unpack_from(raw, offset)
        offset += record.size
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=offset).copy()
        offset += vec_bytes
        target = table.item_vectors if kind_byte == 0 else table.user_vectors
        target[int(subject_id)] = vec
    return table

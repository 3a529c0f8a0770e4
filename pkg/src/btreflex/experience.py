"""Persistent, append-only store of reflective experiences with similarity retrieval.

Records live in ``experiences.jsonl``; their embeddings in ``experiences.vec``
(magic ``BTXV``, version, dimension, then one float32 row per record). Records
are written first, so a crash can only leave the vector file short; opening
the base rebuilds it from the records in that case.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from filelock import FileLock

from .errors import PersistenceError
from .refiner import ReflectiveExperience

RECORDS = "experiences.jsonl"
VECTORS = "experiences.vec"
MAGIC = b"BTXV"
VERSION = 1
HEADER = struct.Struct("<4sII")
DEFAULT_K = 3
_TOKEN = re.compile(r"[a-z0-9]+")


class EmbeddingProvider(Protocol):
    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class HashedBagOfWords:
    """Deterministic lexical embedder: hashed token and bigram counts, unit-normalized."""

    dimension: int = 256
    name: str = "hashed-bow-256"

    def _bucket(self, token: str) -> tuple[int, float]:
        h = hashlib.blake2b(token.encode(), digest_size=8).digest()
        v = int.from_bytes(h, "little")
        return v % self.dimension, 1.0 if (v >> 63) & 1 == 0 else -1.0

    def embed(self, text: str) -> np.ndarray:
        tokens = _TOKEN.findall(text.lower())
        vec = np.zeros(self.dimension, dtype=np.float64)
        for tok in tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]:
            i, sign = self._bucket(tok)
            vec[i] += sign
        norm = np.linalg.norm(vec)
        if norm == 0:
            vec[0] = 1.0
            return vec
        return vec / norm


class SentenceTransformerEmbedder:
    """Optional binding to a sentence-transformers model (install the ``embeddings`` extra)."""

    def __init__(self, model: str = "all-mpnet-base-v2") -> None:
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model)
        self.name = model
        self.dimension = int(self._model.get_sentence_embedding_dimension())

    def embed(self, text: str) -> np.ndarray:
        return np.asarray(self._model.encode(text, normalize_embeddings=True), dtype=np.float64)


def index_key(e: ReflectiveExperience) -> str:
    """Text an experience is indexed under: the task unit's instruction (never the plan)."""
    return e.instruction or e.rationale


class ExperienceBase:
    """Single-writer, many-reader experience store rooted at a directory."""

    def __init__(self, root: str | Path, provider: EmbeddingProvider | None = None) -> None:
        self.root = Path(root)
        self.provider = provider or HashedBagOfWords()
        self.root.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.root / ".lock"))
        self._writer = threading.Lock()  # the file lock alone does not serialize threads sharing this object
        self.records: list[ReflectiveExperience] = []
        self.vectors = np.zeros((0, self.provider.dimension), dtype=np.float32)
        with self.lock:
            self._load()

    @property
    def records_path(self) -> Path:
        return self.root / RECORDS

    @property
    def vectors_path(self) -> Path:
        return self.root / VECTORS

    def __len__(self) -> int:
        return len(self.records)

    def _load(self) -> None:
        self.records = []
        if self.records_path.exists():
            lines = self.records_path.read_text(encoding="utf-8").splitlines()
            for n, line in enumerate(lines, 1):
                if not line.strip():
                    continue
                try:
                    self.records.append(ReflectiveExperience.from_dict(json.loads(line)))
                except (ValueError, KeyError) as exc:
                    if n != len(lines):
                        raise PersistenceError(f"{self.records_path}:{n}: {exc}") from exc
                    # torn final line from an interrupted append: drop it so later appends stay parseable
                    self._rewrite_records()
        vectors = self._read_vectors()
        if vectors is None or len(vectors) != len(self.records):
            self.rebuild_index()
        else:
            self.vectors = vectors

    def _rewrite_records(self) -> None:
        tmp = self.records_path.with_suffix(".jsonl.tmp")
        tmp.write_text(self.export_jsonl(), encoding="utf-8")
        os.replace(tmp, self.records_path)

    def _read_vectors(self) -> np.ndarray | None:
        if not self.vectors_path.exists():
            return None
        data = self.vectors_path.read_bytes()
        if len(data) < HEADER.size:
            return None
        magic, version, dim = HEADER.unpack_from(data)
        if magic != MAGIC or version != VERSION or dim != self.provider.dimension:
            return None
        body = data[HEADER.size :]
        rows = len(body) // (4 * dim)
        return np.frombuffer(body[: rows * 4 * dim], dtype="<f4").reshape(rows, dim).copy()

    def _write_vectors(self) -> None:
        tmp = self.vectors_path.with_suffix(".vec.tmp")
        with open(tmp, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, VERSION, self.provider.dimension))
            fh.write(self.vectors.astype("<f4").tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.vectors_path)

    def rebuild_index(self) -> None:
        rows = [self.provider.embed(index_key(e)) for e in self.records]
        self.vectors = np.array(rows, dtype=np.float32).reshape(len(rows), self.provider.dimension)
        try:
            self._write_vectors()
        except OSError as exc:
            raise PersistenceError(f"cannot write {self.vectors_path}: {exc}") from exc

    def append(self, experiences: Sequence[ReflectiveExperience]) -> ExperienceBase:
        """Persist records, then their vectors; both are on disk before this returns."""
        if not experiences:
            return self
        with self._writer, self.lock:
            self._load()  # pick up appends from other writers
            try:
                with open(self.records_path, "a", encoding="utf-8") as fh:
                    for e in experiences:
                        fh.write(json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise PersistenceError(f"cannot append to {self.records_path}: {exc}") from exc
            self.records.extend(experiences)
            new = np.array([self.provider.embed(index_key(e)) for e in experiences], dtype=np.float32)
            self.vectors = np.vstack([self.vectors, new])
            try:
                self._write_vectors()
            except OSError as exc:
                raise PersistenceError(f"cannot write {self.vectors_path}: {exc}") from exc
        return self

    def scores(self, query: str) -> np.ndarray:
        if not self.records:
            return np.zeros(0)
        q = self.provider.embed(query).astype(np.float32)
        return self.vectors @ q

    def retrieve(self, query_instruction: str, k: int = DEFAULT_K) -> list[ReflectiveExperience]:
        """Top-k by cosine similarity; ties go to the newer record."""
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self.scores(query_instruction)
        # round away float32 noise so equal keys tie exactly, then newest first
        order = sorted(range(len(scores)), key=lambda i: (-round(float(scores[i]), 6), -i))
        return [self.records[i] for i in order[:k]]

    def export_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) + "\n" for e in self.records)

    def import_jsonl(self, text: str) -> int:
        items = [ReflectiveExperience.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        self.append(items)
        return len(items)


def append(base: ExperienceBase, experiences: Sequence[ReflectiveExperience]) -> ExperienceBase:
    return base.append(experiences)


def retrieve(base: ExperienceBase, query_instruction: str, k: int = DEFAULT_K) -> list[ReflectiveExperience]:
    return base.retrieve(query_instruction, k)


__all__ = [
    "DEFAULT_K",
    "EmbeddingProvider",
    "ExperienceBase",
    "HashedBagOfWords",
    "SentenceTransformerEmbedder",
    "append",
    "index_key",
    "retrieve",
]

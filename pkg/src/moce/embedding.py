"""Sequence embeddings: a toy feature-hashing embedder plus file I/O.

The embedder exists so clustering has a deterministic, dependency-free
signal: token unigrams and bigrams are hashed into ``d_e`` signed buckets,
mean-pooled and L2-normalised. Precomputed embeddings from a real encoder
can be swapped in through the same file format.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError, NumericError

EMB_MAGIC = "MOCE-EMB"
EMB_VERSION = "v1"


@dataclass
class SequenceEmbedding:
    """One embedded sequence: the unit vector plus the id it came from."""

    source_id: str
    vector: np.ndarray


@dataclass
class EmbeddingSet:
    """An ordered collection of embeddings sharing one dimension."""

    dimension: int
    items: list[SequenceEmbedding] = field(default_factory=list)

    def __post_init__(self):
        for e in self.items:
            if e.vector.shape != (self.dimension,):
                raise ContractError(
                    f"embedding '{e.source_id}' has dimension {e.vector.shape[0]}, "
                    f"set declares {self.dimension}"
                )

    def __len__(self) -> int:
        return len(self.items)

    def matrix(self) -> np.ndarray:
        """Stack vectors into an (n, d) array in insertion order."""
        if not self.items:
            return np.zeros((0, self.dimension))
        return np.stack([e.vector for e in self.items])

    def ids(self) -> list[str]:
        return [e.source_id for e in self.items]


def _hash_feature(seed: int, tag: str, payload: str) -> int:
    digest = hashlib.blake2b(f"{seed}|{tag}|{payload}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def embed_sequence(tokens: Sequence[int | str], d_e: int = 64, seed: int = 0) -> np.ndarray:
    """Hash token unigrams and bigrams into a unit vector of size ``d_e``.

    Pure in (tokens, d_e, seed): the hash is keyed, never Python's salted
    ``hash``. Bigrams make the result order-sensitive.
    """
    if d_e < 1:
        raise ContractError(f"embedding dimension must be positive, got {d_e}")
    toks = [str(t) for t in tokens]
    if not toks:
        raise ContractError("cannot embed an empty token sequence")

    v = np.zeros(d_e, dtype=np.float64)
    features = [("u", t) for t in toks] + [("b", f"{a}\x1f{b}") for a, b in zip(toks, toks[1:])]
    for tag, payload in features:
        h = _hash_feature(seed, tag, payload)
        bucket = h % d_e
        sign = 1.0 if (h >> 32) & 1 else -1.0
        v[bucket] += sign
    v /= len(features)

    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        # Total sign cancellation across buckets; fall back to a
        # deterministic unit vector so the norm contract always holds.
        v[:] = 0.0
        v[_hash_feature(seed, "z", "\x1f".join(toks)) % d_e] = 1.0
        return v
    return v / norm


def embed_dataset(sequences: list[tuple[str, Sequence[int | str]]], d_e: int = 64, seed: int = 0) -> EmbeddingSet:
    """Embed (source_id, tokens) pairs into one EmbeddingSet."""
    items = [SequenceEmbedding(sid, embed_sequence(toks, d_e, seed)) for sid, toks in sequences]
    return EmbeddingSet(dimension=d_e, items=items)


def save_embeddings(path: str, embeddings: EmbeddingSet) -> None:
    """Write the text format: a header line, then one id + vector per line.

    Values are written with 9 significant digits, enough to round-trip
    32-bit-precision storage within 1e-7.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{EMB_MAGIC} {EMB_VERSION} {len(embeddings)} {embeddings.dimension}\n")
        for e in embeddings.items:
            if any(ch.isspace() for ch in e.source_id) or not e.source_id:
                raise ContractError(f"source_id '{e.source_id}' must be non-empty and whitespace-free")
            values = " ".join(f"{x:.9g}" for x in e.vector)
            fh.write(f"{e.source_id} {values}\n")


def load_embeddings(path: str) -> EmbeddingSet:
    """Read the format written by ``save_embeddings``, validating as it goes.

    Errors carry 1-based line numbers so a corrupt row is easy to find.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("embedding file is empty")

    header = lines[0].split()
    if len(header) != 4 or header[0] != EMB_MAGIC or header[1] != EMB_VERSION:
        raise FormatError(f"line 1: expected header '{EMB_MAGIC} {EMB_VERSION} <count> <dim>'")
    try:
        count, dim = int(header[2]), int(header[3])
    except ValueError:
        raise FormatError("line 1: count and dim must be integers") from None
    if count < 0 or dim < 1:
        raise FormatError(f"line 1: invalid count {count} or dim {dim}")

    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise FormatError(f"header declares {count} rows, file has {len(body)}")

    items = []
    for offset, line in enumerate(body):
        lineno = offset + 2
        parts = line.split()
        if len(parts) != dim + 1:
            raise FormatError(f"line {lineno}: expected id plus {dim} values, got {len(parts) - 1}")
        try:
            vec = np.array([float(p) for p in parts[1:]], dtype=np.float64)
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric value") from None
        if not np.all(np.isfinite(vec)):
            raise NumericError(f"line {lineno}: non-finite embedding value")
        items.append(SequenceEmbedding(parts[0], vec))
    return EmbeddingSet(dimension=dim, items=items)

"""Embedding files, JSONL text ingestion and the hash-based synthetic embedder.

Binary layouts (all little-endian, documented in FORMAT.md)::

    embeddings: magic "LSEMBF32" | u32 version=1 | u32 dtype=1 (f32) | u32 dim | u32 0 | u64 rows | rows*dim f32
    doclens:    magic "LSDOCLEN" | u32 version=1 | u32 0 | u64 count | count u32
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from .core import (
    CorpusEmbeddings,
    InvariantViolation,
    LateSearchError,
    NotNormalized,
    QueryMatrix,
    check_unit_rows,
)

EMB_MAGIC = b"LSEMBF32"
DOCLEN_MAGIC = b"LSDOCLEN"
EMB_HEADER = struct.Struct("<8sIIIIQ")
DOCLEN_HEADER = struct.Struct("<8sIIQ")
VERSION = 1
DTYPE_F32 = 1

PathLike = Union[str, Path]


class HeaderMismatch(LateSearchError):
    pass


class LengthMismatch(LateSearchError):
    pass


class NormalizationError(NotNormalized):
    pass


def write_embeddings(path: PathLike, data: np.ndarray) -> None:
    data = np.ascontiguousarray(data, dtype="<f4")
    rows, dim = data.shape
    with open(path, "wb") as f:
        f.write(EMB_HEADER.pack(EMB_MAGIC, VERSION, DTYPE_F32, dim, 0, rows))
        data.tofile(f)


def write_doclens(path: PathLike, doclens: Sequence[int]) -> None:
    arr = np.ascontiguousarray(doclens, dtype="<u4")
    with open(path, "wb") as f:
        f.write(DOCLEN_HEADER.pack(DOCLEN_MAGIC, VERSION, 0, len(arr)))
        arr.tofile(f)


def read_embeddings(path: PathLike, validate: bool = True) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < EMB_HEADER.size:
        raise HeaderMismatch(f"{path}: file shorter than the {EMB_HEADER.size}-byte header")
    magic, version, dtype, dim, _, rows = EMB_HEADER.unpack_from(raw)
    if magic != EMB_MAGIC or version != VERSION or dtype != DTYPE_F32 or dim == 0:
        raise HeaderMismatch(f"{path}: not a version-{VERSION} float32 embedding file")
    if len(raw) - EMB_HEADER.size != rows * dim * 4:
        raise HeaderMismatch(
            f"{path}: header promises {rows}x{dim} floats, body holds {len(raw) - EMB_HEADER.size} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=EMB_HEADER.size).reshape(rows, dim).astype(np.float32)
    if validate:
        try:
            check_unit_rows(data, what="embedding row")
        except NotNormalized as e:
            raise NormalizationError(e.row, e.norm, "embedding row") from None
    return data


def read_doclens(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < DOCLEN_HEADER.size:
        raise HeaderMismatch(f"{path}: file shorter than the {DOCLEN_HEADER.size}-byte header")
    magic, version, _, count = DOCLEN_HEADER.unpack_from(raw)
    if magic != DOCLEN_MAGIC or version != VERSION:
        raise HeaderMismatch(f"{path}: not a version-{VERSION} doclens file")
    if len(raw) - DOCLEN_HEADER.size != count * 4:
        raise HeaderMismatch(f"{path}: header promises {count} lengths")
    return np.frombuffer(raw, dtype="<u4", offset=DOCLEN_HEADER.size).astype(np.int64)


def load_corpus(embeddings_path: PathLike, doclens_path: PathLike) -> CorpusEmbeddings:
    data = read_embeddings(embeddings_path)
    doclens = read_doclens(doclens_path)
    if int(doclens.sum()) != len(data):
        raise LengthMismatch(f"doclens sum to {int(doclens.sum())}, embedding file has {len(data)} rows")
    return CorpusEmbeddings(data, doclens, validate=False)


def load_query_embeddings(embeddings_path: PathLike, doclens_path: PathLike) -> List[QueryMatrix]:
    """Queries stored like a corpus: one "passage" per query, ids are 0..n-1."""
    corpus = load_corpus(embeddings_path, doclens_path)
    return [QueryMatrix(corpus.passage(i)) for i in range(corpus.num_passages)]


# -- text ----------------------------------------------------------------------

_WORD = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> List[str]:
    return _WORD.findall(text.lower())


def read_jsonl(path: PathLike) -> List[Tuple[str, str]]:
    """(id, text) pairs from a JSONL file with one {"id", "text"} object per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            if "id" not in obj or "text" not in obj:
                raise InvariantViolation(f"{path}:{lineno}: expected fields 'id' and 'text'")
            out.append((str(obj["id"]), str(obj["text"])))
    return out


def _token_seed(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             salt=seed.to_bytes(16, "little", signed=False)[:16]).digest()
    return int.from_bytes(digest, "little")


def synthetic_embed(tokens: Sequence[str], dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vectors: each distinct token maps to its own gaussian direction."""
    if dim < 8:
        raise ValueError("synthetic embeddings need dim >= 8")
    out = np.empty((len(tokens), dim), dtype=np.float32)
    cache = {}
    for i, tok in enumerate(tokens):
        vec = cache.get(tok)
        if vec is None:
            g = np.random.default_rng(_token_seed(tok, seed)).standard_normal(dim)
            vec = cache[tok] = (g / np.linalg.norm(g)).astype(np.float32)
        out[i] = vec
    return out


def embed_texts(texts: Iterable[str], dim: int, seed: int = 0) -> CorpusEmbeddings:
    rows, lens = [], []
    for text in texts:
        toks = tokenize(text)
        lens.append(len(toks))
        rows.append(synthetic_embed(toks, dim, seed))
    data = np.concatenate(rows) if rows else np.empty((0, dim), np.float32)
    return CorpusEmbeddings(data, np.array(lens, dtype=np.int64))


def embed_query(text: str, dim: int, seed: int = 0) -> QueryMatrix:
    toks = tokenize(text)
    if not toks:
        raise InvariantViolation(f"query {text!r} has no tokens")
    return QueryMatrix(synthetic_embed(toks, dim, seed))


# -- clustered synthetic corpora -------------------------------------------------

@dataclass
class SyntheticCollection:
    corpus: CorpusEmbeddings
    words: np.ndarray          # word id of every corpus token
    vocab: np.ndarray          # (V, dim) unit word directions
    queries: List[QueryMatrix]
    targets: np.ndarray        # passage each query was drawn from


def _unit(x: np.ndarray) -> np.ndarray:
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def make_collection(
    num_passages: int,
    dim: int = 64,
    vocab_size: int = 4000,
    doclen: Tuple[int, int] = (8, 40),
    zipf: float = 1.0,
    noise: float = 0.3,
    num_queries: int = 32,
    query_len: Tuple[int, int] = (4, 16),
    query_noise: float = 0.3,
    seed: int = 0,
) -> SyntheticCollection:
    """Bag-of-words corpus with contextual noise.

    Words are random unit directions drawn with Zipf frequencies; every token is
    its word direction plus isotropic gaussian noise of relative size ``noise``,
    renormalized. Each query samples words from one target passage.
    """
    rng = np.random.default_rng(seed)
    vocab = _unit(rng.standard_normal((vocab_size, dim)))
    freq = 1.0 / np.arange(1, vocab_size + 1) ** zipf
    freq /= freq.sum()
    lens = rng.integers(doclen[0], doclen[1] + 1, size=num_passages)
    words = rng.choice(vocab_size, size=int(lens.sum()), p=freq)
    scale = noise / np.sqrt(dim)
    data = np.empty((len(words), dim), dtype=np.float32)
    step = 1 << 18
    for lo in range(0, len(words), step):
        hi = min(lo + step, len(words))
        data[lo:hi] = _unit(vocab[words[lo:hi]] + scale * rng.standard_normal((hi - lo, dim), dtype=np.float32))
    corpus = CorpusEmbeddings(data, lens)

    targets = rng.integers(num_passages, size=num_queries)
    queries = []
    qscale = query_noise / np.sqrt(dim)
    for p in targets:
        pw = words[corpus.passage_offsets[p]:corpus.passage_offsets[p + 1]]
        qlen = int(rng.integers(query_len[0], query_len[1] + 1))
        picked = rng.choice(pw, size=qlen, replace=qlen > len(pw))
        queries.append(QueryMatrix(_unit(vocab[picked] + qscale * rng.standard_normal((qlen, dim)))))
    return SyntheticCollection(corpus, words, vocab, queries, targets)

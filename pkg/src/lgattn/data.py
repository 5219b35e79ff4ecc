"""Byte-level tokenization, BOS/EOS document packing and length buckets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from lgattn.errors import ContractError
from lgattn.model import BOS, EOS

FIRST_BUCKET_MAX = 128


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Document:
    text: str
    id: str

    def __post_init__(self):
        if not self.text:
            raise ContractError(f"document {self.id!r} is empty")

    def tokens(self) -> list[int]:
        return tokenize(self.text)


@dataclass
class PackedBatch:
    tokens: np.ndarray  # [batch, seq_len] int64
    mask: np.ndarray    # [batch, seq_len] bool, false on padding (and optionally document starts)


def _stream(docs: Iterable[Document]) -> Iterator[int]:
    for doc in docs:
        yield BOS
        yield from doc.tokens()
        yield EOS


def pack_rows(docs: Iterable[Document], seq_len: int, mask_cross_doc: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """All packed rows at once: ``(tokens [rows, seq_len], mask)``.

    With ``mask_cross_doc`` the BOS that opens a document after another one
    in the same row is excluded from the loss.
    """
    if seq_len < 3:
        raise ContractError(f"seq_len must be >= 3, got {seq_len}")
    flat = np.fromiter(_stream(docs), dtype=np.int64)
    n_rows = max(1, -(-len(flat) // seq_len))
    tokens = np.zeros(n_rows * seq_len, dtype=np.int64)
    mask = np.zeros(n_rows * seq_len, dtype=bool)
    tokens[: len(flat)] = flat
    mask[: len(flat)] = True
    tokens = tokens.reshape(n_rows, seq_len)
    mask = mask.reshape(n_rows, seq_len)
    if mask_cross_doc:
        mask[:, 1:] &= tokens[:, 1:] != BOS
    return tokens, mask


def pack_documents(docs: Iterable[Document], seq_len: int, batch_size: int = 8,
                   mask_cross_doc: bool = False) -> Iterator[PackedBatch]:
    """Greedy packing of BOS + bytes + EOS into rows, yielded ``batch_size`` rows at a time."""
    tokens, mask = pack_rows(docs, seq_len, mask_cross_doc)
    for start in range(0, len(tokens), batch_size):
        yield PackedBatch(tokens[start:start + batch_size], mask[start:start + batch_size])


@dataclass
class LengthBucket:
    min_len: int
    max_len: int
    doc_ids: list[str] = field(default_factory=list)

    def __contains__(self, length: int) -> bool:
        return self.min_len <= length <= self.max_len


def bucket_bounds(max_exponent: int) -> list[tuple[int, int]]:
    """[1, 128], [129, 256], ..., up to 2**max_exponent."""
    if 2 ** max_exponent < FIRST_BUCKET_MAX:
        raise ContractError(f"max_exponent must be >= 7, got {max_exponent}")
    bounds = [(1, FIRST_BUCKET_MAX)]
    hi = FIRST_BUCKET_MAX
    while hi < 2 ** max_exponent:
        bounds.append((hi + 1, 2 * hi))
        hi *= 2
    return bounds


def bucket_by_length(docs: Iterable[Document], max_exponent: int | None = None) -> list[LengthBucket]:
    """Partition documents by token length; ``max_exponent`` defaults to the smallest that fits all."""
    docs = list(docs)
    lengths = [len(d.tokens()) for d in docs]
    longest = max(lengths, default=1)
    if max_exponent is None:
        max_exponent = max(7, int(np.ceil(np.log2(max(longest, 1)))))
    buckets = [LengthBucket(lo, hi) for lo, hi in bucket_bounds(max_exponent)]
    for doc, n in zip(docs, lengths):
        for b in buckets:
            if n in b:
                b.doc_ids.append(doc.id)
                break
        else:
            raise ContractError(f"document {doc.id!r} has {n} tokens, past the last bucket (2**{max_exponent})")
    return buckets


def read_documents(path) -> list[Document]:
    """A text file gives one document per nonempty line; a directory gives one per ``*.txt`` file."""
    path = Path(path)
    if path.is_dir():
        docs = []
        for f in sorted(path.glob("*.txt")):
            text = f.read_text(encoding="utf-8")
            if text:
                docs.append(Document(text, f.name))
        return docs
    lines = path.read_text(encoding="utf-8").splitlines()
    return [Document(line, f"{path.name}:{i + 1}") for i, line in enumerate(lines) if line]


def save_packed(path, tokens: np.ndarray, mask: np.ndarray, seq_len: int) -> None:
    from lgattn.checkpoint import write_blobs
    write_blobs(path, f"seq_len={seq_len}\n", {"tokens": tokens.astype(np.float32), "mask": mask.astype(np.float32)})


def load_packed(path) -> tuple[np.ndarray, np.ndarray]:
    from lgattn.checkpoint import read_blobs
    _, blobs = read_blobs(path)
    return blobs["tokens"].astype(np.int64), blobs["mask"] > 0.5


def repeated_pattern_docs(n_docs: int, pattern_len: int = 64, repeats: int = 4,
                          alphabet: str = "abcdefghijklmnopqrstuvwxyz", seed: int = 0,
                          prefix: str = "pattern") -> list[Document]:
    """Synthetic copy-task corpus: each document is one random pattern repeated ``repeats`` times."""
    rng = np.random.default_rng(seed)
    letters = np.array(list(alphabet))
    docs = []
    for i in range(n_docs):
        pattern = "".join(letters[rng.integers(0, len(letters), pattern_len)])
        docs.append(Document(pattern * repeats, f"{prefix}-{i}"))
    return docs

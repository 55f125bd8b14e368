"""Word-level text vocabulary and external embedding files."""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import EmptyCorpus, VocabMismatch

PAD, UNK, CLS = 0, 1, 2
SPECIALS = ("<pad>", "<unk>", "<cls>")

# Decimal numbers stay whole ("-0.5020" is one token); other punctuation is split off.
_TOKEN_RE = re.compile(r"-?\d+\.\d+|\d+|[a-z]+(?:-[a-z]+)*|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TextVocabulary:
    words: tuple[str, ...]  # index = id, specials first

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self._index.get(word, UNK)

    def encode(self, text: str, max_len: int) -> np.ndarray:
        """``<cls>`` followed by the word ids, truncated to ``max_len``."""
        ids = [CLS] + [self.id(w) for w in tokenize(text)]
        return np.array(ids[:max_len], dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps(list(self.words))

    @classmethod
    def from_json(cls, text: str) -> TextVocabulary:
        words = tuple(json.loads(text))
        if words[: len(SPECIALS)] != SPECIALS:
            raise VocabMismatch("vocabulary does not start with the special tokens")
        return cls(words)


def build_text_vocab(corpus, max_size: int | None = None) -> TextVocabulary:
    """Specials, then words by descending frequency (ties alphabetical)."""
    counts: Counter[str] = Counter()
    n = 0
    for text in corpus:
        n += 1
        counts.update(tokenize(text))
    if n == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(SPECIALS))]
    return TextVocabulary(SPECIALS + tuple(ranked))


def pad_ids(rows: list[np.ndarray], length: int | None = None) -> np.ndarray:
    length = length or max(len(r) for r in rows)
    out = np.full((len(rows), length), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r[:length]
    return out


# -- external embeddings ----------------------------------------------------
# File layout: magic, uint32 rows, uint32 dim, then rows*dim little-endian float32.

_EMB_MAGIC = b"T2CEMB\x00\x01"


def save_embedding(path: str | Path, emb: np.ndarray) -> None:
    emb = np.asarray(emb, dtype="<f4")
    if emb.ndim != 2:
        raise ValueError("embedding must be a 2-D array")
    Path(path).write_bytes(_EMB_MAGIC + struct.pack("<II", *emb.shape) + emb.tobytes())


def load_embedding(path: str | Path, d_p: int, n_p: int) -> np.ndarray:
    """Read precomputed text embeddings of shape (rows, d_p), rows <= n_p."""
    raw = Path(path).read_bytes()
    if raw[:8] != _EMB_MAGIC or len(raw) < 16:
        raise VocabMismatch(f"{path}: not an embedding file")
    rows, dim = struct.unpack("<II", raw[8:16])
    if dim != d_p:
        raise VocabMismatch(f"{path}: embedding width {dim} does not match d_p={d_p}")
    if rows == 0 or rows > n_p:
        raise VocabMismatch(f"{path}: {rows} rows, expected between 1 and N_p={n_p}")
    if len(raw) != 16 + 4 * rows * dim:
        raise VocabMismatch(f"{path}: truncated embedding file")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(rows, dim).copy()

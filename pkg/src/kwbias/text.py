"""Text normalization, sub-word vocabulary, tokenization, and tf-idf.

One normalization (lowercase, punctuation stripped, single-spaced) is
shared by the tokenizer, the WER scorer, and keyword matching so the
metrics cannot drift apart.  The vocabulary is a frequency-merged unit
inventory over the normalized character stream; tokenization is greedy
longest-match, which makes detokenize(tokenize(s)) == normalize(s) hold
by construction.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import KwbiasError


class VocabError(KwbiasError):
    pass


_KEEP = frozenset("abcdefghijklmnopqrstuvwxyz0123456789 ")

# Reserved units, listed first in every vocabulary.  Their surfaces use
# characters normalization removes, so text can never tokenize to them.
RESERVED = ("<pad>", "<sop>", "<sot>", "<eot>", "|")
N_RESERVED = len(RESERVED)


def normalize(text: str) -> str:
    """Lowercase, map punctuation to spaces, collapse runs of whitespace."""
    chars = [ch if ch in _KEEP else " " for ch in text.lower()]
    return " ".join("".join(chars).split())


class Vocab:
    """Bijective id<->unit table with reserved control tokens up front."""

    def __init__(self, units: list[str]) -> None:
        if tuple(units[:N_RESERVED]) != RESERVED:
            raise VocabError("vocabulary must start with the reserved units")
        if len(set(units)) != len(units):
            raise VocabError("duplicate units break the id<->unit bijection")
        self.units: tuple[str, ...] = tuple(units)
        self._ids: dict[str, int] = {u: i for i, u in enumerate(units)}
        self._max_unit_len = max(len(u) for u in units[N_RESERVED:]) if len(units) > N_RESERVED else 0
        self.pad_id, self.sop_id, self.sot_id, self.eot_id, self.delim_id = range(N_RESERVED)

    def __len__(self) -> int:
        return len(self.units)

    def tokenize(self, text: str) -> list[int]:
        """Greedy longest-match segmentation of the normalized text."""
        s = normalize(text)
        ids: list[int] = []
        i = 0
        while i < len(s):
            for length in range(min(self._max_unit_len, len(s) - i), 0, -1):
                unit_id = self._ids.get(s[i : i + length])
                if unit_id is not None:
                    ids.append(unit_id)
                    i += length
                    break
            else:
                raise VocabError(f"character {s[i]!r} is not in the vocabulary alphabet")
        return ids

    def detokenize(self, ids: Iterable[int], skip_reserved: bool = False) -> str:
        parts: list[str] = []
        for i in ids:
            if not 0 <= i < len(self.units):
                raise VocabError(f"token id {i} out of range for vocabulary of {len(self.units)}")
            if i < N_RESERVED:
                if skip_reserved:
                    continue
                raise VocabError(f"reserved token {self.units[i]!r} has no text form")
            parts.append(self.units[i])
        return "".join(parts)

    def serialize(self) -> str:
        return "".join(f"{i}\t{u}\n" for i, u in enumerate(self.units))

    def save(self, path: Path | str) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocab":
        units: list[str] = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            idx, _, unit = line.partition("\t")
            if not _ or int(idx) != lineno:
                raise VocabError(f"malformed vocabulary line {lineno}: {line!r}")
            units.append(unit)
        return cls(units)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


def _merge_pair(seq: list[str], a: str, b: str, ab: str) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
            out.append(ab)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def build_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Frequency-merge character units until the inventory reaches target_size.

    Deterministic: ties in pair frequency break toward the lexicographically
    smallest pair, and merging stops early when no pair repeats.
    """
    docs = [normalize(t) for t in corpus]
    docs = [d for d in docs if d]
    if not docs:
        raise VocabError("cannot build a vocabulary from an empty corpus")
    alphabet = sorted({ch for d in docs for ch in d})
    units = list(RESERVED) + alphabet
    if target_size < len(units):
        raise VocabError(
            f"target_size {target_size} is below reserved+alphabet size {len(units)}"
        )
    seqs = [list(d) for d in docs]
    while len(units) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for seq in seqs:
            pairs.update(zip(seq, seq[1:]))
        # units may start with a space (word-leading form) but merging
        # never crosses a word boundary, so no unit gets an internal space
        pairs = Counter({p: c for p, c in pairs.items() if not p[1].startswith(" ")})
        if not pairs:
            break
        top = max(pairs.values())
        if top < 2:
            break
        a, b = min(p for p, c in pairs.items() if c == top)
        merged = a + b
        units.append(merged)
        seqs = [_merge_pair(seq, a, b, merged) for seq in seqs]
    return Vocab(units)


@dataclass(frozen=True)
class TfidfTable:
    """Per-word tf-idf over a document collection (document = one transcript)."""

    scores: Mapping[str, float]

    def get(self, word: str) -> float:
        return self.scores.get(word, 0.0)


def tfidf_scores(corpus: Iterable[str]) -> TfidfTable:
    """score(w) = raw count of w across the corpus * ln(n_docs / doc_freq(w))."""
    docs = [normalize(t).split() for t in corpus]
    if not docs:
        raise VocabError("tf-idf needs at least one transcript")
    n = len(docs)
    tf: Counter[str] = Counter()
    df: Counter[str] = Counter()
    for words in docs:
        tf.update(words)
        df.update(set(words))
    return TfidfTable({w: tf[w] * math.log(n / df[w]) for w in tf})

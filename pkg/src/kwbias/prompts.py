"""Keyword sampling and prompt assembly.

Training draws a fresh keyword set per example: the set size is uniform
on {1..5}, each keyword is positive with probability 0.9, its token
length is uniform on {1..4}, positives are contiguous token spans of the
example's own transcript, and negatives are spans taken from another
batch member.  A negative whose tokens also occur in the current
transcript is redrawn (the span, not its length, so the length histogram
stays exact) up to 10 times and then dropped.

Prompts wrap the keyword token runs in [SOP ... SOT] with a `|` delimiter
between keywords.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import KwbiasError
from .rng import stream
from .text import TfidfTable, Vocab, normalize


class PromptError(KwbiasError):
    pass


MAX_KEYWORD_TOKENS = 4
_REDRAW_ATTEMPTS = 10


@dataclass(frozen=True)
class Keyword:
    surface: str
    tokens: tuple[int, ...]
    positive: bool

    def __post_init__(self) -> None:
        if not self.surface:
            raise PromptError("keyword surface must be non-empty")
        if not 1 <= len(self.tokens) <= MAX_KEYWORD_TOKENS:
            raise PromptError(
                f"keyword {self.surface!r} has {len(self.tokens)} tokens, need 1..{MAX_KEYWORD_TOKENS}"
            )


@dataclass(frozen=True)
class KeywordSet:
    keywords: tuple[Keyword, ...]
    source: str  # curriculum | tfidf-eval | oracle | external

    def __post_init__(self) -> None:
        surfaces = [k.surface for k in self.keywords]
        if len(set(surfaces)) != len(surfaces):
            raise PromptError("duplicate keyword surfaces in one set")

    def __iter__(self):
        return iter(self.keywords)

    def __len__(self) -> int:
        return len(self.keywords)

    def positives(self) -> tuple[Keyword, ...]:
        return tuple(k for k in self.keywords if k.positive)


def _contains_span(haystack: Sequence[int], needle: Sequence[int]) -> bool:
    k = len(needle)
    return any(tuple(haystack[i : i + k]) == tuple(needle) for i in range(len(haystack) - k + 1))


def sample_training_keywords(
    vocab: Vocab,
    batch_tokens: Sequence[Sequence[int]],
    index: int,
    rng: np.random.Generator,
) -> KeywordSet:
    """Draw the per-example training keyword set from a batch of transcripts."""
    if len(batch_tokens) < 2:
        raise PromptError(f"keyword sampling needs a batch of >= 2 transcripts, got {len(batch_tokens)}")
    own = list(batch_tokens[index])
    if not own:
        raise PromptError("cannot sample keywords from an empty transcript")
    keywords: list[Keyword] = []
    n_keywords = int(rng.integers(1, 6))
    for _ in range(n_keywords):
        positive = bool(rng.random() < 0.9)
        length = int(rng.integers(1, MAX_KEYWORD_TOKENS + 1))
        for _attempt in range(_REDRAW_ATTEMPTS):
            if positive:
                span_len = min(length, len(own))
                start = int(rng.integers(0, len(own) - span_len + 1))
                tokens = tuple(own[start : start + span_len])
            else:
                other = int(rng.integers(0, len(batch_tokens) - 1))
                if other >= index:
                    other += 1
                src = list(batch_tokens[other])
                span_len = min(length, len(src))
                start = int(rng.integers(0, len(src) - span_len + 1))
                tokens = tuple(src[start : start + span_len])
                if _contains_span(own, tokens):
                    continue
            surface = vocab.detokenize(tokens).strip()
            if not surface or any(k.surface == surface for k in keywords):
                continue
            keywords.append(Keyword(surface=surface, tokens=tokens, positive=positive))
            break
    return KeywordSet(tuple(keywords), source="curriculum")


def sample_word_keywords(
    vocab: Vocab,
    batch_words: Sequence[Sequence[str]],
    index: int,
    weights: TfidfTable,
    rng: np.random.Generator,
) -> KeywordSet:
    """Whole-word keyword draw for recognizer pretraining exposure.

    Same shape as the span curriculum (count ~ U{1..5}, positives with
    probability 0.9, negatives from other batch members) but keywords are
    whole words in spoken-context token form, and positives are drawn
    proportionally to the supplied word weights, which matches the
    token layout of spotter-generated prompts at evaluation time.
    """
    if len(batch_words) < 2:
        raise PromptError(f"keyword sampling needs a batch of >= 2 transcripts, got {len(batch_words)}")
    own = list(batch_words[index])
    own_set = set(own)
    keywords: list[Keyword] = []
    n_keywords = int(rng.integers(1, 6))

    def usable(word: str) -> bool:
        return 1 <= len(vocab.tokenize(" " + word)) <= MAX_KEYWORD_TOKENS

    for _ in range(n_keywords):
        positive = bool(rng.random() < 0.9)
        for _attempt in range(_REDRAW_ATTEMPTS):
            if positive:
                taken = {k.surface for k in keywords}
                cands = sorted(w for w in own_set - taken if usable(w))
                if not cands:
                    break
                w = np.array([weights.get(c) for c in cands])
                p = w / w.sum() if w.sum() > 0 else np.full(len(cands), 1.0 / len(cands))
                word = cands[int(rng.choice(len(cands), p=p))]
            else:
                other = int(rng.integers(0, len(batch_words) - 1))
                if other >= index:
                    other += 1
                src = list(batch_words[other])
                word = src[int(rng.integers(0, len(src)))]
                if word in own_set or not usable(word):
                    continue
            if any(k.surface == word for k in keywords):
                continue
            keywords.append(
                Keyword(surface=word, tokens=tuple(vocab.tokenize(" " + word)), positive=positive)
            )
            break
    return KeywordSet(tuple(keywords), source="curriculum")


def assemble_prompt(vocab: Vocab, keyword_set: KeywordSet | Sequence[Keyword]) -> list[int]:
    """[SOP, k1..., |, k2..., ..., SOT]; zero keywords give [SOP, SOT]."""
    ids = [vocab.sop_id]
    for i, kw in enumerate(keyword_set):
        if i:
            ids.append(vocab.delim_id)
        ids.extend(kw.tokens)
    ids.append(vocab.sot_id)
    return ids


def prompt_keyword_spans(keyword_set: KeywordSet | Sequence[Keyword]) -> list[tuple[int, int]]:
    """Half-open [start, end) position of each keyword inside its prompt."""
    spans = []
    pos = 1  # after SOP
    for i, kw in enumerate(keyword_set):
        if i:
            pos += 1  # delimiter
        spans.append((pos, pos + len(kw.tokens)))
        pos += len(kw.tokens)
    return spans


def parse_prompt(vocab: Vocab, prompt: Sequence[int]) -> list[tuple[int, ...]]:
    """Recover the keyword token runs; inverse of assemble_prompt."""
    if len(prompt) < 2 or prompt[0] != vocab.sop_id or prompt[-1] != vocab.sot_id:
        raise PromptError("prompt must be framed by SOP ... SOT")
    body = list(prompt[1:-1])
    if not body:
        return []
    runs: list[tuple[int, ...]] = []
    current: list[int] = []
    for tok in body:
        if tok == vocab.delim_id:
            runs.append(tuple(current))
            current = []
        else:
            current.append(tok)
    runs.append(tuple(current))
    return runs


def kws_to_prompt(vocab: Vocab, decisions: Sequence[bool], keyword_set: KeywordSet) -> list[int]:
    """Prompt over exactly the keywords flagged present, original order."""
    if len(decisions) != len(keyword_set):
        raise PromptError(
            f"got {len(decisions)} decisions for {len(keyword_set)} keywords"
        )
    kept = [kw for kw, flag in zip(keyword_set, decisions) if flag]
    return assemble_prompt(vocab, kept)


def _weighted_draw_without_replacement(
    candidates: list[str],
    weights: np.ndarray,
    count: int,
    rng: np.random.Generator,
) -> list[str]:
    # Zero-weight candidates are drawn only once every positive weight is used up.
    avail = list(range(len(candidates)))
    w = weights.astype(np.float64).copy()
    chosen: list[str] = []
    for _ in range(count):
        cur = w[avail]
        total = cur.sum()
        p = cur / total if total > 0 else np.full(len(avail), 1.0 / len(avail))
        pick = int(rng.choice(len(avail), p=p))
        chosen.append(candidates[avail.pop(pick)])
    return chosen


def select_eval_keywords(
    vocab: Vocab,
    transcript: str,
    tfidf: TfidfTable,
    negatives_pool: Sequence[str],
    rng: np.random.Generator,
    n_positives: int = 3,
    n_negatives: int = 17,
) -> KeywordSet:
    """Evaluation mix: tf-idf-weighted positives from the transcript plus
    tf-idf-weighted negatives absent from it.

    Keywords are whole words, tokenized in spoken-context form (with a
    leading space) so their token ids match in-transcript occurrences.
    """
    words = normalize(transcript).split()
    present = set(words)

    def usable(word: str) -> bool:
        return 1 <= len(vocab.tokenize(" " + word)) <= MAX_KEYWORD_TOKENS

    pos_candidates = sorted(w for w in present if usable(w))
    if len(pos_candidates) < n_positives:
        raise PromptError(
            f"transcript has {len(pos_candidates)} usable distinct words, need {n_positives}"
        )
    pool_words = sorted({w for t in negatives_pool for w in normalize(t).split()})
    neg_candidates = [w for w in pool_words if w not in present and usable(w)]
    if len(neg_candidates) < n_negatives:
        raise PromptError(
            f"negatives pool has {len(neg_candidates)} usable words outside the transcript, "
            f"need {n_negatives}"
        )

    positives = _weighted_draw_without_replacement(
        pos_candidates, np.array([tfidf.get(w) for w in pos_candidates]), n_positives, rng
    )
    negatives = _weighted_draw_without_replacement(
        neg_candidates, np.array([tfidf.get(w) for w in neg_candidates]), n_negatives, rng
    )
    keywords = [
        Keyword(surface=w, tokens=tuple(vocab.tokenize(" " + w)), positive=True) for w in positives
    ] + [
        Keyword(surface=w, tokens=tuple(vocab.tokenize(" " + w)), positive=False) for w in negatives
    ]
    return KeywordSet(tuple(keywords), source="tfidf-eval")

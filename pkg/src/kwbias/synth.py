"""Synthetic ASR corpus with controllable jargon confusability.

Each word owns a short sequence of feature-frame prototypes; an utterance
is the concatenation of its words' prototypes plus Gaussian noise.  Every
jargon word is acoustically confusable with one common word (its
prototypes sit a small offset away from the common word's), so a decoder
can only resolve it reliably from context, which is exactly the failure
mode keyword prompting is meant to fix.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import KwbiasError
from .rng import stream


class SynthError(KwbiasError):
    pass


_MAGIC = b"KWBDS001"

_CONSONANTS = "bdfgklmnprst"
_VOWELS = "aeiou"

# Jargon = common counterpart + a silent spelling suffix (homophone-style):
# the suffix letters never occur in common words, so sub-word units for
# suffixes stay disjoint from the common inventory.
_JARGON_SUFFIXES = ("zy", "xe", "qi", "wo", "ju", "vy")


@dataclass(frozen=True)
class SynthSpec:
    """Corpus shape.

    Common words form a small, high-document-frequency pool (so their
    tf-idf stays low); jargon words are many and individually rare, which
    makes them the distinctive terms an evaluation keyword draw favors.
    `min_words`/`max_words` bound the common words per utterance; a
    jargon-bearing utterance additionally carries `jargon_per_utterance`
    distinct jargon words at random positions.
    """

    n_common: int = 5
    n_jargon: int = 24
    n_mels: int = 80
    min_word_frames: int = 5
    max_word_frames: int = 6
    min_words: int = 4
    max_words: int = 5
    jargon_per_utterance: int = 2
    noise_sigma: float = 0.2
    confusable_offset: float = 0.035
    jargon_fraction: float = 0.6
    train_size: int = 2000
    dev_size: int = 100
    test_size: int = 100
    seed: int = 42

    def __post_init__(self) -> None:
        if self.n_common < 1 or self.n_jargon < 0:
            raise SynthError("need at least one common word and a nonnegative jargon count")
        if self.noise_sigma < 0:
            raise SynthError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if not 0 <= self.jargon_fraction <= 1:
            raise SynthError(f"jargon_fraction must be in [0,1], got {self.jargon_fraction}")
        if not 1 <= self.min_word_frames <= self.max_word_frames:
            raise SynthError("invalid word frame range")
        if not 1 <= self.min_words <= self.max_words:
            raise SynthError("invalid utterance length range")
        if self.max_words > self.n_common:
            raise SynthError("max_words exceeds the common vocabulary; words are drawn distinct")
        if self.n_jargon and not 1 <= self.jargon_per_utterance <= self.n_jargon:
            raise SynthError("jargon_per_utterance must be in [1, n_jargon]")
        if min(self.train_size, self.dev_size, self.test_size) < 1:
            raise SynthError("all split sizes must be positive")


def spec_hash(spec: SynthSpec) -> str:
    blob = json.dumps(asdict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class WordBank:
    common: tuple[str, ...]
    jargon: tuple[str, ...]
    confusable: dict[str, str]  # jargon word -> common counterpart
    prototypes: dict[str, np.ndarray]  # word -> (frames, n_mels)


@dataclass(frozen=True)
class Utterance:
    frames: np.ndarray  # (T, n_mels)
    text: str
    contains_jargon: bool

    def content_hash(self) -> str:
        h = hashlib.sha256(self.text.encode("utf-8"))
        h.update(self.frames.tobytes())
        return h.hexdigest()


def _random_word(rng: np.random.Generator, n_syllables: int) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(n_syllables)
    )


def make_word_bank(spec: SynthSpec) -> WordBank:
    """Common words plus near-homophone jargon.

    A jargon word's spelling is its counterpart plus a suffix syllable,
    while its prototypes sit `confusable_offset` away from the
    counterpart's, so only context (a prompt) can reliably pick between
    them.  Pairing cycles common words and suffixes with coprime periods
    to keep all surfaces distinct.
    """
    rng = stream(spec.seed, "words")
    common: list[str] = []
    seen: set[str] = set()
    while len(common) < spec.n_common:
        w = _random_word(rng, int(rng.integers(2, 4)))
        if w not in seen:
            seen.add(w)
            common.append(w)
    if spec.n_jargon > spec.n_common * len(_JARGON_SUFFIXES):
        raise SynthError(
            f"n_jargon {spec.n_jargon} exceeds distinct counterpart/suffix pairs "
            f"{spec.n_common * len(_JARGON_SUFFIXES)}"
        )
    jargon: list[str] = []
    confusable: dict[str, str] = {}
    for i in range(spec.n_common * len(_JARGON_SUFFIXES)):
        if len(jargon) == spec.n_jargon:
            break
        counterpart = common[i % spec.n_common]
        surface = counterpart + _JARGON_SUFFIXES[i // spec.n_common]
        seen.add(surface)
        jargon.append(surface)
        confusable[surface] = counterpart

    prototypes: dict[str, np.ndarray] = {}
    proto_rng = stream(spec.seed, "prototypes")
    for w in common:
        n_frames = int(proto_rng.integers(spec.min_word_frames, spec.max_word_frames + 1))
        prototypes[w] = proto_rng.normal(0.0, 1.0, size=(n_frames, spec.n_mels))
    for w in jargon:
        base = prototypes[confusable[w]]
        prototypes[w] = base + spec.confusable_offset * proto_rng.normal(0.0, 1.0, size=base.shape)
    return WordBank(common=tuple(common), jargon=tuple(jargon), confusable=confusable, prototypes=prototypes)


def _make_utterance(spec: SynthSpec, bank: WordBank, rng: np.random.Generator) -> Utterance:
    k = int(rng.integers(spec.min_words, spec.max_words + 1))
    words = [bank.common[i] for i in rng.choice(len(bank.common), size=k, replace=False)]
    with_jargon = bool(bank.jargon) and rng.random() < spec.jargon_fraction
    if with_jargon:
        picks = rng.choice(len(bank.jargon), size=spec.jargon_per_utterance, replace=False)
        for j in picks:
            words.insert(int(rng.integers(len(words) + 1)), bank.jargon[int(j)])
    frames = np.concatenate([bank.prototypes[w] for w in words], axis=0)
    if spec.noise_sigma > 0:
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    return Utterance(frames=frames, text=" ".join(words), contains_jargon=with_jargon)


def generate_corpus(spec: SynthSpec) -> tuple[dict[str, list[Utterance]], WordBank]:
    """Seeded train/dev/test splits, disjoint by utterance content hash."""
    bank = make_word_bank(spec)
    sizes = {"train": spec.train_size, "dev": spec.dev_size, "test": spec.test_size}
    splits: dict[str, list[Utterance]] = {}
    seen_hashes: set[str] = set()
    for name, size in sizes.items():
        rng = stream(spec.seed, "corpus", name)
        utts: list[Utterance] = []
        while len(utts) < size:
            utt = _make_utterance(spec, bank, rng)
            digest = utt.content_hash()
            if digest in seen_hashes:
                continue  # duplicates only realistic at noise_sigma == 0
            seen_hashes.add(digest)
            utts.append(utt)
        splits[name] = utts
    return splits, bank


# ---------------------------------------------------------------------------
# serialization


def dataset_save(path: Path | str, utterances: list[Utterance], spec: SynthSpec) -> None:
    """Binary container: manifest header + float64 frames; text sidecar."""
    path = Path(path)
    header = {
        "n_utterances": len(utterances),
        "n_mels": spec.n_mels,
        "spec_hash": spec_hash(spec),
        "frame_counts": [u.frames.shape[0] for u in utterances],
        "contains_jargon": [int(u.contains_jargon) for u in utterances],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for u in utterances:
            f.write(np.ascontiguousarray(u.frames, dtype="<f8").tobytes())
    path.with_suffix(".txt").write_text("".join(u.text + "\n" for u in utterances), encoding="utf-8")


def dataset_load(path: Path | str) -> list[Utterance]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise SynthError(f"{path}: not a dataset file (bad magic)")
    off = len(_MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    try:
        header = json.loads(blob[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SynthError(f"{path}: corrupt dataset header: {exc}") from exc
    off += header_len
    n_mels = header["n_mels"]
    counts = header["frame_counts"]
    if len(counts) != header["n_utterances"]:
        raise SynthError(f"{path}: manifest count mismatch")
    expected = off + 8 * n_mels * sum(counts)
    if len(blob) != expected:
        raise SynthError(f"{path}: truncated dataset: {len(blob)} bytes, expected {expected}")
    sidecar = path.with_suffix(".txt")
    texts = sidecar.read_text(encoding="utf-8").splitlines()
    if len(texts) != header["n_utterances"]:
        raise SynthError(f"{sidecar}: transcript count {len(texts)} != manifest {header['n_utterances']}")
    utts: list[Utterance] = []
    for count, flag, text in zip(counts, header["contains_jargon"], texts):
        n = 8 * n_mels * count
        frames = np.frombuffer(blob[off : off + n], dtype="<f8").reshape(count, n_mels).copy()
        off += n
        utts.append(Utterance(frames=frames, text=text, contains_jargon=bool(flag)))
    return utts


def word_bank_save(path: Path | str, bank: WordBank) -> None:
    payload = {
        "common": list(bank.common),
        "jargon": list(bank.jargon),
        "confusable": dict(sorted(bank.confusable.items())),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def word_bank_load_words(path: Path | str) -> dict:
    """Word lists only; prototypes are reproducible from the spec."""
    return json.loads(Path(path).read_text(encoding="utf-8"))

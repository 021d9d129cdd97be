"""Synthetic multilingual speech-like corpora with ground-truth alignments.

A *language* is a lexicon over a shared character inventory plus one mean
feature vector per token ("phonetics").  A *domain* is the acoustic channel:
noise level, token durations and a constant channel offset.  Every token is
rendered as ``duration`` frames of ``mean + channel_offset + noise``.
"""

from __future__ import annotations

import base64
import json
import string
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

CORPUS_FORMAT = "tlasr-corpus"
CORPUS_VERSION = 1


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """``n_chars`` letters followed by the word-boundary token; blank is not included."""

    n_chars: int

    @property
    def size(self) -> int:
        return self.n_chars + 1

    @property
    def boundary(self) -> int:
        return self.n_chars

    def chars(self) -> str:
        return string.ascii_lowercase[: self.n_chars]

    def spell(self, word: str) -> Tuple[int, ...]:
        return tuple(self.chars().index(c) for c in word)

    def tokenize(self, words: Sequence[str]) -> List[int]:
        tokens: List[int] = []
        for i, w in enumerate(words):
            if i:
                tokens.append(self.boundary)
            tokens.extend(self.spell(w))
        return tokens

    def detokenize(self, tokens: Sequence[int]) -> List[str]:
        chars = self.chars()
        words, cur = [], []
        for t in tokens:
            if t == self.boundary:
                if cur:
                    words.append("".join(cur))
                cur = []
            else:
                cur.append(chars[t])
        if cur:
            words.append("".join(cur))
        return words


@dataclass
class LanguageSpec:
    name: str
    token_inventory: np.ndarray
    emission_means: np.ndarray
    lexicon: Dict[str, Tuple[int, ...]]
    zipf_exponent: float = 1.0
    relatedness_seed: int = 0

    def __post_init__(self):
        if not self.lexicon:
            raise ValueError(f"language {self.name!r} has an empty lexicon")
        inventory = set(int(t) for t in self.token_inventory)
        for word, toks in self.lexicon.items():
            if not set(toks) <= inventory:
                raise ValueError(f"word {word!r} uses tokens outside the inventory")
        if not np.all(np.isfinite(self.emission_means)):
            raise ValueError("emission means must be finite")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(len(self.token_inventory) - 1)

    @property
    def feature_dim(self) -> int:
        return self.emission_means.shape[1]

    @property
    def words(self) -> List[str]:
        return list(self.lexicon)


@dataclass(frozen=True)
class DomainSpec:
    noise_std: float = 0.5
    duration_range: Tuple[int, int] = (2, 3)
    channel_offset: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        lo, hi = self.duration_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid duration range {self.duration_range}")

    def offset(self, feature_dim: int) -> np.ndarray:
        if not self.channel_offset:
            return np.zeros(feature_dim)
        off = np.asarray(self.channel_offset, dtype=np.float64)
        if off.shape != (feature_dim,):
            raise ValueError("channel offset does not match the feature dimension")
        return off


@dataclass
class Utterance:
    features: np.ndarray
    words: List[str]
    tokens: np.ndarray
    emit_frames: np.ndarray
    id: str = ""
    _bands: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.features.shape[0]

    def band(self, b_left: int, b_right: int):
        """Ground-truth alignment band, cached per slack setting."""
        key = (b_left, b_right)
        if key not in self._bands:
            from .lattice import band_from_alignment

            self._bands[key] = band_from_alignment(self.emit_frames, b_left, b_right, self.T)
        return self._bands[key]


@dataclass
class Corpus:
    language: str
    utterances: List[Utterance] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def word_counts(self) -> Counter:
        counts: Counter = Counter()
        for utt in self.utterances:
            counts.update(utt.words)
        return counts


def _random_lexicon(rng, vocab: Vocabulary, size: int, word_len_range) -> Dict[str, Tuple[int, ...]]:
    chars = vocab.chars()
    lexicon: Dict[str, Tuple[int, ...]] = {}
    lo, hi = word_len_range
    attempts = 0
    while len(lexicon) < size:
        attempts += 1
        if attempts > 100 * size:
            raise ValueError("cannot draw that many distinct words; widen word_len_range")
        n = int(rng.integers(lo, hi + 1))
        word = "".join(chars[i] for i in rng.integers(0, vocab.n_chars, n))
        if word not in lexicon:
            lexicon[word] = vocab.spell(word)
    return lexicon


def make_language_family(
    base_seed: int,
    n_languages: int,
    relatedness: float,
    *,
    n_chars: int = 10,
    feature_dim: int = 8,
    lexicon_size: int = 60,
    word_len_range: Tuple[int, int] = (2, 4),
    zipf_exponent: float = 1.0,
    mean_scale: float = 1.0,
    names: Optional[Sequence[str]] = None,
    first_index: int = 0,
) -> List[LanguageSpec]:
    """Languages whose token phonetics share a common base.

    Each language's means are ``r * base + sqrt(1 - r**2) * own`` with both
    draws standard normal (times ``mean_scale``): ``r = 1`` gives identical
    phonetics and ``r = 0`` independent ones, with the same marginal spread.
    Lexicons are drawn independently per language.  ``first_index`` offsets
    the per-language seeds, so additional family members can be drawn later.
    """
    if n_languages < 1:
        raise ValueError("need at least one language")
    if not 0.0 <= relatedness <= 1.0:
        raise ValueError("relatedness must lie in [0, 1]")
    vocab = Vocabulary(n_chars)
    base = np.random.default_rng([base_seed, 0]).standard_normal((vocab.size, feature_dim))
    own_weight = np.sqrt(1.0 - relatedness**2)
    languages = []
    for i in range(first_index, first_index + n_languages):
        rng = np.random.default_rng([base_seed, 1, i])
        own = rng.standard_normal((vocab.size, feature_dim))
        means = mean_scale * (relatedness * base + own_weight * own)
        lexicon = _random_lexicon(rng, vocab, lexicon_size, word_len_range)
        name = names[i - first_index] if names else f"lang{i}"
        languages.append(
            LanguageSpec(
                name=name,
                token_inventory=np.arange(vocab.size),
                emission_means=means,
                lexicon=lexicon,
                zipf_exponent=zipf_exponent,
                relatedness_seed=base_seed,
            )
        )
    return languages


def domain_shift(domain: DomainSpec, severity: float, feature_dim: int = 8, seed: int = 0) -> DomainSpec:
    """Move a domain away from ``domain``; severity 0 returns an equal spec.

    Noise grows by ``0.25 * severity``, the longest duration by
    ``round(severity)`` frames, and the channel offset moves ``severity``
    units along a fixed direction (the existing offset's, or a seeded random
    one when the offset is zero), so its norm grows with severity.
    """
    if severity < 0:
        raise ValueError("severity must be >= 0")
    if severity == 0:
        return replace(domain)
    offset = domain.offset(feature_dim)
    norm = np.linalg.norm(offset)
    if norm > 0:
        direction = offset / norm
    else:
        direction = np.random.default_rng([seed, 7]).standard_normal(feature_dim)
        direction /= np.linalg.norm(direction)
    lo, hi = domain.duration_range
    return DomainSpec(
        noise_std=domain.noise_std + 0.25 * severity,
        duration_range=(lo, hi + int(round(severity))),
        channel_offset=tuple(float(v) for v in offset + severity * direction),
    )


def zipf_probabilities(n_words: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    weights = ranks ** (-exponent)
    return weights / weights.sum()


def synthesize_one(
    lang: LanguageSpec,
    domain: DomainSpec,
    rng_seed: int,
    index: int,
    words_per_utt: Tuple[int, int] = (2, 4),
) -> Utterance:
    """One utterance from its own RNG stream ``(rng_seed, index)``."""
    rng = np.random.default_rng([rng_seed, index])
    vocab = lang.vocabulary
    words_list = lang.words
    probs = zipf_probabilities(len(words_list), lang.zipf_exponent)
    n_words = int(rng.integers(words_per_utt[0], words_per_utt[1] + 1))
    picks = rng.choice(len(words_list), size=n_words, p=probs)
    words = [words_list[i] for i in picks]
    tokens = np.array(vocab.tokenize(words), dtype=np.int64)
    lo, hi = domain.duration_range
    durations = rng.integers(lo, hi + 1, size=len(tokens))
    emit = np.concatenate([[0], np.cumsum(durations)[:-1]]) + 1
    frame_tokens = np.repeat(tokens, durations)
    F = lang.feature_dim
    noise = rng.standard_normal((len(frame_tokens), F)) * domain.noise_std
    features = lang.emission_means[frame_tokens] + domain.offset(F) + noise
    return Utterance(features, words, tokens, emit.astype(np.int64), id=f"{lang.name}-{rng_seed}-{index}")


def synthesize(
    lang: LanguageSpec,
    domain: DomainSpec,
    n_utts: int,
    rng_seed: int,
    words_per_utt: Tuple[int, int] = (2, 4),
) -> List[Utterance]:
    """Deterministic corpus; utterance ``i`` depends only on ``(rng_seed, i)``.

    Words are drawn from the lexicon with Zipf weights over lexicon order.
    """
    if not lang.lexicon:
        raise ValueError("empty lexicon")
    return [synthesize_one(lang, domain, rng_seed, i, words_per_utt) for i in range(n_utts)]


# corpus files ----------------------------------------------------------------


def _encode_features(features: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(features, dtype="<f8").tobytes()).decode("ascii")


def save_corpus(path, corpus: Corpus) -> None:
    """Line-delimited JSON: one header record, then one record per utterance.

    Features are base64 of little-endian float64 in row-major order.
    """
    feature_dim = corpus.utterances[0].features.shape[1] if corpus.utterances else 0
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "format": CORPUS_FORMAT,
            "version": CORPUS_VERSION,
            "language": corpus.language,
            "feature_dim": feature_dim,
            "n_utterances": len(corpus),
            "metadata": corpus.metadata,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for utt in corpus.utterances:
            record = {
                "id": utt.id,
                "frames": int(utt.features.shape[0]),
                "features": _encode_features(utt.features),
                "words": list(utt.words),
                "tokens": [int(t) for t in utt.tokens],
                "emit_frames": [int(t) for t in utt.emit_frames],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}:1: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}:1: bad header: {exc}") from None
    if header.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError(f"{path}:1: not a corpus file")
    if header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(
            f"{path}:1: unsupported corpus version {header.get('version')!r}"
        )
    F = int(header["feature_dim"])
    utts = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            raw = base64.b64decode(rec["features"], validate=True)
            frames = int(rec["frames"])
            if len(raw) != frames * F * 8:
                raise ValueError(f"feature payload has {len(raw)} bytes, expected {frames * F * 8}")
            features = np.frombuffer(raw, dtype="<f8").reshape(frames, F).astype(np.float64)
            tokens = np.array(rec["tokens"], dtype=np.int64)
            emit = np.array(rec["emit_frames"], dtype=np.int64)
            if len(emit) != len(tokens):
                raise ValueError("emit_frames and tokens differ in length")
            utts.append(Utterance(features, list(rec["words"]), tokens, emit, id=rec["id"]))
        except KeyError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: missing field {exc}") from None
        except (ValueError, TypeError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
    return Corpus(header["language"], utts, header.get("metadata", {}))


# generator config ------------------------------------------------------------


@dataclass
class GeneratorConfig:
    """Structured-text (JSON) description of a corpus generation run."""

    version: int = 1
    base_seed: int = 0
    n_languages: int = 2
    relatedness: float = 0.8
    n_chars: int = 10
    feature_dim: int = 8
    lexicon_size: int = 60
    word_len_range: Tuple[int, int] = (2, 4)
    zipf_exponent: float = 1.0
    words_per_utt: Tuple[int, int] = (2, 4)
    noise_std: float = 0.5
    duration_range: Tuple[int, int] = (2, 3)
    domain_severity: float = 0.0
    n_utts: Sequence[int] = (200, 200)
    n_test: int = 100
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        if data.get("version", 1) != 1:
            raise ValueError(f"unsupported generator config version {data['version']}")
        cfg = cls(**data)
        if len(cfg.n_utts) != cfg.n_languages:
            raise ValueError("n_utts needs one entry per language")
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("word_len_range", "words_per_utt", "duration_range", "n_utts"):
            d[k] = list(d[k])
        return d

    def languages(self) -> List[LanguageSpec]:
        return make_language_family(
            self.base_seed,
            self.n_languages,
            self.relatedness,
            n_chars=self.n_chars,
            feature_dim=self.feature_dim,
            lexicon_size=self.lexicon_size,
            word_len_range=tuple(self.word_len_range),
            zipf_exponent=self.zipf_exponent,
        )

    def domain(self) -> DomainSpec:
        base = DomainSpec(self.noise_std, tuple(self.duration_range))
        return domain_shift(base, self.domain_severity, self.feature_dim, seed=self.base_seed)


def generate(cfg: GeneratorConfig) -> Dict[str, Tuple[Corpus, Corpus]]:
    """Train and test corpora for every language in the config."""
    domain = cfg.domain()
    out = {}
    for i, (lang, n) in enumerate(zip(cfg.languages(), cfg.n_utts)):
        train = synthesize(lang, domain, n, cfg.seed * 1000 + 2 * i, tuple(cfg.words_per_utt))
        test = synthesize(lang, domain, cfg.n_test, cfg.seed * 1000 + 2 * i + 1, tuple(cfg.words_per_utt))
        meta = {"generator": cfg.to_dict(), "language_index": i}
        out[lang.name] = (
            Corpus(lang.name, train, dict(meta, split="train")),
            Corpus(lang.name, test, dict(meta, split="test")),
        )
    return out

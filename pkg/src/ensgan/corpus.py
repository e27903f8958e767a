"""Tokenization, vocabularies, query-response pairs and the synthetic corpus."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

MAX_QUERY_LEN = 12
MAX_RESPONSE_LEN = 12

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and split punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    max_size: int

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise IndexError(f"token id {idx} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def save(self, path) -> None:
        lines = [f"# token id = line index + {len(RESERVED)} (header excluded); "
                 f"reserved {' '.join(f'{i}={t}' for i, t in enumerate(RESERVED))}; "
                 f"max_size={self.max_size}"]
        lines += list(self.tokens[len(RESERVED):])
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        header = lines[0]
        m = re.search(r"max_size=(\d+)", header)
        if not header.startswith("#") or m is None:
            raise ContractError(f"{path}: missing vocab header")
        return cls(RESERVED + tuple(lines[1:]), int(m.group(1)))


def build_vocab(texts: Iterable[str], max_size: int = 2000) -> Vocab:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    if max_size < len(RESERVED) + 1:
        raise ContractError(f"vocab max_size must be >= {len(RESERVED) + 1}")
    counts = Counter(tok for text in texts for tok in tokenize(text))
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(RESERVED + tuple(ranked[: max_size - len(RESERVED)]), max_size)


def encode(text: str, vocab: Vocab, cap: int | None = None) -> tuple[int, ...]:
    ids = [vocab.id(t) for t in tokenize(text)]
    if cap is not None and len(ids) + 1 > cap:
        ids = ids[: cap - 1]
    return tuple(ids) + (EOS,)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        out.append(vocab.token(i))
    return " ".join(out)


def strip_special(ids: Sequence[int]) -> tuple[int, ...]:
    """Content tokens only: stops at EOS, drops PAD and BOS."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(int(i))
    return tuple(out)


def canonical(ids: Sequence[int]) -> tuple[int, ...]:
    """Content tokens followed by a single EOS; the form used to compare responses."""
    return strip_special(ids) + (EOS,)


@dataclass(frozen=True)
class QRPair:
    query: tuple[int, ...]
    response: tuple[int, ...]
    pair_id: int
    topic: int | None = field(default=None, compare=False)

    def __post_init__(self):
        for name, seq in (("query", self.query), ("response", self.response)):
            if not seq or seq[-1] != EOS:
                raise ContractError(f"pair {self.pair_id}: {name} must end with EOS")
            if PAD in seq:
                raise ContractError(f"pair {self.pair_id}: {name} contains PAD")


def read_pairs_tsv(path) -> tuple[list[tuple[str, str]], list[int]]:
    """Raw ``query<TAB>response`` lines; returns (pairs, malformed 1-based line numbers)."""
    text = Path(path).read_text(encoding="utf-8")
    pairs, bad = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            bad.append(lineno)
            continue
        pairs.append((parts[0], parts[1]))
    if bad:
        logger.warning("%s: skipped %d malformed line(s): %s", path, len(bad), bad[:10])
    return pairs, bad


def load_pairs_tsv(path, vocab: Vocab, first_id: int = 0,
                   query_cap: int = MAX_QUERY_LEN,
                   response_cap: int = MAX_RESPONSE_LEN) -> tuple[list[QRPair], list[int]]:
    raw, bad = read_pairs_tsv(path)
    pairs = [QRPair(encode(q, vocab, query_cap), encode(r, vocab, response_cap), first_id + i)
             for i, (q, r) in enumerate(raw)]
    return pairs, bad


@dataclass(frozen=True)
class CorpusBundle:
    retrieval: tuple[QRPair, ...]
    ranking: tuple[QRPair, ...]
    generation: tuple[QRPair, ...]
    test: tuple[QRPair, ...]
    vocab: Vocab

    PARTS = ("retrieval", "ranking", "generation", "test")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen: set[int] = set()
        for part in self.PARTS:
            ids = {p.pair_id for p in getattr(self, part)}
            if seen & ids:
                raise ContractError(f"partition {part} shares pair ids with another partition")
            seen |= ids

    def partitions(self) -> dict[str, tuple[QRPair, ...]]:
        return {p: getattr(self, p) for p in self.PARTS}

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for part in self.PARTS:
            rows = [f"{decode(p.query, self.vocab)}\t{decode(p.response, self.vocab)}"
                    for p in getattr(self, part)]
            (d / f"{part}.tsv").write_text("".join(r + "\n" for r in rows), encoding="utf-8")
        self.vocab.save(d / "vocab.txt")

    @classmethod
    def load(cls, directory) -> "CorpusBundle":
        d = Path(directory)
        if not d.is_dir():
            raise FileNotFoundError(f"corpus directory {d} not found")
        vocab = Vocab.load(d / "vocab.txt")
        parts, next_id = {}, 0
        for part in cls.PARTS:
            pairs, _ = load_pairs_tsv(d / f"{part}.tsv", vocab, first_id=next_id)
            parts[part] = tuple(pairs)
            next_id += len(pairs)
        return cls(vocab=vocab, **parts)


# ------------------------------------------------------------ synthetic data

_QUERY_GLUE = ("what", "do", "you", "think", "about", "have", "ever", "tried", "tell",
               "me", "is", "the", "any", "good", "how", "was", "your")
_RESPONSE_GLUE = ("i", "really", "love", "it", "my", "best", "never", "yes", "no",
                  "we", "always", "like", "so", "much", "not", "sure", "a", "lot")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < n:
        syl = rng.integers(2, 4)
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class _Topic:
    query_templates: tuple[tuple[str, ...], ...]
    response_templates: tuple[tuple[str, ...], ...]
    fillers: tuple[str, ...]


def _make_topics(rng, n_topics, paraphrases, n_fillers) -> list[_Topic]:
    taken = set(_QUERY_GLUE) | set(_RESPONSE_GLUE)
    topics = []
    for _ in range(n_topics):
        q_words = _pseudo_words(rng, 3, taken)
        r_words = _pseudo_words(rng, 3, taken)
        fillers = tuple(_pseudo_words(rng, n_fillers, taken))
        qts, rts = [], []
        for _ in range(paraphrases):
            glue = list(rng.choice(_QUERY_GLUE, size=rng.integers(2, 4), replace=False))
            topical = list(rng.choice(q_words, size=rng.integers(1, 3), replace=False))
            qts.append(tuple(glue + topical + ["{slot}", "?"]))
            glue = list(rng.choice(_RESPONSE_GLUE, size=rng.integers(2, 4), replace=False))
            topical = list(rng.choice(r_words, size=rng.integers(1, 3), replace=False))
            body = glue + topical
            pos = int(rng.integers(1, len(body) + 1))
            rts.append(tuple(body[:pos] + ["{slot}"] + body[pos:] + ["."]))
        topics.append(_Topic(tuple(qts), tuple(rts), fillers))
    return topics


def _fill(template, filler) -> str:
    return " ".join(filler if w == "{slot}" else w for w in template)


def partition_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Floor every share; the remainder goes to the first (retrieval) partition."""
    sizes = [int(np.floor(n * r + 1e-9)) for r in ratios]
    sizes[0] += n - sum(sizes)
    return sizes


def generate_synthetic_corpus(seed: int, n_pairs: int = 3000, n_topics: int = 8,
                              paraphrases_per_topic: int = 4, fillers_per_topic: int = 8,
                              ratios: Sequence[float] = (0.4, 0.2, 0.3, 0.1),
                              template_noise: float = 0.15,
                              vocab_size: int = 2000) -> CorpusBundle:
    """Topic-structured dialogue pairs.

    Each topic owns query and response templates with a shared slot.  A pair
    copies one filler into both sides; the response template usually mirrors
    the query template index (``template_noise`` is the chance it does not).
    """
    if n_pairs < 20 or n_topics < 2 or paraphrases_per_topic < 2:
        raise ContractError("need n_pairs >= 20, n_topics >= 2, paraphrases_per_topic >= 2")
    if len(ratios) != 4 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError("ratios must be four shares summing to 1")
    rng = np.random.default_rng(seed)
    topics = _make_topics(rng, n_topics, paraphrases_per_topic, fillers_per_topic)
    raw = []
    for _ in range(n_pairs):
        k = int(rng.integers(n_topics))
        t = topics[k]
        f = t.fillers[rng.integers(len(t.fillers))]
        i = int(rng.integers(paraphrases_per_topic))
        j = i if rng.random() >= template_noise else int(rng.integers(paraphrases_per_topic))
        raw.append((_fill(t.query_templates[i], f), _fill(t.response_templates[j], f), k))
    order = rng.permutation(n_pairs)
    sizes = partition_sizes(n_pairs, ratios)
    bounds = np.cumsum([0] + sizes)
    train_texts = [s for idx in order[: bounds[3]] for s in raw[idx][:2]]
    vocab = build_vocab(train_texts, vocab_size)
    parts, next_id = {}, 0
    for pi, part in enumerate(CorpusBundle.PARTS):
        pairs = []
        for idx in order[bounds[pi]: bounds[pi + 1]]:
            q, r, k = raw[idx]
            pairs.append(QRPair(encode(q, vocab, MAX_QUERY_LEN), encode(r, vocab, MAX_RESPONSE_LEN),
                                next_id, topic=k))
            next_id += 1
        parts[part] = tuple(pairs)
    return CorpusBundle(vocab=vocab, **parts)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns (ids[B, L], mask[B, L]) with the mask set by length."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask

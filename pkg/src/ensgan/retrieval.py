"""TF-IDF pre-retrieval over the query-response pool.

Weighting is log-tf times smoothed idf, ``(1 + ln tf) * (ln((1 + N) / (1 + df)) + 1)``,
with cosine normalisation.  Ties in the ranking go to the smaller pair id.
"""

from __future__ import annotations

import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import QRPair, strip_special
from .errors import ContractError, CorruptionError, VersionError

BY_QUERY = "by-query"
BY_RESPONSE = "by-response"
_MODES = (BY_QUERY, BY_RESPONSE)
MAGIC = b"EGIDX1"


def tfidf_weight(tf: int, df: int, n_docs: int) -> float:
    if tf < 1 or not 1 <= df <= n_docs:
        raise ContractError(f"tfidf_weight needs tf >= 1 and 1 <= df <= N (tf={tf}, df={df}, N={n_docs})")
    return (1.0 + math.log(tf)) * (math.log((1.0 + n_docs) / (1.0 + df)) + 1.0)


@dataclass
class InvertedIndex:
    mode: str
    postings: dict[int, list[tuple[int, int]]]
    doc_norms: dict[int, float]
    n_docs: int
    df: dict[int, int] = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, InvertedIndex) and self.mode == other.mode
                and self.n_docs == other.n_docs and self.df == other.df
                and self.postings == other.postings and self.doc_norms == other.doc_norms)

    # -- persistence
    def save(self, path) -> None:
        out = bytearray(MAGIC)
        out += struct.pack("<BI", _MODES.index(self.mode), self.n_docs)
        for pid in sorted(self.doc_norms):
            out += struct.pack("<I", pid) + _hex_double(self.doc_norms[pid])
        out += struct.pack("<I", len(self.postings))
        for tok in sorted(self.postings):
            plist = self.postings[tok]
            out += struct.pack("<III", tok, self.df[tok], len(plist))
            for pid, tf in plist:
                out += struct.pack("<II", pid, tf)
        Path(path).write_bytes(bytes(out))

    @classmethod
    def load(cls, path) -> "InvertedIndex":
        buf = Path(path).read_bytes()
        if buf[:5] != MAGIC[:5]:
            raise CorruptionError(f"{path}: not an index file")
        if buf[:6] != MAGIC:
            raise VersionError(f"{path}: unsupported index version {buf[:6]!r}")
        try:
            pos = 6
            mode_idx, n_docs = struct.unpack_from("<BI", buf, pos)
            pos += 5
            norms = {}
            for _ in range(n_docs):
                (pid,) = struct.unpack_from("<I", buf, pos)
                norms[pid] = _unhex_double(buf[pos + 4: pos + 20])
                pos += 20
            (n_terms,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            postings, df = {}, {}
            for _ in range(n_terms):
                tok, d, n = struct.unpack_from("<III", buf, pos)
                pos += 12
                plist = []
                for _ in range(n):
                    plist.append(struct.unpack_from("<II", buf, pos))
                    pos += 8
                postings[tok], df[tok] = [tuple(p) for p in plist], d
        except (struct.error, ValueError) as exc:
            raise CorruptionError(f"{path}: truncated or malformed index ({exc})") from None
        if pos != len(buf):
            raise CorruptionError(f"{path}: {len(buf) - pos} trailing bytes")
        return cls(_MODES[mode_idx], postings, norms, n_docs, df)


def _hex_double(x: float) -> bytes:
    return struct.pack("<d", x).hex().encode("ascii")


def _unhex_double(b: bytes) -> float:
    if len(b) != 16:
        raise ValueError("short double")
    return struct.unpack("<d", bytes.fromhex(b.decode("ascii")))[0]


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[tuple[int, float], ...]
    query: tuple[int, ...]

    @property
    def pair_ids(self) -> list[int]:
        return [pid for pid, _ in self.hits]


def build_index(pool: Sequence[QRPair], mode: str = BY_QUERY) -> InvertedIndex:
    if mode not in _MODES:
        raise ContractError(f"unknown index mode {mode!r}")
    if not pool:
        raise ContractError("build_index: empty pool")
    docs = {p.pair_id: Counter(strip_special(p.query if mode == BY_QUERY else p.response))
            for p in pool}
    postings: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for pid in sorted(docs):
        for tok, tf in sorted(docs[pid].items()):
            postings[tok].append((pid, tf))
    n = len(docs)
    df = {tok: len(pl) for tok, pl in postings.items()}
    norms = {}
    for pid, counts in docs.items():
        sq = sum(tfidf_weight(tf, df[tok], n) ** 2 for tok, tf in counts.items())
        norms[pid] = math.sqrt(sq)
    return InvertedIndex(mode, dict(postings), norms, n, df)


def retrieve_top_k(index: InvertedIndex, probe: Sequence[int], k: int,
                   exclude: Iterable[int] = ()) -> RetrievalResult:
    """Cosine top-k; only documents sharing at least one term are returned."""
    if k < 1:
        raise ContractError("retrieve_top_k: k must be >= 1")
    counts = Counter(t for t in strip_special(probe) if t in index.df)
    excluded = set(exclude)
    if not counts:
        return RetrievalResult((), tuple(probe))
    q = {tok: tfidf_weight(tf, index.df[tok], index.n_docs) for tok, tf in counts.items()}
    q_norm = math.sqrt(sum(w * w for w in q.values()))
    scores: dict[int, float] = defaultdict(float)
    for tok in sorted(q):
        wq = q[tok]
        d = index.df[tok]
        for pid, tf in index.postings[tok]:
            if pid not in excluded:
                scores[pid] += wq * tfidf_weight(tf, d, index.n_docs)
    ranked = sorted(((pid, s / (q_norm * index.doc_norms[pid])) for pid, s in scores.items()),
                    key=lambda x: (-x[1], x[0]))
    return RetrievalResult(tuple(ranked[:k]), tuple(probe))

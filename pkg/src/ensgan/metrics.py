"""Word-overlap, embedding and ranking metrics plus the module-wise ranking-loss analysis."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import RESERVED, Vocab, strip_special
from .errors import ContractError
from .ranker import RETRIEVED, SYNTHETIC, MatchingModel, rank_candidates, scores


# ------------------------------------------------------------ BLEU

def _ngrams(seq, k):
    return Counter(tuple(seq[i:i + k]) for i in range(len(seq) - k + 1))


def _bleu_stats(cand, ref, n):
    matches, totals = [], []
    for k in range(1, n + 1):
        c, r = _ngrams(cand, k), _ngrams(ref, k)
        matches.append(sum(min(v, r[g]) for g, v in c.items()))
        totals.append(max(len(cand) - k + 1, 0))
    return matches, totals


def _combine(matches, totals, cand_len, ref_len, n):
    if cand_len == 0 or matches[0] == 0:
        return 0.0
    logp = math.log(matches[0] / totals[0])
    for k in range(1, n):
        logp += math.log((matches[k] + 1) / (totals[k] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(logp / n)


def bleu_n(candidates: Sequence, references: Sequence, n: int, sentence_level: bool = False) -> float:
    """Corpus BLEU-n over content tokens; add-1 smoothing above order 1.

    ``sentence_level`` averages per-pair scores instead of pooling counts.
    """
    if not 1 <= n <= 4:
        raise ContractError("BLEU order must be in 1..4")
    if len(candidates) != len(references):
        raise ContractError("candidate and reference lists differ in length")
    if not len(candidates):
        raise ContractError("bleu_n: empty corpus")
    pairs = [(strip_special(c), strip_special(r)) for c, r in zip(candidates, references)]
    if sentence_level:
        vals = []
        for c, r in pairs:
            m, t = _bleu_stats(c, r, n)
            vals.append(_combine(m, t, len(c), len(r), n))
        return float(np.mean(vals))
    matches, totals = [0] * n, [0] * n
    clen = rlen = 0
    for c, r in pairs:
        m, t = _bleu_stats(c, r, n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        clen += len(c)
        rlen += len(r)
    return _combine(matches, totals, clen, rlen, n)


# ------------------------------------------------------------ embedding metrics

@dataclass
class EmbeddingTable:
    vectors: np.ndarray
    present: np.ndarray
    source: str = "seeded-random"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool).copy()
        if self.vectors.ndim != 2 or len(self.present) != len(self.vectors):
            raise ContractError("embedding table must be [V, d] with a [V] presence mask")
        if not np.isfinite(self.vectors).all():
            raise ContractError("embedding table contains non-finite values")
        self.present[: len(RESERVED)] = False

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, ids) -> np.ndarray:
        keep = [i for i in strip_special(ids) if 0 <= i < len(self.present) and self.present[i]]
        return self.vectors[keep]

    @classmethod
    def random(cls, vocab_size: int, dim: int = 32, seed: int = 0) -> "EmbeddingTable":
        v = np.random.default_rng(seed).normal(size=(vocab_size, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return cls(v, np.ones(vocab_size, dtype=bool))

    @classmethod
    def from_model(cls, model) -> "EmbeddingTable":
        v = model.params["emb"].data.copy()
        return cls(v, np.ones(len(v), dtype=bool), "generator-learned")

    @classmethod
    def from_file(cls, path, vocab: Vocab) -> "EmbeddingTable":
        """Text vectors, one ``token v1 v2 ...`` per line; tokens not in the file are absent."""
        rows = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            parts = line.split()
            if len(parts) > 1 and parts[0] in vocab:
                rows[vocab.id(parts[0])] = np.array(parts[1:], dtype=np.float64)
        if not rows:
            raise ContractError(f"{path}: no vectors for vocabulary tokens")
        dim = len(next(iter(rows.values())))
        v = np.zeros((len(vocab), dim))
        present = np.zeros(len(vocab), dtype=bool)
        for i, row in rows.items():
            if len(row) != dim:
                raise ContractError(f"{path}: inconsistent vector dimension")
            v[i], present[i] = row, True
        return cls(v, present, "external-file")


def _cos(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def _unit_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def _extrema(m):
    hi, lo = m.max(axis=0), m.min(axis=0)
    return np.where(np.abs(lo) > np.abs(hi), lo, hi)


def embedding_scores(c: np.ndarray, r: np.ndarray) -> tuple[float, float, float]:
    """EA, GM, VE for one pair of token-vector matrices."""
    ea = _cos(c.mean(axis=0), r.mean(axis=0))
    sim = _unit_rows(c) @ _unit_rows(r).T
    gm = 0.5 * (sim.max(axis=1).mean() + sim.max(axis=0).mean())
    ve = _cos(_extrema(c), _extrema(r))
    return ea, float(gm), ve


def embedding_metrics(candidates, references, table: EmbeddingTable, return_skipped: bool = False):
    """Corpus means of (EA, GM, VE); pairs with an empty side after lookup are skipped."""
    if len(candidates) != len(references):
        raise ContractError("candidate and reference lists differ in length")
    vals, skipped = [], 0
    for c, r in zip(candidates, references):
        cv, rv = table.lookup(c), table.lookup(r)
        if not len(cv) or not len(rv):
            skipped += 1
            continue
        vals.append(embedding_scores(cv, rv))
    out = tuple(float(x) for x in np.mean(vals, axis=0)) if vals else (float("nan"),) * 3
    return (out, skipped) if return_skipped else out


# ------------------------------------------------------------ ranking metrics

def _ranker_order(ranker, query, candidates) -> list[int]:
    if isinstance(ranker, MatchingModel):
        return [i for i, _ in rank_candidates(ranker, query, candidates)]
    s = list(ranker(query, candidates))
    return sorted(range(len(candidates)), key=lambda i: (-s[i], i))


def p_at_1(ranker, items) -> float:
    """Share of (q, truth, distractors) items whose truth is ranked first.

    The truth is listed after its distractors, so a tie never counts as a hit.
    ``ranker`` is a MatchingModel or a ``f(query, candidates) -> scores`` callable.
    """
    if not len(items):
        raise ContractError("p_at_1: empty evaluation set")
    hits = 0
    for q, truth, distractors in items:
        if not len(distractors):
            raise ContractError("p_at_1: every item needs at least one distractor")
        cands = list(distractors) + [truth]
        hits += _ranker_order(ranker, q, cands)[0] == len(cands) - 1
    return hits / len(items)


@dataclass
class RankingLossBreakdown:
    generation: float | None
    retrieval: float | None
    overall: float | None
    ratios: dict = field(default_factory=dict)


def contribution_ratios(provenances: Sequence[str]) -> dict:
    n = len(provenances)
    c = Counter(provenances)
    return {leg: (c[leg] / n if n else 0.0) for leg in (SYNTHETIC, RETRIEVED)}


def module_ranking_loss(ranker, log, margin: float = 1.0) -> RankingLossBreakdown:
    """Hinge ``max(0, margin + g(q, chosen) - g(q, r))`` per serving leg, contribution-weighted."""
    if margin <= 0:
        raise ContractError("margin must be positive")
    if not len(log):
        return RankingLossBreakdown(None, None, None, {SYNTHETIC: 0.0, RETRIEVED: 0.0})
    if isinstance(ranker, MatchingModel):
        qs = [e[0] for e in log]
        s = scores(ranker, qs + qs, [e[2] for e in log] + [e[1] for e in log])
    else:
        s = np.array([ranker(e[0], e[2]) for e in log] + [ranker(e[0], e[1]) for e in log])
    n = len(log)
    hinge = np.maximum(0.0, margin + s[:n] - s[n:])
    provs = [e[3] for e in log]
    ratios = contribution_ratios(provs)
    legs = {}
    for leg in (SYNTHETIC, RETRIEVED):
        mask = np.array([p == leg for p in provs])
        legs[leg] = float(hinge[mask].mean()) if mask.any() else None
    overall = sum(ratios[leg] * v for leg, v in legs.items() if v is not None)
    return RankingLossBreakdown(legs[SYNTHETIC], legs[RETRIEVED], float(overall), ratios)


# ------------------------------------------------------------ report

_BOUNDED = ("BLEU1", "BLEU2", "BLEU3", "BLEU4", "P@1")


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)

    def add(self, system: str, metric: str, value) -> None:
        if value is None:
            return
        value = float(value)
        if not math.isfinite(value):
            raise ContractError(f"{system}.{metric} is not finite")
        if metric in _BOUNDED and not 0.0 <= value <= 1.0:
            raise ContractError(f"{system}.{metric} = {value} outside [0, 1]")
        self.values.setdefault(system, {})[metric] = value

    def get(self, system: str, metric: str) -> float:
        return self.values[system][metric]

    def to_text(self) -> str:
        lines = sorted(f"{s}.{m} = {v!r}" for s, ms in self.values.items() for m, v in ms.items())
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        rep = cls()
        for line in text.splitlines():
            if line.strip():
                key, value = (s.strip() for s in line.split("=", 1))
                system, metric = key.split(".", 1)
                rep.add(system, metric, float(value))
        return rep


def evaluate_responses(report: MetricsReport, system: str, responses, references,
                       table: EmbeddingTable) -> None:
    for n in range(1, 5):
        report.add(system, f"BLEU{n}", bleu_n(responses, references, n))
    ea, gm, ve = embedding_metrics(responses, references, table)
    report.add(system, "EA", ea)
    report.add(system, "GM", gm)
    report.add(system, "VE", ve)


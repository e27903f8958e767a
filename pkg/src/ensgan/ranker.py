"""Matching scorer g(q, r) in its two adversarial roles.

As the discriminator D it learns to order true responses above negatives
through ``sigma(g(q, r1) - g(q, r2))``.  As the generative ranker G2 it samples
negatives from a candidate pool with ``softmax_h g(q, r_h)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ndtensor as nd
from .corpus import canonical, pad_batch
from .errors import ContractError
from .layers import Module, add_gru, glorot, run_gru, uniform

GROUND_TRUTH, RETRIEVED, RANDOM, SYNTHETIC = "ground-truth", "retrieved", "random", "synthetic"
PROVENANCES = (GROUND_TRUTH, RETRIEVED, RANDOM, SYNTHETIC)
PROB_EPS = 1e-7


class MatchingModel(Module):
    """Dual GRU encoders over a shared embedding; bilinear term plus an MLP head."""

    def __init__(self, vocab_size: int, emb_dim: int = 32, hidden: int = 32,
                 mlp_dim: int = 32, dropout: float = 0.2, seed: int = 0):
        super().__init__(dict(vocab_size=vocab_size, emb_dim=emb_dim, hidden=hidden,
                              mlp_dim=mlp_dim, dropout=dropout, seed=seed))
        rng = np.random.default_rng(seed)
        self.add("emb", uniform(rng, (vocab_size, emb_dim), 0.1))
        add_gru(self, "qenc", emb_dim, hidden, rng)
        add_gru(self, "renc", emb_dim, hidden, rng)
        self.add("bil.W", uniform(rng, (hidden, hidden), 0.1))
        self.add("mlp.W1", glorot(rng, (3 * hidden, mlp_dim)))
        self.add("mlp.b1", np.zeros(mlp_dim))
        self.add("mlp.w2", uniform(rng, (mlp_dim,), 0.1))
        self.add("mlp.b2", np.zeros(1))


def _encode(model: MatchingModel, seqs, side: str, rng=None) -> nd.Tensor:
    ids, mask = pad_batch(seqs)
    p = model.params
    x = nd.dropout(nd.embedding(p["emb"], ids), model.arch["dropout"], rng)
    return run_gru(x, mask, p[f"{side}.W"], p[f"{side}.U"], p[f"{side}.b"], model.arch["hidden"])


def _unique(seqs) -> tuple[list[tuple[int, ...]], np.ndarray]:
    index: dict[tuple[int, ...], int] = {}
    order = []
    for s in seqs:
        s = tuple(int(t) for t in s)
        if not s:
            raise ContractError("empty token sequence")
        if s not in index:
            index[s] = len(order)
            order.append(s)
    return order, np.array([index[tuple(int(t) for t in s)] for s in seqs])


def score_pairs(model: MatchingModel, queries, responses, rng=None) -> nd.Tensor:
    """Scores ``g(q_i, r_i)`` as a tensor of shape [B]; repeated sequences encode once."""
    if len(queries) != len(responses) or not len(queries):
        raise ContractError("score_pairs: need equal, nonempty query/response lists")
    uq, qi = _unique(queries)
    ur, ri = _unique(responses)
    q = nd.embedding(_encode(model, uq, "qenc", rng), qi)
    r = nd.embedding(_encode(model, ur, "renc", rng), ri)
    p = model.params
    bil = nd.sum_((q @ p["bil.W"]) * r, axis=-1)
    h = nd.tanh(nd.concat([q, r, q * r]) @ p["mlp.W1"] + p["mlp.b1"])
    return bil + h @ p["mlp.w2"] + p["mlp.b2"]


def scores(model: MatchingModel, queries, responses) -> np.ndarray:
    """Evaluation-mode scores as a plain array."""
    with nd.no_grad():
        return score_pairs(model, queries, responses).data.copy()


def score(model: MatchingModel, query, response) -> float:
    return float(scores(model, [query], [response])[0])


def _sigmoid(x):
    return nd._sigmoid_np(np.asarray(x, dtype=np.float64))


def pair_probs(model: MatchingModel, queries, r1s, r2s) -> np.ndarray:
    """``sigma(g(q, r1) - g(q, r2))`` for aligned lists, evaluation mode."""
    n = len(queries)
    s = scores(model, list(queries) * 2, list(r1s) + list(r2s))
    return _sigmoid(s[:n] - s[n:])


def pair_prob(model: MatchingModel, query, r1, r2) -> float:
    return float(pair_probs(model, [query], [r1], [r2])[0])


def reward(model: MatchingModel, query, r, r_neg, form: str = "advantage") -> float:
    """``2 sigma(g(q, r) - g(q, r_neg)) - 1`` (or the clamped log form)."""
    p = pair_prob(model, query, r, r_neg)
    if form == "advantage":
        return 2.0 * p - 1.0
    if form == "log":
        return float(np.log(np.clip(p, PROB_EPS, 1.0 - PROB_EPS)))
    raise ContractError(f"unknown reward form {form!r}")


def hinge_loss(model: MatchingModel, triples, margin: float, rng=None) -> nd.Tensor:
    """Mean of ``max(0, margin + g(q, r_neg) - g(q, r_pos))`` over (q, r_pos, r_neg) triples."""
    if margin <= 0:
        raise ContractError("margin must be positive")
    n = len(triples)
    q = [t[0] for t in triples]
    s = score_pairs(model, q + q, [t[1] for t in triples] + [t[2] for t in triples], rng)
    gap = s[n:] - s[:n] + margin
    return nd.mean(nd.clip(gap, 0.0, np.inf))


def hinge_pretrain_step(model: MatchingModel, triples, margin: float, optimizer, rng=None) -> float:
    if not len(triples):
        raise ContractError("hinge_pretrain_step: empty batch")
    nd.clear_tape()
    loss = hinge_loss(model, triples, margin, rng)
    value = loss.item()
    nd.backward(loss)
    _fill_missing_grads(model)
    optimizer.step()
    nd.clear_tape()
    return value


def _fill_missing_grads(model: Module) -> None:
    for p in model.parameters():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def d_objective(p_true: nd.Tensor, p_adv_below: nd.Tensor) -> nd.Tensor:
    """Negated discriminator objective from ordered-pair probabilities.

    ``p_true`` holds ``D(o)`` for true pairs; ``p_adv_below`` holds
    ``1 - D(o')``, the probability that the ground truth outranks each
    adversarial candidate.  Both are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    lo, hi = PROB_EPS, 1.0 - PROB_EPS
    return -(nd.mean(nd.log(nd.clip(p_true, lo, hi))) + nd.mean(nd.log(nd.clip(p_adv_below, lo, hi))))


def d_loss(model: MatchingModel, positives, adversarials, rng=None) -> nd.Tensor:
    """``-(mean log D(o) + mean log(1 - D(o')))``.

    ``positives`` are (q, r, r_neg) with ``D(o) = sigma(g(q, r) - g(q, r_neg))``;
    ``adversarials`` are (q, r, r') with ``D(o') = sigma(g(q, r') - g(q, r))``,
    the chance the generated r' is ranked above the ground truth.  Adversarials
    from both generators share one mean, so each source counts by its size.
    """
    if not len(positives) or not len(adversarials):
        raise ContractError("d_update needs nonempty positive and adversarial sets")
    qs = [t[0] for t in positives] + [t[0] for t in adversarials]
    n = len(qs)
    s = score_pairs(model, qs + qs,
                    [t[1] for t in positives] + [t[1] for t in adversarials]
                    + [t[2] for t in positives] + [t[2] for t in adversarials], rng)
    ordered = nd.sigmoid(s[:n] - s[n:])
    k = len(positives)
    return d_objective(ordered[:k], ordered[k:])


def d_update(model: MatchingModel, positives, adversarials, optimizer, rng=None) -> float:
    nd.clear_tape()
    loss = d_loss(model, positives, adversarials, rng)
    value = loss.item()
    nd.backward(loss)
    _fill_missing_grads(model)
    optimizer.step()
    nd.clear_tape()
    return value


# ------------------------------------------------------------ generative ranker

@dataclass(frozen=True)
class ResponsePair:
    positive: tuple[int, ...]
    negative: tuple[int, ...]
    provenance: str

    def __post_init__(self):
        if tuple(self.positive) == tuple(self.negative):
            raise ContractError("response pair members must differ")
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")


def _pool_members(pool) -> tuple[list, list]:
    members = getattr(pool, "members", pool)
    if not len(members):
        raise ContractError("empty candidate pool")
    resp, prov = [], []
    for m in members:
        if isinstance(m, tuple) and len(m) == 2 and isinstance(m[1], str):
            resp.append(tuple(m[0]))
            prov.append(m[1])
        else:
            resp.append(tuple(m))
            prov.append(RETRIEVED)
    return resp, prov


def softmax_np(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max())
    return e / e.sum()


def g2_distribution(model: MatchingModel, query, pool) -> np.ndarray:
    resp, _ = _pool_members(pool)
    return softmax_np(scores(model, [query] * len(resp), resp))


def g2_sample(model: MatchingModel, query, r, pool, H: int, rng) -> list[ResponsePair]:
    """``H`` i.i.d. draws from the pool softmax, paired with the ground truth."""
    if H < 1:
        raise ContractError("H must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    resp, prov = _pool_members(pool)
    p = g2_distribution(model, query, resp)
    idx = rng.choice(len(resp), size=H, p=p)
    return [ResponsePair(tuple(r), resp[i], prov[i]) for i in idx]


def _log_softmax(s: nd.Tensor) -> nd.Tensor:
    shift = float(s.data.max())
    return s - (nd.log(nd.sum_(nd.exp(s - shift))) + shift)


def g2_policy_loss(model: MatchingModel, queries, pools, weights, rng=None) -> nd.Tensor:
    """``-(1/B) sum_b sum_j w_bj log P(r_j | q_b)``; ``weights[b]`` spans pool ``b``."""
    flat_q, flat_r, bounds = [], [], [0]
    for q, pool in zip(queries, pools):
        resp, _ = _pool_members(pool)
        flat_q += [q] * len(resp)
        flat_r += resp
        bounds.append(len(flat_r))
    s = score_pairs(model, flat_q, flat_r, rng)
    total = None
    for b in range(len(queries)):
        w = np.asarray(weights[b], dtype=np.float64)
        term = nd.sum_(_log_softmax(s[bounds[b]:bounds[b + 1]]) * w)
        total = term if total is None else total + term
    return total * (-1.0 / len(queries))


def pg_update_g2(model: MatchingModel, discriminator: MatchingModel, batch, H: int,
                 optimizer, rng, reward_form: str = "advantage") -> float:
    """REINFORCE step on the pool softmax; ``batch`` holds (q, r, pool) items.

    Each of the ``H`` draws is weighted by the frozen discriminator's reward
    for ranking the drawn candidate above ``r``.  Returns the mean weight.
    """
    queries, pools, weights, all_w = [], [], [], []
    for q, r, pool in batch:
        resp, _ = _pool_members(pool)
        p = g2_distribution(model, q, resp)
        idx = rng.choice(len(resp), size=H, p=p)
        probs = pair_probs(discriminator, [q] * H, [resp[i] for i in idx], [r] * H)
        if reward_form == "advantage":
            w = 2.0 * probs - 1.0
        else:
            w = np.log(np.clip(probs, PROB_EPS, 1.0 - PROB_EPS))
        vec = np.zeros(len(resp))
        np.add.at(vec, idx, w / H)
        queries.append(q)
        pools.append(resp)
        weights.append(vec)
        all_w.append(w)
    nd.clear_tape()
    loss = g2_policy_loss(model, queries, pools, weights)
    nd.backward(loss)
    _fill_missing_grads(model)
    optimizer.step()
    nd.clear_tape()
    return float(np.mean(np.concatenate(all_w)))


def rank_candidates(model: MatchingModel, query, candidates) -> list[tuple[int, float]]:
    """(candidate index, score) sorted by score descending, ties by index."""
    if not len(candidates):
        raise ContractError("rank_candidates: no candidates")
    s = scores(model, [query] * len(candidates), list(candidates))
    order = sorted(range(len(candidates)), key=lambda i: (-s[i], i))
    return [(i, float(s[i])) for i in order]


def discriminator_scorer(model: MatchingModel):
    """Scorer for roll-outs: probability each candidate outranks its reference."""
    def scorer(queries, references, candidates):
        return pair_probs(model, queries, [canonical(c) for c in candidates], references)
    return scorer

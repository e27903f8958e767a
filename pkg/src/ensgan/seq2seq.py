"""Attention encoder-decoder response generator and its adversarial update.

The decoder follows ``s_t = GRU(emb(w_{t-1}), s_{t-1})``, ``c_t = attn(s_t, H)``,
``p(w_t) = softmax(W_o [s_t; c_t; emb(w_{t-1})] + b_o)`` with additive
attention.  Adversarial training weights the log-probability of every
emitted token by a Monte-Carlo action value computed against a frozen
discriminator.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import ndtensor as nd
from .corpus import BOS, EOS, MAX_QUERY_LEN, pad_batch
from .errors import ContractError, ShapeError
from .layers import Module, add_gru, glorot, gru_step, run_gru, uniform

# scorer(queries, references, candidates) -> probability that each candidate
# is ranked above its reference by the discriminator
Scorer = Callable[[Sequence[Sequence[int]], Sequence[Sequence[int]], Sequence[Sequence[int]]], np.ndarray]

_NEG_INF = -1e9


@dataclass
class RolloutConfig:
    m1: int = 5
    max_len: int = 12
    temperature: float = 1.0
    seed: int = 0
    stop_at_eos: bool = True
    reward_form: str = "advantage"
    threads: int = 1

    def __post_init__(self):
        if self.m1 < 1:
            raise ContractError("m1 must be >= 1")
        if self.max_len < 1:
            raise ContractError("max_len must be >= 1")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")
        if self.reward_form not in ("advantage", "log"):
            raise ContractError(f"unknown reward form {self.reward_form!r}")


class Seq2SeqModel(Module):
    def __init__(self, vocab_size: int, emb_dim: int = 32, enc_hidden: int = 32,
                 dec_hidden: int = 32, att_dim: int = 32, dropout: float = 0.2,
                 max_query_len: int = MAX_QUERY_LEN, seed: int = 0):
        super().__init__(dict(vocab_size=vocab_size, emb_dim=emb_dim, enc_hidden=enc_hidden,
                              dec_hidden=dec_hidden, att_dim=att_dim, dropout=dropout,
                              max_query_len=max_query_len, seed=seed))
        rng = np.random.default_rng(seed)
        self.add("emb", uniform(rng, (vocab_size, emb_dim), 0.1))
        add_gru(self, "enc", emb_dim, enc_hidden, rng)
        self.add("bridge.W", glorot(rng, (enc_hidden, dec_hidden)))
        self.add("bridge.b", np.zeros(dec_hidden))
        add_gru(self, "dec", emb_dim, dec_hidden, rng)
        self.add("att.Wh", glorot(rng, (enc_hidden, att_dim)))
        self.add("att.Ws", glorot(rng, (dec_hidden, att_dim)))
        self.add("att.v", uniform(rng, (att_dim,), 0.1))
        self.add("out.W", glorot(rng, (dec_hidden + enc_hidden + emb_dim, vocab_size)))
        self.add("out.b", np.zeros(vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.arch["vocab_size"]


class Encoded(NamedTuple):
    states: nd.Tensor      # [B, Tq, H1]
    proj: nd.Tensor        # [B, Tq, A], states projected for attention
    mask: np.ndarray       # [B, Tq]
    s0: nd.Tensor          # [B, H2]


def encode_batch(model: Seq2SeqModel, queries: Sequence[Sequence[int]], rng=None) -> Encoded:
    cap = model.arch["max_query_len"]
    for q in queries:
        if not len(q):
            raise ContractError("encode: empty query")
        if len(q) > cap:
            raise ContractError(f"encode: query length {len(q)} exceeds cap {cap}")
    ids, mask = pad_batch(queries)
    p = model.params
    x = nd.dropout(nd.embedding(p["emb"], ids), model.arch["dropout"], rng)
    h_last, states = run_gru(x, mask, p["enc.W"], p["enc.U"], p["enc.b"],
                             model.arch["enc_hidden"], keep_states=True)
    s0 = nd.tanh(h_last @ p["bridge.W"] + p["bridge.b"])
    return Encoded(states, states @ p["att.Wh"], mask, s0)


def encode_query(model: Seq2SeqModel, query: Sequence[int]) -> nd.Tensor:
    """Encoder states ``h_1..h_Tq`` for one query, shape [Tq, H1]."""
    return encode_batch(model, [query]).states[0]


def _step(model, x, gx, s_prev, enc: Encoded, temperature=1.0):
    p = model.params
    B = s_prev.shape[0]
    H1, A = model.arch["enc_hidden"], model.arch["att_dim"]
    s = gru_step(gx, s_prev, p["dec.U"], model.arch["dec_hidden"])
    e = nd.tanh(enc.proj + nd.reshape(s @ p["att.Ws"], (B, 1, A))) @ p["att.v"]
    if not enc.mask.all():
        e = e + (1.0 - enc.mask) * _NEG_INF
    alpha = nd.softmax(e)
    Tq = enc.mask.shape[1]
    c = nd.reshape(nd.reshape(alpha, (B, 1, Tq)) @ enc.states, (B, H1))
    logits = nd.concat([s, c, x]) @ p["out.W"] + p["out.b"]
    if temperature != 1.0:
        logits = logits * (1.0 / temperature)
    return nd.softmax(logits), s, c, alpha


def decode_step(model: Seq2SeqModel, prev_tokens, s_prev: nd.Tensor, enc: Encoded,
                temperature: float = 1.0, rng=None):
    """One decoder step: returns (distribution [B, V], s_t, c_t, attention weights)."""
    prev = np.atleast_1d(np.asarray(prev_tokens, dtype=np.int64))
    if s_prev.shape != (len(prev), model.arch["dec_hidden"]) or enc.states.shape[0] != len(prev):
        raise ShapeError(f"decode_step: state {s_prev.shape} / encoder {enc.states.shape} "
                         f"do not match {len(prev)} tokens")
    p = model.params
    x = nd.dropout(nd.embedding(p["emb"], prev), model.arch["dropout"], rng)
    gx = x @ p["dec.W"] + p["dec.b"]
    return _step(model, x, gx, s_prev, enc, temperature)


def sequence_log_probs(model: Seq2SeqModel, queries, responses, rng=None):
    """Teacher-forced ``log p(w_t | w_<t, q)``; returns (Tensor [B, T], mask [B, T])."""
    if len(queries) != len(responses) or not len(queries):
        raise ContractError("sequence_log_probs: need equal, nonempty query/response lists")
    enc = encode_batch(model, queries, rng)
    targets, mask = pad_batch(responses)
    B, T = targets.shape
    inputs = np.concatenate([np.full((B, 1), BOS), targets[:, :-1]], axis=1)
    p = model.params
    V = model.vocab_size
    x_all = nd.dropout(nd.embedding(p["emb"], inputs), model.arch["dropout"], rng)
    gx_all = x_all @ p["dec.W"] + p["dec.b"]
    s = enc.s0
    cols = []
    for t in range(T):
        probs, s, _, _ = _step(model, x_all[:, t, :], gx_all[:, t, :], s, enc)
        onehot = np.zeros((B, V))
        onehot[np.arange(B), targets[:, t]] = 1.0
        picked = nd.sum_(probs * onehot, axis=-1)
        cols.append(nd.reshape(nd.log(picked), (B, 1)))
    return nd.concat(cols, axis=1), mask


def ce_loss(model: Seq2SeqModel, queries, responses, rng=None) -> nd.Tensor:
    """Mean per-token negative log-likelihood."""
    logp, mask = sequence_log_probs(model, queries, responses, rng)
    return nd.sum_(logp * mask) * (-1.0 / mask.sum())


def pretrain_ce_step(model: Seq2SeqModel, batch, optimizer, rng=None) -> float:
    if not len(batch):
        raise ContractError("pretrain_ce_step: empty batch")
    nd.clear_tape()
    loss = ce_loss(model, [p.query for p in batch], [p.response for p in batch], rng)
    value = loss.item()
    nd.backward(loss)
    optimizer.step()
    nd.clear_tape()
    return value


def _pick(probs: np.ndarray, mode: str, rng) -> np.ndarray:
    if mode == "greedy":
        return probs.argmax(axis=1)
    u = rng.random(probs.shape[0])
    idx = (probs.cumsum(axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def generate(model: Seq2SeqModel, queries, mode: str = "greedy", max_len: int = 12,
             rng=None, temperature: float = 1.0, prefixes=None,
             stop_at_eos: bool = True) -> list[tuple[int, ...]]:
    """Batched decoding from ``BOS``; optional equal-length ``prefixes`` are forced first.

    Each output ends at the first EOS (kept) or after ``max_len`` tokens.
    """
    if mode not in ("greedy", "sample"):
        raise ContractError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None:
        raise ContractError("sample mode needs an rng")
    with nd.no_grad():
        enc = encode_batch(model, queries)
        B = len(queries)
        seqs = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        s = enc.s0
        prev = np.full(B, BOS)
        if prefixes is not None:
            width = len(prefixes[0])
            if any(len(pr) != width for pr in prefixes):
                raise ContractError("generate: prefixes must share one length")
            for t in range(width):
                _, s, _, _ = decode_step(model, prev, s, enc, temperature)
                prev = np.array([pr[t] for pr in prefixes])
                for b in range(B):
                    if not done[b]:
                        seqs[b].append(int(prev[b]))
                if stop_at_eos:
                    done |= prev == EOS
        while not done.all() and len(seqs[0]) < max_len:
            probs, s, _, _ = decode_step(model, prev, s, enc, temperature)
            tok = _pick(probs.data, mode, rng)
            for b in np.flatnonzero(~done):
                seqs[b].append(int(tok[b]))
            # finished rows keep a dummy length so the loop bound stays uniform
            for b in np.flatnonzero(done):
                seqs[b].append(-1)
            if stop_at_eos:
                done |= tok == EOS
            prev = tok
    return [tuple(x for x in seq if x >= 0) for seq in seqs]


def decode_sequence(model: Seq2SeqModel, query, mode: str = "greedy",
                    config: RolloutConfig | None = None, rng=None) -> tuple[int, ...]:
    config = config or RolloutConfig()
    if rng is None and mode == "sample":
        rng = np.random.default_rng(config.seed)
    return generate(model, [query], mode, config.max_len, rng, config.temperature,
                    stop_at_eos=config.stop_at_eos)[0]


# ------------------------------------------------------------ adversarial

def reward_from_prob(p, form: str = "advantage"):
    """Advantage ``2p - 1`` or clamped ``log p``."""
    p = np.asarray(p, dtype=np.float64)
    if form == "advantage":
        return 2.0 * p - 1.0
    return np.log(np.clip(p, 1e-7, 1.0 - 1e-7))


def _is_complete(seq, config: RolloutConfig) -> bool:
    return len(seq) >= config.max_len or (config.stop_at_eos and len(seq) > 0 and seq[-1] == EOS)


def rollout_values(model: Seq2SeqModel, scorer: Scorer, queries, references, sequences,
                   config: RolloutConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Action values ``Q[b][t-1]`` for each emitted token ``w_t`` of ``sequences[b]``.

    Intermediate steps average ``m1`` sampled completions of ``w_1..w_t``;
    the final step scores the finished sequence itself.  Completions for
    prefix length ``t`` use their own generator seeded by ``(base, t)`` so the
    result does not depend on ``threads``.
    """
    B = len(sequences)
    values = [np.zeros(len(s)) for s in sequences]
    lengths = [len(s) for s in sequences]
    base = int(rng.integers(2 ** 62))

    def prefix_job(t):
        rows = [b for b in range(B) if t < lengths[b]]
        if not rows:
            return t, rows, None
        sub_rng = np.random.default_rng([base, t])
        qs = [queries[b] for b in rows for _ in range(config.m1)]
        refs = [references[b] for b in rows for _ in range(config.m1)]
        pre = [tuple(sequences[b][:t]) for b in rows for _ in range(config.m1)]
        done = generate(model, qs, "sample", config.max_len, sub_rng, 1.0,
                        prefixes=pre, stop_at_eos=config.stop_at_eos)
        r = reward_from_prob(scorer(qs, refs, done), config.reward_form)
        return t, rows, r.reshape(len(rows), config.m1).mean(axis=1)

    steps = range(1, max(lengths, default=0))
    threads = max(1, config.threads)
    if threads > 1:
        def job(t):
            with nd.no_grad():
                return prefix_job(t)
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(job, steps))
    else:
        results = [prefix_job(t) for t in steps]
    for t, rows, r in results:
        for b, v in zip(rows, [] if r is None else r):
            values[b][t - 1] = v

    full = [b for b in range(B) if lengths[b] > 0]
    if full:
        r = reward_from_prob(scorer([queries[b] for b in full], [references[b] for b in full],
                                    [sequences[b] for b in full]), config.reward_form)
        for b, v in zip(full, r):
            values[b][lengths[b] - 1] = v
    return values


def action_value(model: Seq2SeqModel, scorer: Scorer, query, reference, prefix,
                 config: RolloutConfig, rng=None) -> float:
    """Value of the last token of ``prefix`` (tokens ``w_1..w_t``) for one query.

    A complete prefix (ends with EOS or reaches ``max_len``) is scored
    directly; otherwise the mean reward over ``m1`` sampled completions.
    """
    if config.m1 < 1:
        raise ContractError("m1 must be >= 1")
    prefix = tuple(int(t) for t in prefix)
    if not prefix:
        raise ContractError("action_value: prefix must contain the valued token")
    if _is_complete(prefix, config):
        p = scorer([query], [reference], [prefix])
        return float(reward_from_prob(p, config.reward_form)[0])
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    m = config.m1
    done = generate(model, [query] * m, "sample", config.max_len, rng, 1.0,
                    prefixes=[prefix] * m, stop_at_eos=config.stop_at_eos)
    p = scorer([query] * m, [reference] * m, done)
    return float(reward_from_prob(p, config.reward_form).mean())


def policy_gradient_loss(model: Seq2SeqModel, queries, sequences, values) -> nd.Tensor:
    """Surrogate whose gradient is ``-(1/B) sum_b sum_t Q_bt grad log p(w_t)``."""
    keep = [i for i, s in enumerate(sequences) if len(s)]
    logp, mask = sequence_log_probs(model, [queries[i] for i in keep],
                                    [sequences[i] for i in keep])
    weights = np.zeros(mask.shape)
    for row, i in enumerate(keep):
        weights[row, : len(values[i])] = values[i]
    return nd.sum_(logp * weights) * (-1.0 / len(sequences))


def pg_update_g1(model: Seq2SeqModel, scorer: Scorer, batch, config: RolloutConfig,
                 optimizer, rng: np.random.Generator, baseline: float = 0.0) -> float:
    """One policy-gradient step with the discriminator frozen.

    ``batch`` holds (query, reference) pairs or QRPairs.  Returns the mean
    terminal reward of the sampled responses, measured before the update.
    """
    queries = [getattr(p, "query", None) or p[0] for p in batch]
    refs = [getattr(p, "response", None) or p[1] for p in batch]
    seqs = generate(model, queries, "sample", config.max_len, rng, 1.0,
                    stop_at_eos=config.stop_at_eos)
    values = rollout_values(model, scorer, queries, refs, seqs, config, rng)
    terminal = float(np.mean([v[-1] for v in values if len(v)]))
    if baseline:
        values = [v - baseline for v in values]
    nd.clear_tape()
    loss = policy_gradient_loss(model, queries, seqs, values)
    nd.backward(loss)
    for p in model.parameters():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer.step()
    nd.clear_tape()
    return terminal


def env_threads() -> int:
    try:
        return max(1, int(os.environ.get("EG_THREADS", "1")))
    except ValueError:
        return 1

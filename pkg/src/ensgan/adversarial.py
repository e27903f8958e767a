"""The three-player minimax game: pretraining, candidate pools, G1/G2/D phases, serving."""

from __future__ import annotations

import json
import logging
import shutil
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ndtensor as nd
from .checkpoint import checkpoint_save, read_checkpoint
from .config import TrainConfig
from .corpus import CorpusBundle, QRPair, canonical
from .errors import ContractError, NoResponseError
from .ranker import (RANDOM, RETRIEVED, SYNTHETIC, MatchingModel, d_update, discriminator_scorer,
                     g2_sample, hinge_pretrain_step, pg_update_g2, rank_candidates)
from .retrieval import BY_QUERY, BY_RESPONSE, InvertedIndex, build_index, retrieve_top_k
from .seq2seq import RolloutConfig, Seq2SeqModel, env_threads, generate, pg_update_g1, pretrain_ce_step

logger = logging.getLogger(__name__)

PHASES = ("pretrain-gen", "rank-negatives", "pretrain-rank", "g1", "g2", "d", "serve")
_PROVENANCE_PRIORITY = {RETRIEVED: 0, SYNTHETIC: 1, RANDOM: 2}


def phase_rng(seed: int, phase: str, epoch: int = 0) -> np.random.Generator:
    """Independent stream per (seed, phase, epoch), so resumed runs draw the same numbers."""
    return np.random.default_rng(np.random.SeedSequence([seed, PHASES.index(phase), epoch]))


# ------------------------------------------------------------ data and pools

class ResponseBank:
    """Distinct canonical responses of the retrieval pool plus pair-id lookup."""

    def __init__(self, pool: Sequence[QRPair]):
        if not pool:
            raise ContractError("empty retrieval pool")
        self.n_pairs = len(pool)
        self.by_pair = {p.pair_id: canonical(p.response) for p in pool}
        self.responses: list[tuple[int, ...]] = []
        self.index: dict[tuple[int, ...], int] = {}
        for p in pool:
            r = canonical(p.response)
            if r not in self.index:
                self.index[r] = len(self.responses)
                self.responses.append(r)

    def __len__(self):
        return len(self.responses)

    def sample(self, n: int, rng, exclude: tuple[int, ...] | None = None) -> list[tuple[int, ...]]:
        """``n`` distinct responses drawn uniformly, never ``exclude``."""
        skip = self.index.get(canonical(exclude)) if exclude is not None else None
        allowed = len(self) - (skip is not None)
        idx = rng.choice(allowed, size=min(n, allowed), replace=False)
        if skip is not None:
            idx = np.where(idx >= skip, idx + 1, idx)
        return [self.responses[i] for i in idx]


@dataclass
class TrainingData:
    corpus: CorpusBundle
    bank: ResponseBank
    by_query: InvertedIndex
    by_response: InvertedIndex

    @classmethod
    def from_corpus(cls, corpus: CorpusBundle) -> "TrainingData":
        pool = corpus.retrieval
        return cls(corpus, ResponseBank(pool), build_index(pool, BY_QUERY),
                   build_index(pool, BY_RESPONSE))


def retrieved_responses(index: InvertedIndex, bank: ResponseBank, probe, n: int,
                        exclude_pairs=(), exclude_response=None) -> list[tuple[int, ...]]:
    """Top ``n`` distinct responses of the retrieved pairs, in rank order."""
    if n <= 0:
        return []
    skip = canonical(exclude_response) if exclude_response is not None else None
    hits = retrieve_top_k(index, probe, index.n_docs, exclude=exclude_pairs)
    out, seen = [], set()
    for pid in hits.pair_ids:
        r = bank.by_pair[pid]
        if r != skip and r not in seen:
            seen.add(r)
            out.append(r)
            if len(out) == n:
                break
    return out


@dataclass
class CandidatePool:
    query: tuple[int, ...]
    truth: tuple[int, ...]
    members: list[tuple[tuple[int, ...], str]]

    def __len__(self):
        return len(self.members)

    @property
    def responses(self) -> list[tuple[int, ...]]:
        return [m[0] for m in self.members]

    @property
    def provenances(self) -> list[str]:
        return [m[1] for m in self.members]

    def counts(self) -> Counter:
        return Counter(self.provenances)


def merge_legs(legs: dict[str, Sequence]) -> list[tuple[tuple[int, ...], str]]:
    """Union by token sequence; duplicates keep the higher-priority provenance."""
    chosen: dict[tuple[int, ...], str] = {}
    for prov in sorted(legs, key=_PROVENANCE_PRIORITY.__getitem__):
        for r in legs[prov]:
            chosen.setdefault(canonical(r), prov)
    ordered = sorted(chosen.items(), key=lambda kv: _PROVENANCE_PRIORITY[kv[1]])
    return [(r, p) for r, p in ordered]


def _assemble_pool(config: TrainConfig, data: TrainingData, query, truth, synthetic, rng,
                   truth_pair_id=None) -> CandidatePool:
    truth = canonical(truth)
    if data.bank.n_pairs < config.M_r:
        raise ContractError(f"retrieval pool has {data.bank.n_pairs} pairs, fewer than M_r={config.M_r}")
    exclude = () if truth_pair_id is None else (truth_pair_id,)
    legs = {
        RANDOM: data.bank.sample(config.M_r, rng, exclude=truth),
        RETRIEVED: retrieved_responses(data.by_response, data.bank, truth, config.M_p,
                                       exclude_pairs=exclude, exclude_response=truth),
        SYNTHETIC: [s for s in (canonical(x) for x in synthetic) if s != truth],
    }
    return CandidatePool(tuple(query), truth, merge_legs(legs))


def _synthesize(g1: Seq2SeqModel, queries, per_query: int, config: TrainConfig, rng):
    if per_query <= 0 or not len(queries):
        return [[] for _ in queries]
    flat = [q for q in queries for _ in range(per_query)]
    out = generate(g1, flat, "sample", config.max_len, rng, config.temperature)
    return [out[i * per_query:(i + 1) * per_query] for i in range(len(queries))]


def build_candidate_pool(config: TrainConfig, data: TrainingData, g1: Seq2SeqModel | None,
                         query, truth, rng, truth_pair_id=None) -> CandidatePool:
    """R_M(M_r, M_p, M_1): random, response-retrieved and G1-sampled candidates minus ``truth``."""
    if config.mode == "irgan" and config.M_1:
        raise ContractError("irgan mode builds pools without a synthetic leg")
    synthetic = _synthesize(g1, [query], config.M_1, config, rng)[0] if g1 is not None else []
    return _assemble_pool(config, data, query, truth, synthetic, rng, truth_pair_id)


def build_candidate_pools(config, data, g1, pairs: Sequence[QRPair], rng) -> list[CandidatePool]:
    """Batched variant: one G1 call synthesizes the M_1 leg of every pool."""
    synthetic = _synthesize(g1, [p.query for p in pairs], config.M_1, config, rng)
    return [_assemble_pool(config, data, p.query, p.response, s, rng)
            for p, s in zip(pairs, synthetic)]


@dataclass
class PoolAudit:
    pools: int = 0
    truth_violations: int = 0
    size_violations: int = 0
    provenance: Counter = field(default_factory=Counter)

    def record(self, pool: CandidatePool, config: TrainConfig, bank_size: int | None = None) -> None:
        self.pools += 1
        if pool.truth in pool.responses:
            self.truth_violations += 1
        upper = config.M_r + config.M_p + config.M_1
        lower = config.M_r if bank_size is None else min(config.M_r, bank_size - 1)
        if not lower <= len(pool) <= upper:
            self.size_violations += 1
        self.provenance.update(pool.provenances)

    def clean(self) -> bool:
        return self.truth_violations == 0 and self.size_violations == 0

    def to_dict(self) -> dict:
        return {"pools": self.pools, "truth_violations": self.truth_violations,
                "size_violations": self.size_violations, "provenance": dict(self.provenance)}

    @classmethod
    def from_dict(cls, d: dict) -> "PoolAudit":
        return cls(d["pools"], d["truth_violations"], d["size_violations"], Counter(d["provenance"]))


# ------------------------------------------------------------ state

HISTORY_KEYS = ("pretrain_gen", "pretrain_rank", "g1_reward", "g2_reward", "d_loss")
COUNTER_KEYS = ("g1_updates", "g2_updates", "d_updates")


@dataclass
class TrainState:
    config: TrainConfig
    g1: Seq2SeqModel
    g2: MatchingModel
    d: MatchingModel
    rank_triples: list = field(default_factory=list)
    epoch: int = 0
    history: dict = field(default_factory=lambda: {k: [] for k in HISTORY_KEYS})
    counters: dict = field(default_factory=lambda: {k: 0 for k in COUNTER_KEYS})
    audit: PoolAudit = field(default_factory=PoolAudit)
    baseline: float = 0.0
    optimizers: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.optimizers:
            c = self.config
            self.optimizers = {
                "G1": nd.Adam(self.g1.parameters(), c.lr_adv_gen, clip_norm=c.clip_norm),
                "G2": nd.Adam(self.g2.parameters(), c.lr_adv_rank, clip_norm=c.clip_norm),
                "D": nd.Adam(self.d.parameters(), c.lr_adv_rank, clip_norm=c.clip_norm),
            }

    def models(self) -> dict:
        return {"G1": self.g1, "G2": self.g2, "D": self.d}

    def rollout_config(self) -> RolloutConfig:
        c = self.config
        return RolloutConfig(m1=c.m1, max_len=c.max_len, seed=c.seed, reward_form=c.reward_form,
                             threads=env_threads())


def make_models(config: TrainConfig, vocab_size: int) -> tuple[Seq2SeqModel, MatchingModel]:
    g1 = Seq2SeqModel(vocab_size, config.gen_emb_dim, config.gen_hidden, config.gen_hidden,
                      config.att_dim, config.dropout, seed=config.seed)
    ranker = MatchingModel(vocab_size, config.rank_emb_dim, config.rank_hidden, config.mlp_dim,
                           config.dropout, seed=config.seed + 1)
    return g1, ranker


# ------------------------------------------------------------ pretraining

def _batch(rng, items: Sequence, size: int) -> list:
    idx = rng.choice(len(items), size=min(size, len(items)), replace=False)
    return [items[i] for i in idx]


def pretrain_generator(g1: Seq2SeqModel, pairs: Sequence[QRPair], config: TrainConfig,
                       steps: int | None = None) -> list[float]:
    rng = phase_rng(config.seed, "pretrain-gen")
    opt = nd.Adam(g1.parameters(), config.lr_pretrain_gen, clip_norm=config.clip_norm)
    steps = config.pretrain_gen_steps if steps is None else steps
    return [pretrain_ce_step(g1, _batch(rng, pairs, config.batch_size), opt, rng)
            for _ in range(steps)]


def build_rank_triples(config: TrainConfig, data: TrainingData, g1: Seq2SeqModel | None,
                       pairs: Sequence[QRPair]) -> list[tuple]:
    """(q, r, r_neg) with k_random random, k_retrieved query-retrieved and k_synthetic G1 negatives."""
    rng = phase_rng(config.seed, "rank-negatives")
    synth = (_synthesize(g1, [p.query for p in pairs], config.k_synthetic, config, rng)
             if g1 is not None else [[] for _ in pairs])
    triples = []
    for p, syn in zip(pairs, synth):
        r = canonical(p.response)
        negs = data.bank.sample(config.k_random, rng, exclude=r)
        negs += retrieved_responses(data.by_query, data.bank, p.query, config.k_retrieved,
                                    exclude_response=r)
        negs += [canonical(s) for s in syn if canonical(s) != r]
        triples += [(p.query, r, n) for n in negs]
    return triples


def pretrain_ranker(ranker: MatchingModel, triples: Sequence[tuple], config: TrainConfig,
                    steps: int | None = None) -> list[float]:
    rng = phase_rng(config.seed, "pretrain-rank")
    opt = nd.Adam(ranker.parameters(), config.lr_pretrain_rank, clip_norm=config.clip_norm)
    steps = config.pretrain_rank_steps if steps is None else steps
    per_batch = config.batch_size * (config.k_random + config.k_retrieved + config.k_synthetic)
    return [hinge_pretrain_step(ranker, _batch(rng, triples, per_batch), config.margin, opt, rng)
            for _ in range(steps)]


def pretrain(config: TrainConfig, data: TrainingData) -> TrainState:
    """Cross-entropy G1, hinge-loss ranker, then G2 and D as clones of the ranker."""
    g1, ranker = make_models(config, len(data.corpus.vocab))
    gen_losses = pretrain_generator(g1, data.corpus.generation, config)
    triples = build_rank_triples(config, data, g1, data.corpus.ranking)
    rank_losses = pretrain_ranker(ranker, triples, config)
    state = TrainState(config, g1, ranker.clone(), ranker.clone(), rank_triples=triples)
    state.history["pretrain_gen"] += gen_losses
    state.history["pretrain_rank"] += rank_losses
    return state


# ------------------------------------------------------------ adversarial phases

def run_g1_steps(state: TrainState, data: TrainingData, rng=None) -> TrainState:
    """Policy-gradient updates of G1 against the frozen discriminator."""
    c = state.config
    if c.mode == "irgan" and c.g1_steps:
        raise ContractError("irgan mode has no G1 steps")
    rng = rng if rng is not None else phase_rng(c.seed, "g1", state.epoch)
    scorer = discriminator_scorer(state.d)
    rcfg = state.rollout_config()
    for _ in range(c.g1_steps):
        batch = _batch(rng, data.corpus.generation, c.batch_size)
        base = state.baseline if c.reward_baseline else 0.0
        r = pg_update_g1(state.g1, scorer, batch, rcfg, state.optimizers["G1"], rng, baseline=base)
        if c.reward_baseline:
            state.baseline = c.baseline_decay * state.baseline + (1 - c.baseline_decay) * r
        state.history["g1_reward"].append(r)
        state.counters["g1_updates"] += 1
    return state


def run_g2_steps(state: TrainState, data: TrainingData, rng=None) -> TrainState:
    """REINFORCE updates of G2 over pools whose synthetic leg comes from the frozen G1."""
    c = state.config
    if c.mode == "rankgan" and c.g2_steps:
        raise ContractError("rankgan mode has no G2 steps")
    rng = rng if rng is not None else phase_rng(c.seed, "g2", state.epoch)
    for _ in range(c.g2_steps):
        pairs = _batch(rng, data.corpus.ranking, c.batch_size)
        pools = build_candidate_pools(c, data, state.g1, pairs, rng)
        for pool in pools:
            state.audit.record(pool, c, len(data.bank))
        batch = [(p.query, pool.truth, pool) for p, pool in zip(pairs, pools)]
        r = pg_update_g2(state.g2, state.d, batch, c.H, state.optimizers["G2"], rng, c.reward_form)
        state.history["g2_reward"].append(r)
        state.counters["g2_updates"] += 1
    return state


def adversarial_samples(state: TrainState, data: TrainingData, pairs: Sequence[QRPair], rng) -> list[tuple]:
    """(q, r, r') negatives for D: M_1 fresh G1 samples and H G2 draws per pair, per mode."""
    c = state.config
    out = []
    if c.mode in ("ensemblegan", "rankgan"):
        synth = _synthesize(state.g1, [p.query for p in pairs], max(c.M_1, 1), c, rng)
        for p, syn in zip(pairs, synth):
            r = canonical(p.response)
            out += [(p.query, r, canonical(s)) for s in syn if canonical(s) != r]
    if c.mode in ("ensemblegan", "irgan"):
        pools = build_candidate_pools(c, data, state.g1, pairs, rng)
        for p, pool in zip(pairs, pools):
            state.audit.record(pool, c, len(data.bank))
            out += [(p.query, pool.truth, rp.negative)
                    for rp in g2_sample(state.g2, p.query, pool.truth, pool, c.H, rng)]
    return out


def run_d_steps(state: TrainState, data: TrainingData, rng=None) -> TrainState:
    c = state.config
    rng = rng if rng is not None else phase_rng(c.seed, "d", state.epoch)
    by_query: dict = {}
    for t in state.rank_triples:
        by_query.setdefault(t[0], []).append(t)
    for _ in range(c.d_steps):
        pairs = _batch(rng, data.corpus.ranking, c.batch_size)
        positives = []
        for p in pairs:
            cands = by_query.get(p.query)
            if cands:
                positives.append(cands[rng.integers(len(cands))])
        adversarials = adversarial_samples(state, data, pairs, rng)
        if not positives or not adversarials:
            logger.warning("d step skipped: no positives or adversarials")
            continue
        loss = d_update(state.d, positives, adversarials, state.optimizers["D"], rng)
        state.history["d_loss"].append(loss)
        state.counters["d_updates"] += 1
    return state


def run_epoch(state: TrainState, data: TrainingData) -> TrainState:
    run_g1_steps(state, data)
    run_g2_steps(state, data)
    run_d_steps(state, data)
    state.epoch += 1
    return state


# ------------------------------------------------------------ persistence

def _opt_blocks(opt: nd.Adam, model) -> dict:
    names = list(model.params)
    out = {f"m.{n}": m for n, m in zip(names, opt.m)}
    out.update({f"v.{n}": v for n, v in zip(names, opt.v)})
    return out


def save_state(state: TrainState, directory) -> None:
    """Write ``epoch_<n>`` atomically: stage in a temp dir, then rename."""
    directory = Path(directory)
    final = directory / f"epoch_{state.epoch}"
    tmp = directory / f".epoch_{state.epoch}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    cfg = json.loads(json.dumps(state.config.__dict__))
    for role, model in state.models().items():
        opt = state.optimizers[role]
        checkpoint_save(model, role, tmp / f"{role}.ckpt", config=cfg,
                        meta={"epoch": state.epoch, "opt_steps": opt.step_count},
                        extra=_opt_blocks(opt, model))
    meta = {"epoch": state.epoch, "history": state.history, "counters": state.counters,
            "audit": state.audit.to_dict(), "baseline": state.baseline}
    (tmp / "state.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    _write_triples(tmp / "rank_triples.txt", state.rank_triples)
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def _write_triples(path: Path, triples) -> None:
    path.write_text("".join("\t".join(" ".join(map(str, s)) for s in t) + "\n" for t in triples))


def _read_triples(path: Path) -> list[tuple]:
    out = []
    for line in path.read_text().splitlines():
        out.append(tuple(tuple(int(x) for x in part.split()) for part in line.split("\t")))
    return out


def latest_epoch(directory) -> int | None:
    eps = [int(p.name.split("_")[1]) for p in Path(directory).glob("epoch_*") if p.is_dir()]
    return max(eps) if eps else None


def load_state(directory, config: TrainConfig, epoch: int | None = None) -> TrainState:
    directory = Path(directory)
    epoch = latest_epoch(directory) if epoch is None else epoch
    if epoch is None:
        raise FileNotFoundError(f"no epoch checkpoints under {directory}")
    d = directory / f"epoch_{epoch}"
    ck = {role: read_checkpoint(d / f"{role}.ckpt", role) for role in ("G1", "G2", "D")}
    models = {role: c.build_model() for role, c in ck.items()}
    meta = json.loads((d / "state.json").read_text())
    state = TrainState(config, models["G1"], models["G2"], models["D"],
                       rank_triples=_read_triples(d / "rank_triples.txt"), epoch=meta["epoch"],
                       history=meta["history"], counters=meta["counters"],
                       audit=PoolAudit.from_dict(meta["audit"]), baseline=meta["baseline"])
    for role, c in ck.items():
        opt = state.optimizers[role]
        names = list(models[role].params)
        opt.load_state_dict({"step_count": c.meta["opt_steps"],
                             "m": [c.extra[f"m.{n}"] for n in names],
                             "v": [c.extra[f"v.{n}"] for n in names]})
    return state


def run_minimax(config: TrainConfig, corpus: CorpusBundle, out_dir=None, resume: bool = False,
                data: TrainingData | None = None, pretrained: TrainState | None = None) -> TrainState:
    """Pretrain (or resume), then alternate G1, G2 and D phases for ``config.epochs`` epochs.

    With ``out_dir`` every epoch boundary is checkpointed; ``pretrained``
    lets several modes share one pretraining run.
    """
    data = data or TrainingData.from_corpus(corpus)
    if resume and out_dir is not None and latest_epoch(out_dir) is not None:
        state = load_state(out_dir, config)
    elif pretrained is not None:
        state = clone_state(pretrained, config)
    else:
        state = pretrain(config, data)
    if out_dir is not None and latest_epoch(out_dir) != state.epoch:
        save_state(state, out_dir)
    while state.epoch < config.epochs:
        run_epoch(state, data)
        logger.info("epoch %d: g1 %s g2 %s d %s", state.epoch, state.history["g1_reward"][-1:],
                    state.history["g2_reward"][-1:], state.history["d_loss"][-1:])
        if out_dir is not None:
            save_state(state, out_dir)
    return state


def clone_state(state: TrainState, config: TrainConfig | None = None) -> TrainState:
    """Fresh adversarial state from copies of ``state``'s models (optimizers reset)."""
    new = TrainState(config or state.config, state.g1.clone(), state.g2.clone(), state.d.clone(),
                     rank_triples=list(state.rank_triples), epoch=state.epoch)
    for k in ("pretrain_gen", "pretrain_rank"):
        new.history[k] = list(state.history[k])
    return new


# ------------------------------------------------------------ serving

@dataclass
class EnsembleResponse:
    response: tuple[int, ...]
    provenance: str
    candidates: list[tuple[tuple[int, ...], str, float]]


def ensemble_respond(state_or_models, query, index: InvertedIndex, bank: ResponseBank,
                     ranker: str = "D", k: int = 5, n: int = 2, seed: int = 0,
                     max_len: int = 12) -> EnsembleResponse:
    """Rerank ``k`` query-retrieved and ``n`` generated responses (greedy first, then sampled)."""
    if isinstance(state_or_models, TrainState):
        g1 = state_or_models.g1
        model = {"D": state_or_models.d, "G2": state_or_models.g2}[ranker]
    else:
        g1, model = state_or_models
    legs = {RETRIEVED: retrieved_responses(index, bank, query, k) if k > 0 else [], SYNTHETIC: []}
    if n > 0:
        gen = generate(g1, [query], "greedy", max_len)
        if n > 1:
            rng = np.random.default_rng(seed)
            gen += generate(g1, [query] * (n - 1), "sample", max_len, rng)
        legs[SYNTHETIC] = gen
    members = merge_legs(legs)
    if not members:
        raise NoResponseError("no candidate response: retrieval found nothing and generation is off")
    ranked = rank_candidates(model, query, [m[0] for m in members])
    cands = [(members[i][0], members[i][1], s) for i, s in ranked]
    return EnsembleResponse(cands[0][0], cands[0][1], cands)

"""Desk-scale experiments: held-out evaluation and the cross-mode directional comparison."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .adversarial import (TrainingData, TrainState, ensemble_respond, phase_rng, pretrain,
                          retrieved_responses, run_minimax)
from .config import MODES, TrainConfig
from .corpus import CorpusBundle, canonical, generate_synthetic_corpus
from .metrics import (EmbeddingTable, MetricsReport, evaluate_responses, module_ranking_loss, p_at_1)
from .ranker import RETRIEVED, pair_probs
from .seq2seq import generate

logger = logging.getLogger(__name__)

EVAL_RANDOM_DISTRACTORS = 3
EVAL_RETRIEVED_DISTRACTORS = 2


def corpus_for(config: TrainConfig) -> CorpusBundle:
    return generate_synthetic_corpus(config.seed, n_pairs=config.n_pairs, n_topics=config.n_topics,
                                     paraphrases_per_topic=config.paraphrases,
                                     fillers_per_topic=config.fillers, vocab_size=config.vocab_size)


def p_at_1_items(data: TrainingData, pairs, seed: int = 0) -> list[tuple]:
    """(q, truth, distractors): 3 random plus 2 response-retrieved distractors per pair."""
    rng = np.random.default_rng([seed, 7919])
    items = []
    for p in pairs:
        r = canonical(p.response)
        d = retrieved_responses(data.by_response, data.bank, r, EVAL_RETRIEVED_DISTRACTORS,
                                exclude_response=r)
        extra = [x for x in data.bank.sample(EVAL_RANDOM_DISTRACTORS + len(d), rng, exclude=r)
                 if x not in d]
        items.append((p.query, r, d + extra[:EVAL_RANDOM_DISTRACTORS]))
    return items


def mean_generator_reward(g1, d, pairs, samples: int = 4, seed: int = 0, max_len: int = 12) -> float:
    """Mean ``2 D(o') - 1`` of sampled G1 responses under discriminator ``d``."""
    rng = np.random.default_rng([seed, 104729])
    qs = [p.query for p in pairs for _ in range(samples)]
    refs = [canonical(p.response) for p in pairs for _ in range(samples)]
    gen = [canonical(g) for g in generate(g1, qs, "sample", max_len, rng)]
    return float(np.mean(2.0 * pair_probs(d, qs, gen, refs) - 1.0))


@dataclass
class ServingRun:
    responses: list
    provenances: list
    log: list


def serve(g1, ranker, data: TrainingData, pairs, k: int, n: int, seed: int = 0,
          max_len: int = 12) -> ServingRun:
    responses, provs, log = [], [], []
    for i, p in enumerate(pairs):
        out = ensemble_respond((g1, ranker), p.query, data.by_query, data.bank, k=k, n=n,
                               seed=seed + i, max_len=max_len)
        responses.append(out.response)
        provs.append(out.provenance)
        log.append((p.query, canonical(p.response), out.response, out.provenance))
    return ServingRun(responses, provs, log)


def greedy_responses(g1, pairs, max_len: int = 12) -> list:
    return [canonical(g) for g in generate(g1, [p.query for p in pairs], "greedy", max_len)]


def evaluate_state(state: TrainState, data: TrainingData, pairs, report: MetricsReport,
                   system: str, k: int = 5, n: int = 2, table: EmbeddingTable | None = None,
                   seed: int = 0) -> ServingRun:
    """Ensemble metrics, D's P@1 and the module-wise ranking loss for one trained state."""
    c = state.config
    table = table or EmbeddingTable.random(len(data.corpus.vocab), seed=seed)
    refs = [canonical(p.response) for p in pairs]
    run = serve(state.g1, state.d, data, pairs, k, n, seed, c.max_len)
    evaluate_responses(report, system, run.responses, refs, table)
    report.add(system, "P@1", p_at_1(state.d, p_at_1_items(data, pairs, seed)))
    loss = module_ranking_loss(state.d, run.log, c.margin)
    report.add(system, "rank_loss.generation", loss.generation)
    report.add(system, "rank_loss.retrieval", loss.retrieval)
    report.add(system, "rank_loss.overall", loss.overall)
    for leg, v in loss.ratios.items():
        report.add(system, f"contribution.{leg}", v)
    return run


@dataclass
class DirectionalResult:
    seed: int
    p1_pretrained: float
    p1_adversarial: float
    reward_pretrained_g1: float
    reward_adversarial_g1: float
    bleu1_g1: float
    bleu1_retrieval: float
    bleu1_ensemble: float
    rank_loss: dict = field(default_factory=dict)
    seconds: float = 0.0
    report: MetricsReport = field(default_factory=MetricsReport)


def run_directional(config: TrainConfig, k: int = 5, n: int = 2, eval_pairs: int | None = None,
                    modes=MODES, pretrained: TrainState | None = None) -> DirectionalResult:
    """One seed of the mode comparison; the three modes share one pretraining run."""
    from .metrics import bleu_n

    t0 = time.time()
    corpus = corpus_for(config)
    data = TrainingData.from_corpus(corpus)
    test = list(corpus.test[:eval_pairs] if eval_pairs else corpus.test)
    refs = [canonical(p.response) for p in test]
    base = pretrained if pretrained is not None else pretrain(config, data)
    items = p_at_1_items(data, test, config.seed)
    report = MetricsReport()
    p1_pre = p_at_1(base.d, items)
    report.add("pretrained", "P@1", p1_pre)
    states = {}
    for mode in modes:
        states[mode] = run_minimax(config.with_mode(mode), corpus, data=data, pretrained=base)
        logger.info("seed %d mode %s trained (%.1fs)", config.seed, mode, time.time() - t0)
    ens = states["ensemblegan"]
    rank_loss = {}
    for mode, st in states.items():
        evaluate_state(st, data, test, report, mode, k, n, seed=config.seed)
        rank_loss[mode] = report.get(mode, "rank_loss.overall")
    reward_pre = mean_generator_reward(base.g1, ens.d, test, seed=config.seed, max_len=config.max_len)
    reward_adv = mean_generator_reward(ens.g1, ens.d, test, seed=config.seed, max_len=config.max_len)
    report.add("ensemblegan", "g1_reward", reward_adv)
    report.add("pretrained", "g1_reward_under_final_d", reward_pre)
    g1_only = greedy_responses(ens.g1, test, config.max_len)
    retrieval_only = serve(ens.g1, ens.d, data, test, k, 0, config.seed, config.max_len).responses
    ensemble = serve(ens.g1, ens.d, data, test, k, n, config.seed, config.max_len).responses
    return DirectionalResult(
        seed=config.seed, p1_pretrained=p1_pre, p1_adversarial=report.get("ensemblegan", "P@1"),
        reward_pretrained_g1=reward_pre, reward_adversarial_g1=reward_adv,
        bleu1_g1=bleu_n(g1_only, refs, 1), bleu1_retrieval=bleu_n(retrieval_only, refs, 1),
        bleu1_ensemble=bleu_n(ensemble, refs, 1), rank_loss=rank_loss,
        seconds=time.time() - t0, report=report)


def median_directional(results: list[DirectionalResult]) -> dict:
    """Median over seeds of every quantity the directional checks use."""
    med = lambda xs: float(np.median(xs))  # noqa: E731
    out = {name: med([getattr(r, name) for r in results])
           for name in ("p1_pretrained", "p1_adversarial", "reward_pretrained_g1",
                        "reward_adversarial_g1", "bleu1_g1", "bleu1_retrieval", "bleu1_ensemble")}
    for mode in results[0].rank_loss:
        out[f"rank_loss.{mode}"] = med([r.rank_loss[mode] for r in results])
    return out


__all__ = ["corpus_for", "p_at_1_items", "mean_generator_reward", "serve", "evaluate_state",
           "run_directional", "median_directional", "DirectionalResult", "phase_rng", "RETRIEVED"]

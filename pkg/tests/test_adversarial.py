import numpy as np
import pytest

from ensgan import ndtensor as nd
from ensgan.adversarial import (CandidatePool, PoolAudit, ResponseBank, TrainingData, TrainState,
                                adversarial_samples, build_candidate_pool, build_rank_triples,
                                clone_state, ensemble_respond, latest_epoch, load_state, merge_legs,
                                phase_rng, pretrain, retrieved_responses, run_d_steps, run_g1_steps,
                                run_g2_steps, run_minimax, save_state)
from ensgan.config import TrainConfig
from ensgan.corpus import EOS, QRPair, canonical, generate_synthetic_corpus
from ensgan.errors import ConfigError, ContractError, NoResponseError
from ensgan.ranker import RANDOM, RETRIEVED, SYNTHETIC, pair_probs, score, scores
from ensgan.retrieval import BY_QUERY, build_index
from ensgan.seq2seq import generate

TINY = dict(epochs=1, m1=2, H=2, M_r=6, M_p=2, M_1=2, batch_size=4, pretrain_gen_steps=5,
            pretrain_rank_steps=5, gen_emb_dim=8, gen_hidden=8, att_dim=8, rank_emb_dim=8,
            rank_hidden=8, mlp_dim=8, max_len=6, n_pairs=400, seed=3)


def tiny(**kw):
    return TrainConfig.create(kw, base=TINY)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(3, n_pairs=400)


@pytest.fixture(scope="module")
def data(corpus):
    return TrainingData.from_corpus(corpus)


@pytest.fixture(scope="module")
def base(data):
    return pretrain(tiny(), data)


def params_of(model):
    return {k: p.data.copy() for k, p in model.params.items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- rng streams

def test_phase_streams_are_independent_and_reproducible():
    a = phase_rng(1, "g1", 2).random(4)
    assert np.array_equal(a, phase_rng(1, "g1", 2).random(4))
    assert not np.array_equal(a, phase_rng(1, "g2", 2).random(4))
    assert not np.array_equal(a, phase_rng(1, "g1", 3).random(4))
    assert not np.array_equal(a, phase_rng(2, "g1", 2).random(4))


# -- candidate pools

def test_bank_sampling_excludes_and_is_distinct(data):
    r = data.bank.responses[5]
    draws = data.bank.sample(len(data.bank), np.random.default_rng(0), exclude=r)
    assert len(draws) == len(data.bank) - 1 == len(set(draws)) and r not in draws


def test_merge_priority():
    a, b, c = (4, EOS), (5, EOS), (6, EOS)
    merged = merge_legs({RANDOM: [a, b], SYNTHETIC: [b, c], RETRIEVED: [c]})
    assert dict(merged) == {c: RETRIEVED, b: SYNTHETIC, a: RANDOM}


def test_random_leg_only(data, base):
    p = data.corpus.ranking[0]
    pool = build_candidate_pool(tiny(M_r=2, M_p=0, M_1=0, H=1), data, base.g1, p.query, p.response,
                                np.random.default_rng(0))
    assert 1 <= len(pool) <= 2 and set(pool.provenances) == {RANDOM}


def test_truth_never_in_pool_even_when_retrieval_ranks_it_first(data, base):
    cfg = tiny(M_r=10, M_p=5, M_1=3)
    rng = np.random.default_rng(1)
    for p in data.corpus.retrieval[:30]:
        # probing with r finds p itself (and equal responses) first
        top = retrieved_responses(data.by_response, data.bank, p.response, 1)
        assert top == [canonical(p.response)]
        pool = build_candidate_pool(cfg, data, base.g1, p.query, p.response, rng, p.pair_id)
        assert canonical(p.response) not in pool.responses


def test_full_sized_pool_bounds():
    big = TrainingData.from_corpus(generate_synthetic_corpus(3, n_pairs=2000))
    cfg = tiny(M_r=100, M_p=10, M_1=10)
    from ensgan.seq2seq import Seq2SeqModel
    g1 = Seq2SeqModel(len(big.corpus.vocab), 8, 8, 8, 8, seed=0)
    rng = np.random.default_rng(0)
    audit = PoolAudit()
    for p in big.corpus.ranking[:20]:
        pool = build_candidate_pool(cfg, big, g1, p.query, p.response, rng)
        assert 100 <= len(pool) <= 120
        assert pool.counts()[RANDOM] <= 100 and pool.counts()[RETRIEVED] == 10
        audit.record(pool, cfg, len(big.bank))
    assert audit.clean() and audit.pools == 20


def test_pool_larger_than_retrieval_pool_is_an_error(data, base):
    p = data.corpus.ranking[0]
    with pytest.raises(ContractError):
        build_candidate_pool(tiny(M_r=10_000), data, base.g1, p.query, p.response, np.random.default_rng(0))


def test_audit_flags_violations():
    cfg = tiny(M_r=2, M_p=0, M_1=0, H=1)
    audit = PoolAudit()
    audit.record(CandidatePool((4, EOS), (5, EOS), [((5, EOS), RANDOM)]), cfg)
    audit.record(CandidatePool((4, EOS), (5, EOS), [((6, EOS), RANDOM)] * 3), cfg)
    assert audit.truth_violations == 1 and audit.size_violations == 2 and not audit.clean()
    assert PoolAudit.from_dict(audit.to_dict()) == audit


def test_rank_triples_composition(data, base):
    cfg = tiny()
    pairs = data.corpus.ranking[:10]
    triples = build_rank_triples(cfg, data, base.g1, pairs)
    per = cfg.k_random + cfg.k_retrieved + cfg.k_synthetic
    assert len(pairs) * (per - 1) <= len(triples) <= len(pairs) * per
    assert all(t[1] != t[2] for t in triples)
    assert triples == build_rank_triples(cfg, data, base.g1, pairs)


# -- mode gates

def test_mode_gates_in_config():
    with pytest.raises(ConfigError):
        TrainConfig(mode="rankgan", g2_steps=1)
    with pytest.raises(ConfigError):
        TrainConfig(mode="irgan", g1_steps=0, M_1=3)
    assert tiny(mode="rankgan").g2_steps == 0
    assert (tiny(mode="irgan").g1_steps, tiny(mode="irgan").M_1) == (0, 0)


# -- phases

def test_zero_g1_steps_leave_state_unchanged(data, base):
    st = clone_state(base, tiny(g1_steps=0))
    before = params_of(st.g1)
    run_g1_steps(st, data)
    assert same_params(before, params_of(st.g1)) and st.history["g1_reward"] == []


def test_indifferent_discriminator_freezes_g1(data, base):
    st = clone_state(base, tiny(g1_steps=3))
    st.d.zero_()
    before = params_of(st.g1)
    run_g1_steps(st, data)
    assert same_params(before, params_of(st.g1))
    assert st.history["g1_reward"] == [0.0, 0.0, 0.0] and st.counters["g1_updates"] == 3


def test_g2_phase_bookkeeping_and_audit(data, base):
    st = clone_state(base, tiny(g2_steps=3))
    run_g2_steps(st, data)
    assert len(st.history["g2_reward"]) == 3 and st.counters["g2_updates"] == 3
    assert st.audit.pools == 3 * st.config.batch_size and st.audit.clean()


def test_rankgan_g2_phase_is_refused(data, base):
    st = clone_state(base, tiny(mode="rankgan"))
    object.__setattr__(st.config, "g2_steps", 1)  # bypass validation to reach the phase guard
    with pytest.raises(ContractError):
        run_g2_steps(st, data)


def test_d_phase_bookkeeping(data, base):
    st = clone_state(base, tiny(d_steps=0))
    before = params_of(st.d)
    run_d_steps(st, data)
    assert same_params(before, params_of(st.d))
    st = clone_state(base, tiny(d_steps=3))
    run_d_steps(st, data)
    assert len(st.history["d_loss"]) == 3 and st.counters["d_updates"] == 3


def test_irgan_adversarials_carry_no_synthetic(data, base):
    st = clone_state(base, tiny(mode="irgan"))
    samples = adversarial_samples(st, data, data.corpus.ranking[:6], np.random.default_rng(0))
    assert len(samples) == 6 * st.config.H
    assert st.audit.provenance[SYNTHETIC] == 0 and st.audit.pools == 6


def test_d_learns_to_reject_a_fixed_bad_response(data, base):
    cfg = tiny(mode="rankgan", d_steps=1, M_1=1, batch_size=8, lr_adv_rank=0.003)
    st = clone_state(base, cfg)
    bad_tok = 5
    st.g1.params["out.W"].data[...] = 0.0
    st.g1.params["out.b"].data[...] = -50.0
    st.g1.params["out.b"].data[bad_tok] = 50.0  # G1 always emits bad_tok until max_len
    bad = (bad_tok,) * cfg.max_len + (EOS,)
    assert canonical(generate(st.g1, [(4, EOS)], "sample", cfg.max_len, np.random.default_rng(0))[0]) == bad
    probe = data.corpus.ranking[:20]
    qs, refs = [p.query for p in probe], [canonical(p.response) for p in probe]
    curve = []
    for epoch in range(50):
        curve.append(pair_probs(st.d, qs, [bad] * len(qs), refs).mean())
        st.epoch = epoch
        run_d_steps(st, data)
    curve.append(pair_probs(st.d, qs, [bad] * len(qs), refs).mean())
    assert curve[-1] < 0.1 * curve[0]
    assert (np.diff(curve) < 0).all(), curve


# -- full loop

def test_zero_epochs_keep_g2_and_d_identical(corpus, data):
    st = run_minimax(tiny(epochs=0), corpus, data=data)
    qs = [p.query for p in corpus.test[:10]]
    rs = [p.response for p in corpus.test[:10]]
    assert np.array_equal(scores(st.g2, qs, rs), scores(st.d, qs, rs))


def test_rankgan_never_moves_g2(corpus, data, base):
    st = run_minimax(tiny(mode="rankgan", epochs=2), corpus, data=data, pretrained=base)
    assert same_params(params_of(base.g2), params_of(st.g2)) and st.counters["g2_updates"] == 0


def test_irgan_never_moves_g1(corpus, data, base):
    st = run_minimax(tiny(mode="irgan", epochs=2), corpus, data=data, pretrained=base)
    assert same_params(params_of(base.g1), params_of(st.g1)) and st.counters["g1_updates"] == 0
    assert st.counters["g2_updates"] == 2 and st.audit.provenance[SYNTHETIC] == 0 and st.audit.clean()


def test_runs_are_bitwise_reproducible(tmp_path, corpus, data):
    for d in ("a", "b"):
        run_minimax(tiny(epochs=2), corpus, tmp_path / d, data=data)
    for role in ("G1", "G2", "D"):
        assert (tmp_path / "a/epoch_2" / f"{role}.ckpt").read_bytes() == \
               (tmp_path / "b/epoch_2" / f"{role}.ckpt").read_bytes()
    assert latest_epoch(tmp_path / "a") == 2 and (tmp_path / "a/epoch_0").is_dir()


def test_resume_equals_uninterrupted(tmp_path, corpus, data):
    straight = run_minimax(tiny(epochs=2), corpus, tmp_path / "s", data=data)
    run_minimax(tiny(epochs=1), corpus, tmp_path / "r", data=data)
    resumed = run_minimax(tiny(epochs=2), corpus, tmp_path / "r", resume=True, data=data)
    for role in ("G1", "G2", "D"):
        assert same_params(params_of(straight.models()[role]), params_of(resumed.models()[role]))
        a, b = straight.optimizers[role], resumed.optimizers[role]
        assert a.step_count == b.step_count
        assert all(np.array_equal(x, y) for x, y in zip(a.m + a.v, b.m + b.v))
    assert straight.history == resumed.history and straight.counters == resumed.counters


def test_state_round_trip(tmp_path, base):
    save_state(base, tmp_path)
    back = load_state(tmp_path, base.config)
    for role in ("G1", "G2", "D"):
        assert same_params(params_of(base.models()[role]), params_of(back.models()[role]))
    assert back.rank_triples == base.rank_triples and back.history == base.history
    assert not list(tmp_path.glob(".epoch_*"))


def test_load_without_checkpoints(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_state(tmp_path, tiny())


# -- serving

def test_serving_legs(data, base):
    q = data.corpus.test[0].query
    gen_only = ensemble_respond(base, q, data.by_query, data.bank, k=0, n=1)
    assert gen_only.provenance == SYNTHETIC and len(gen_only.candidates) == 1
    ret_only = ensemble_respond(base, q, data.by_query, data.bank, k=1, n=0)
    assert ret_only.provenance == RETRIEVED and len(ret_only.candidates) == 1
    both = ensemble_respond(base, q, data.by_query, data.bank, ranker="G2", k=5, n=3)
    s = [c[2] for c in both.candidates]
    assert s == sorted(s, reverse=True) and both.response == both.candidates[0][0]


def test_duplicate_across_legs_scored_once_as_retrieved(base):
    q = (7, 8, EOS)
    greedy = canonical(generate(base.g1, [q], "greedy", base.config.max_len)[0])
    pool = [QRPair(q, greedy, 0)]
    out = ensemble_respond(base, q, build_index(pool, BY_QUERY), ResponseBank(pool), k=1, n=1)
    assert out.candidates == [(greedy, RETRIEVED, pytest.approx(score(base.d, q, greedy)))]


def test_no_candidates_is_an_explicit_error(data, base):
    with pytest.raises(NoResponseError):
        ensemble_respond(base, (3, 3, EOS), data.by_query, data.bank, k=5, n=0)

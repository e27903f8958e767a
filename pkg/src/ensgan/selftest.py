"""Fast invariant checks run by ``ensgan selftest``."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import ndtensor as nd
from .adversarial import TrainingData, build_candidate_pool
from .checkpoint import checkpoint_load, checkpoint_save
from .config import TrainConfig
from .corpus import generate_synthetic_corpus
from .metrics import bleu_n
from .ranker import MatchingModel, pair_prob
from .retrieval import BY_QUERY, build_index, retrieve_top_k
from .seq2seq import Seq2SeqModel, ce_loss


def _softmax_rows():
    z = nd.Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 5)
    p = nd.softmax(z).data
    return bool((p >= 0).all() and np.abs(p.sum(axis=1) - 1).max() < 1e-12)


def _seq2seq_gradient():
    m = Seq2SeqModel(12, 6, 5, 5, 4, dropout=0.0, seed=1)
    q, r = (4, 5, 2), (6, 7, 2)
    err = nd.finite_diff_check(lambda: ce_loss(m, [q], [r]), m.parameters(), max_coords=5)
    return err < 1e-4


def _antisymmetry():
    m = MatchingModel(12, 6, 5, 5, seed=2)
    rng = np.random.default_rng(3)
    for _ in range(20):
        q, a, b = (tuple(rng.integers(4, 12, size=3)) + (2,) for _ in range(3))
        if abs(pair_prob(m, q, a, b) + pair_prob(m, q, b, a) - 1) > 1e-12:
            return False
    return True


def _bleu_identity():
    x = [(4, 5, 6, 7, 2), (8, 9, 2)]
    return all(abs(bleu_n(x, x, n) - 1.0) < 1e-12 for n in range(1, 5))


def _checkpoint_roundtrip():
    m = MatchingModel(10, 4, 3, 3, seed=4)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "D.ckpt"
        checkpoint_save(m, "D", path)
        back = checkpoint_load(path, "D")
    return all(np.array_equal(m.params[k].data, back.params[k].data) for k in m.params)


def _self_retrieval():
    bundle = generate_synthetic_corpus(5, n_pairs=60)
    idx = build_index(bundle.retrieval, BY_QUERY)
    for p in bundle.retrieval[:10]:
        top = retrieve_top_k(idx, p.query, 1).hits[0]
        if abs(top[1] - 1.0) > 1e-9:
            return False
    return True


def _pool_excludes_truth():
    bundle = generate_synthetic_corpus(6, n_pairs=200)
    data = TrainingData.from_corpus(bundle)
    cfg = TrainConfig(M_r=5, M_p=3, M_1=2, H=2)
    g1 = Seq2SeqModel(len(bundle.vocab), 8, 8, 8, 8, seed=0)
    rng = np.random.default_rng(0)
    for p in bundle.ranking[:5]:
        pool = build_candidate_pool(cfg, data, g1, p.query, p.response, rng)
        if p.response in pool.responses or not 5 <= len(pool) <= 10:
            return False
    return True


CHECKS = [
    ("softmax rows normalise", _softmax_rows),
    ("seq2seq gradient matches finite differences", _seq2seq_gradient),
    ("pair probability antisymmetry", _antisymmetry),
    ("BLEU of identical corpora is 1", _bleu_identity),
    ("checkpoint round trip is exact", _checkpoint_roundtrip),
    ("documents retrieve themselves first", _self_retrieval),
    ("candidate pools exclude the ground truth", _pool_excludes_truth),
]


def run_selftest(out=print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            passed = bool(fn())
        except Exception as exc:  # a crash is a failure, reported with its cause
            passed = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        out(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return ok

"""Command-line entry point.

Exit status: 0 on success, 1 on a usage error, 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adversarial import (TrainingData, build_rank_triples, latest_epoch, load_state, make_models,
                          pretrain_generator, pretrain_ranker, run_minimax, ensemble_respond)
from .checkpoint import checkpoint_load, checkpoint_save
from .config import MODES, TrainConfig, config_parse
from .corpus import CorpusBundle, decode, encode, MAX_QUERY_LEN
from .errors import CheckpointError, ConfigError, ContractError, NoResponseError
from .experiments import corpus_for, evaluate_state
from .metrics import MetricsReport
from .retrieval import BY_QUERY, BY_RESPONSE, build_index
from .selftest import run_selftest

logger = logging.getLogger("ensgan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(args) -> TrainConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    if getattr(args, "config", None):
        return config_parse(args.config, overrides)
    return TrainConfig.create(overrides)


def _corpus(args, config: TrainConfig) -> CorpusBundle:
    return CorpusBundle.load(args.corpus) if args.corpus else corpus_for(config)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_corpus(args):
    config = _load_config(args)
    corpus_for(config).save(_out(args))
    print(f"corpus written to {args.out}")


def cmd_build_index(args):
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = _out(args)
    for mode, name in ((BY_QUERY, "by_query.idx"), (BY_RESPONSE, "by_response.idx")):
        build_index(corpus.retrieval, mode).save(out / name)
    print(f"indices written to {out}")


def cmd_pretrain_gen(args):
    config = _load_config(args)
    corpus = _corpus(args, config)
    g1, _ = make_models(config, len(corpus.vocab))
    losses = pretrain_generator(g1, corpus.generation, config)
    out = _out(args)
    checkpoint_save(g1, "G1", out / "G1.ckpt", config=vars_of(config))
    print(f"G1 pretrained: {len(losses)} steps, final loss {losses[-1]:.4f}" if losses else "G1 saved")


def cmd_pretrain_ranker(args):
    config = _load_config(args)
    corpus = _corpus(args, config)
    data = TrainingData.from_corpus(corpus)
    g1 = checkpoint_load(args.generator, "G1") if args.generator else None
    triples = build_rank_triples(config, data, g1, corpus.ranking)
    _, ranker = make_models(config, len(corpus.vocab))
    losses = pretrain_ranker(ranker, triples, config)
    checkpoint_save(ranker, "D", _out(args) / "ranker.ckpt", config=vars_of(config))
    print(f"ranker pretrained on {len(triples)} triples, final hinge {losses[-1]:.4f}"
          if losses else "ranker saved")


def cmd_advtrain(args):
    config = _load_config(args)
    corpus = _corpus(args, config)
    out = _out(args)
    (out / "config.txt").write_text(config.to_text())
    data = TrainingData.from_corpus(corpus)
    state = run_minimax(config, corpus, out_dir=out, resume=args.resume, data=data)
    report = MetricsReport()
    evaluate_state(state, data, corpus.test, report, config.mode, seed=config.seed)
    (out / "metrics.txt").write_text(report.to_text())
    print(f"trained {state.epoch} epoch(s) in {config.mode} mode; counters {state.counters}")
    print(report.to_text(), end="")


def _run_state(args):
    run = Path(args.run)
    if latest_epoch(run) is None:
        raise FileNotFoundError(f"{run}: no trained checkpoints")
    config = config_parse(run / "config.txt") if (run / "config.txt").exists() else _load_config(args)
    corpus = _corpus(args, config)
    return config, corpus, load_state(run, config)


def cmd_respond(args):
    config, corpus, state = _run_state(args)
    data = TrainingData.from_corpus(corpus)
    query = encode(args.query, corpus.vocab, MAX_QUERY_LEN)
    out = ensemble_respond(state, query, data.by_query, data.bank, ranker=args.ranker,
                           k=args.k, n=args.n, seed=config.seed, max_len=config.max_len)
    print(f"response: {decode(out.response, corpus.vocab)}")
    print(f"provenance: {out.provenance}")
    print("top candidates:")
    for resp, prov, s in out.candidates[:5]:
        print(f"  {s:+.4f}  [{prov}]  {decode(resp, corpus.vocab)}")


def cmd_evaluate(args):
    config, corpus, state = _run_state(args)
    data = TrainingData.from_corpus(corpus)
    report = MetricsReport()
    evaluate_state(state, data, corpus.test, report, config.mode, k=args.k, n=args.n,
                   seed=config.seed)
    text = report.to_text()
    if args.out:
        (_out(args) / "metrics.txt").write_text(text)
    print(text, end="")


def cmd_selftest(args):
    return 0 if run_selftest() else 2


def vars_of(config: TrainConfig) -> dict:
    return dict(config.__dict__)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ensgan", description="Adversarial retrieval-generation ensemble at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, config_required=False, out=True, corpus=True, run=False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=config_required, help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode", choices=MODES)
        if corpus:
            sp.add_argument("--corpus", help="corpus directory (default: synthetic from config)")
        if out:
            sp.add_argument("--out", required=not run, help="output directory")
        if run:
            sp.add_argument("--run", required=True, help="advtrain output directory")
        sp.set_defaults(func=fn)
        return sp

    add("gen-corpus", cmd_gen_corpus, "write the synthetic corpus", corpus=False)
    add("build-index", cmd_build_index, "build TF-IDF indices of the retrieval pool")
    add("pretrain-gen", cmd_pretrain_gen, "cross-entropy pretraining of G1")
    sp = add("pretrain-ranker", cmd_pretrain_ranker, "hinge pretraining of the ranker")
    sp.add_argument("--generator", help="G1 checkpoint supplying synthetic negatives")
    sp = add("advtrain", cmd_advtrain, "pretrain then run the minimax game", config_required=True)
    sp.add_argument("--resume", action="store_true", help="continue from the last epoch in --out")
    sp = add("respond", cmd_respond, "answer one query with the trained ensemble", out=False, run=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--ranker", choices=("D", "G2"), default="D")
    sp.add_argument("--k", type=int, default=5, help="retrieved candidates")
    sp.add_argument("--n", type=int, default=2, help="generated candidates")
    sp = add("evaluate", cmd_evaluate, "metrics report on the test partition", run=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--n", type=int, default=2)
    add("selftest", cmd_selftest, "run the fast invariant checks", out=False, corpus=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (ConfigError, ContractError, CheckpointError, NoResponseError, OSError) as exc:
        print(f"ensgan {args.command}: {exc}", file=sys.stderr)
        return 2
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())

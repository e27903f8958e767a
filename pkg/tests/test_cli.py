import pytest

from ensgan.cli import main
from ensgan.corpus import CorpusBundle, decode

TINY_CFG = """\
seed = 4
epochs = 1
n_pairs = 300
m1 = 2
H = 2
M_r = 6
M_p = 2
M_1 = 2
batch_size = 4
pretrain_gen_steps = 5
pretrain_rank_steps = 5
gen_emb_dim = 8
gen_hidden = 8
att_dim = 8
rank_emb_dim = 8
rank_hidden = 8
mlp_dim = 8
max_len = 6
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    return root, cfg


def run(capsys, *argv):
    status = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return status, out, err


def test_selftest_passes(capsys):
    status, out, _ = run(capsys, "selftest")
    assert status == 0
    lines = out.strip().splitlines()
    assert len(lines) == 7 and all(line.startswith("PASS") for line in lines)


def test_advtrain_requires_config(capsys, tmp_path):
    status, _, err = run(capsys, "advtrain", "--out", tmp_path)
    assert status == 1 and "--config" in err


def test_unknown_subcommand_and_bad_flag(capsys):
    assert run(capsys, "launch")[0] == 1
    assert run(capsys, "respond", "--run", "x", "--query", "hi", "--ranker", "G7")[0] == 1


def test_missing_run_is_a_runtime_error(capsys, tmp_path):
    status, _, err = run(capsys, "evaluate", "--run", tmp_path / "nowhere")
    assert status == 2 and "no trained checkpoints" in err


def test_bad_config_is_a_runtime_error(capsys, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("mode = irgan\ng1_steps = 3\n")
    status, _, err = run(capsys, "advtrain", "--config", bad, "--out", tmp_path / "o")
    assert status == 2 and "line 2" in err


def test_pipeline_end_to_end(capsys, workspace):
    root, cfg = workspace
    corpus, idx, gen, rank, run_dir = (root / n for n in ("corpus", "idx", "gen", "rank", "run"))
    assert run(capsys, "gen-corpus", "--config", cfg, "--out", corpus)[0] == 0
    bundle = CorpusBundle.load(corpus)
    assert len(bundle.retrieval) + len(bundle.generation) + len(bundle.ranking) + len(bundle.test) == 300

    assert run(capsys, "build-index", "--corpus", corpus, "--out", idx)[0] == 0
    assert (idx / "by_query.idx").exists() and (idx / "by_response.idx").exists()

    status, out, _ = run(capsys, "pretrain-gen", "--config", cfg, "--corpus", corpus, "--out", gen)
    assert status == 0 and "G1 pretrained: 5 steps" in out
    status, out, _ = run(capsys, "pretrain-ranker", "--config", cfg, "--corpus", corpus,
                         "--generator", gen / "G1.ckpt", "--out", rank)
    assert status == 0 and (rank / "ranker.ckpt").exists()

    status, out, _ = run(capsys, "advtrain", "--config", cfg, "--corpus", corpus, "--out", run_dir)
    assert status == 0 and "trained 1 epoch(s) in ensemblegan mode" in out
    assert (run_dir / "epoch_1" / "D.ckpt").exists() and (run_dir / "metrics.txt").exists()

    query = decode(bundle.test[0].query, bundle.vocab)
    status, out, _ = run(capsys, "respond", "--run", run_dir, "--corpus", corpus, "--query", query)
    assert status == 0
    lines = out.splitlines()
    assert lines[0].startswith("response: ") and lines[1].startswith("provenance: ")
    assert lines[2] == "top candidates:" and len(lines) == 8

    status, out, _ = run(capsys, "evaluate", "--run", run_dir, "--corpus", corpus,
                         "--out", root / "eval")
    assert status == 0 and "ensemblegan" in out and "P@1" in out
    assert (root / "eval" / "metrics.txt").read_text() == (run_dir / "metrics.txt").read_text()


def test_gen_corpus_is_deterministic(capsys, workspace, tmp_path):
    root, cfg = workspace
    for name in ("a", "b"):
        assert run(capsys, "gen-corpus", "--config", cfg, "--out", tmp_path / name)[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files and all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                         for f in files)


def test_seed_flag_changes_the_corpus(capsys, workspace, tmp_path):
    _, cfg = workspace
    run(capsys, "gen-corpus", "--config", cfg, "--out", tmp_path / "a")
    run(capsys, "gen-corpus", "--config", cfg, "--seed", 99, "--out", tmp_path / "b")
    a, b = (CorpusBundle.load(tmp_path / n) for n in "ab")
    assert a.retrieval != b.retrieval

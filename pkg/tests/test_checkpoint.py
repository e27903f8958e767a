import numpy as np
import pytest

from ensgan.checkpoint import checkpoint_load, checkpoint_save, read_checkpoint
from ensgan.errors import CheckpointError, CorruptionError, RoleError, VersionError
from ensgan.ranker import MatchingModel
from ensgan.seq2seq import Seq2SeqModel


@pytest.fixture
def d_path(tmp_path):
    m = MatchingModel(12, 4, 3, 3, seed=1)
    path = tmp_path / "D.ckpt"
    checkpoint_save(m, "D", path, config={"seed": 1}, meta={"epoch": 2},
                    extra={"m.bil.W": np.full((3, 3), 1 / 3)})
    return m, path


def test_round_trip_is_bitwise(d_path):
    m, path = d_path
    ck = read_checkpoint(path, "D")
    assert ck.config == {"seed": 1} and ck.meta == {"epoch": 2}
    assert np.array_equal(ck.extra["m.bil.W"], np.full((3, 3), 1 / 3))
    back = ck.build_model()
    for k, p in m.params.items():
        assert p.data.tobytes() == back.params[k].data.tobytes()


def test_generator_round_trip(tmp_path):
    g = Seq2SeqModel(10, 4, 4, 4, 4, seed=2)
    g.params["out.b"].data[:] = [np.pi, -0.0, 1e-300, np.inf, -np.inf, 5e-324, 1, 2, 3, 4]
    checkpoint_save(g, "G1", tmp_path / "G1.ckpt")
    back = checkpoint_load(tmp_path / "G1.ckpt", "G1")
    assert back.arch == g.arch
    assert all(back.params[k].data.tobytes() == p.data.tobytes() for k, p in g.params.items())


def test_saving_twice_gives_identical_bytes(tmp_path, d_path):
    m, path = d_path
    again = tmp_path / "again.ckpt"
    checkpoint_save(m, "D", again, config={"seed": 1}, meta={"epoch": 2},
                    extra={"m.bil.W": np.full((3, 3), 1 / 3)})
    assert again.read_bytes() == path.read_bytes()


def test_truncated_file_is_corrupt(d_path):
    _, path = d_path
    path.write_bytes(path.read_bytes()[:-200])
    with pytest.raises(CorruptionError):
        read_checkpoint(path)


def test_tampered_value_is_corrupt(d_path):
    _, path = d_path
    text = path.read_text()
    i = text.index("block ") + 40
    flipped = text[:i] + ("0" if text[i] != "0" else "1") + text[i + 1:]
    path.write_text(flipped)
    with pytest.raises(CorruptionError):
        read_checkpoint(path)


def test_binary_garbage_is_corrupt(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"\xff\xfe\x00garbage")
    with pytest.raises(CorruptionError):
        read_checkpoint(path)


def test_other_version_is_rejected(d_path):
    _, path = d_path
    path.write_text(path.read_text().replace("EGCKPT1", "EGCKPT9", 1))
    with pytest.raises(VersionError):
        read_checkpoint(path)


def test_generator_loaded_as_discriminator(tmp_path):
    checkpoint_save(Seq2SeqModel(10, 4, 4, 4, 4), "G1", tmp_path / "G1.ckpt")
    with pytest.raises(RoleError):
        checkpoint_load(tmp_path / "G1.ckpt", "D")
    with pytest.raises(RoleError):
        checkpoint_save(MatchingModel(10, 4, 3, 3), "ranker", tmp_path / "r.ckpt")


def test_errors_share_a_base_class():
    assert all(issubclass(e, CheckpointError) for e in (CorruptionError, VersionError, RoleError))


def test_missing_file():
    with pytest.raises(OSError):
        read_checkpoint("/nonexistent/D.ckpt")

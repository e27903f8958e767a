import dataclasses

import pytest
from hypothesis import given, strategies as st

from ensgan.config import PAPER_PRESET, TrainConfig, config_parse, parse_config_text
from ensgan.errors import ConfigError


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    c = config_parse(path)
    assert c == TrainConfig()
    assert (c.m1, c.H, c.M_r, c.M_p, c.M_1, c.margin) == (5, 4, 20, 5, 5, 1.0)
    assert c.mode == "ensemblegan" and c.g1_steps == c.g2_steps == 1


def test_published_preset_values():
    c = parse_config_text("preset = paper\n")
    assert (c.m1, c.H, c.M_r, c.M_p, c.M_1, c.dropout) == (20, 8, 100, 10, 10, 0.2)
    assert (c.lr_pretrain_gen, c.lr_pretrain_rank) == (0.0002, 0.001)
    assert (c.lr_adv_gen, c.lr_adv_rank) == (2e-6, 1e-5)
    assert c.batch_size == 50 and (c.k_random, c.k_retrieved, c.k_synthetic) == (5, 5, 1)
    assert (c.gen_emb_dim, c.gen_hidden, c.rank_emb_dim, c.rank_hidden) == (300, 512, 200, 200)
    assert c.vocab_size == 30000
    assert all(getattr(c, k) == v for k, v in PAPER_PRESET.items())


def test_file_values_override_preset():
    c = parse_config_text("preset = paper\nm1 = 3\n")
    assert c.m1 == 3 and c.H == 8


def test_comments_and_blank_lines():
    c = parse_config_text("# a comment\n\nseed = 7   # trailing\nreward_baseline = yes\n")
    assert c.seed == 7 and c.reward_baseline is True


def test_irgan_with_generator_steps_is_rejected_at_its_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("mode = irgan\ng1_steps = 3\n")
    assert exc.value.line == 2 and "line 2" in str(exc.value)


def test_mode_gates_apply_unless_set():
    assert parse_config_text("mode = irgan\n").g1_steps == 0
    assert parse_config_text("mode = irgan\n").M_1 == 0
    assert parse_config_text("mode = rankgan\n").g2_steps == 0
    with pytest.raises(ConfigError):
        parse_config_text("mode = rankgan\ng2_steps = 1\n")


@pytest.mark.parametrize("text, line", [
    ("seed = 1\nbogus = 3\n", 2),
    ("m1 = five\n", 1),
    ("seed = 1\n\nmargin = wide\n", 3),
    ("reward_baseline = maybe\n", 1),
    ("seed = 1\nseed = 2\n", 2),
    ("no equals sign\n", 1),
    ("preset = huge\n", 1),
    ("H = 0\n", 1),
    ("mode = gan\n", 1),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.line == line


def test_pool_smaller_than_h_is_rejected():
    with pytest.raises(ConfigError):
        parse_config_text("M_r = 1\nM_p = 1\nM_1 = 1\nH = 4\n")


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 1\nmode = rankgan\n")
    c = config_parse(path, {"seed": 9, "mode": "irgan"})
    assert c.seed == 9 and c.mode == "irgan" and c.g1_steps == 0 and c.g2_steps == 1


def test_with_mode_applies_gates():
    c = TrainConfig(g1_steps=2, g2_steps=2)
    assert c.with_mode("irgan").g1_steps == 0 and c.with_mode("irgan").g2_steps == 2
    assert c.with_mode("rankgan").g2_steps == 0 and c.with_mode("rankgan").g1_steps == 2


_field_values = st.fixed_dictionaries({}, optional={
    "seed": st.integers(0, 10**6), "m1": st.integers(1, 50), "H": st.integers(1, 4),
    "margin": st.floats(0.01, 10.0), "dropout": st.floats(0.0, 0.9),
    "reward_baseline": st.booleans(), "mode": st.sampled_from(["ensemblegan", "rankgan", "irgan"]),
})


@given(_field_values)
def test_text_round_trip(values):
    c = TrainConfig.create(values)
    back = parse_config_text(c.to_text())
    assert back == c
    assert dataclasses.asdict(back) == dataclasses.asdict(c)

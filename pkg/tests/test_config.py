from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scheme.backbone import build_model
from scheme.config import KNOWN_KEYS, RunConfig, emit_config, parse_config, parse_config_text
from scheme.errors import ConfigError, ParseError


def test_mixer_naming_example():
    rc = parse_config_text("mixer.g1=4\nmixer.g2=4\nmixer.E=8")
    cfg = rc.block.mixer_cfg
    assert (cfg.g1, cfg.g2, cfg.E) == (4, 4, 8)
    assert cfg.name == "44-e8"


def test_empty_is_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    assert parse_config(p) == RunConfig()
    assert parse_config_text("# only a comment\n\n   \n") == RunConfig()


def test_staged_validation():
    rc = parse_config_text("mixer.g1=3\nmodel.widths=32\nmodel.depths=1")
    assert rc.block.mixer_cfg.g1 == 3
    with pytest.raises(ConfigError, match="divide"):
        build_model(rc.model, rc.block)


def test_errors_carry_line_numbers():
    with pytest.raises(ParseError, match="line 2: unknown key 'mixer.g3'"):
        parse_config_text("mixer.g1=4\nmixer.g3=4")
    with pytest.raises(ParseError, match="line 1: bad value for train.epochs"):
        parse_config_text("train.epochs=ten")
    with pytest.raises(ParseError, match="line 3: expected key=value"):
        parse_config_text("\n# comment\nnonsense")
    with pytest.raises(ParseError, match="missing required key data.images"):
        parse_config_text("data.source=idx")


def test_inline_comments_and_fractions():
    rc = parse_config_text("mixer.E = 3/2  # rational expansion\ntrain.stop_at_train_acc=0.95")
    assert rc.block.mixer_cfg.E == Fraction(3, 2)
    assert rc.hyper.stop_at_train_acc == 0.95


def test_emit_round_trip_defaults():
    rc = RunConfig()
    text = emit_config(rc)
    assert len(text.splitlines()) == len(KNOWN_KEYS)
    assert parse_config_text(text) == rc
    assert emit_config(parse_config_text(text)) == text


@settings(max_examples=40, deadline=None)
@given(
    lr=st.floats(1e-6, 1.0),
    E=st.fractions(min_value=1, max_value=16, max_denominator=4),
    groups=st.lists(st.integers(1, 8), min_size=1, max_size=4),
    seed=st.integers(0, 2**63),
)
def test_emit_round_trip_random(lr, E, groups, seed):
    text = f"train.lr={lr!r}\nmixer.E={E}\nplan.groups={','.join(map(str, groups))}\nmodel.seed={seed}"
    rc = parse_config_text(text, "plan")
    assert parse_config_text(emit_config(rc), "plan") == rc


def test_with_seed():
    rc = RunConfig().with_seed(9)
    assert rc.model.seed == rc.data.seed == rc.hyper.seed == 9

import pytest
from hypothesis import given
from hypothesis import strategies as st

from volseg.config import format_value, from_flat, parse_lines, parse_value, read_flat, to_flat, write_flat
from volseg.errors import ParseError
from volseg.nn import ModelConfig
from volseg.trainer import TrainConfig


def test_format_values():
    assert format_value(1e-4) == "1e-4"
    assert format_value(1e-5) == "1e-5"
    assert format_value(0.95) == "0.95"
    assert format_value(True) == "true"
    assert format_value((0.85, 1.25)) == "0.85,1.25"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_format_round_trips(x):
    assert parse_value(format_value(x), 0.0) == x


def test_nested_round_trip(tmp_path):
    cfg = TrainConfig(lr_init=2e-4, max_epochs=7)
    cfg.loss.kind = "dice_plus_ce"
    cfg.augment.mirror_axes = (0, 2)
    write_flat(to_flat(cfg), tmp_path / "c.txt")
    back = from_flat(TrainConfig, read_flat(tmp_path / "c.txt"))
    assert back == cfg
    assert "loss.kind" in to_flat(cfg) and "augment.p_mirror" in to_flat(cfg)


def test_parse_errors_name_key():
    with pytest.raises(ParseError, match="max_epochs"):
        from_flat(TrainConfig, {"max_epochs": "many"}, source="x.txt")
    with pytest.raises(ParseError, match="line 2"):
        parse_lines(["a=1", "oops"])
    with pytest.raises(ParseError):
        from_flat(ModelConfig, {"head_mode": "relu"})


def test_comments_and_whitespace():
    assert parse_lines(["# note", "  depth = 3  # trailing", ""]) == {"depth": "3"}

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sparsetune.config import RunConfig, load_config, parse_config, set_value
from sparsetune.cost import Budget
from sparsetune.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.budget() == Budget(None, None, None)
    assert cfg.sweep_ratios == [1.0, 0.5, 0.25, 0.125]
    assert cfg.input_shape() == (3, 16, 16)


def test_parse_values_and_comments():
    cfg = parse_config("""
# model
blocks = 3
budget_mem = 64KB   # trailing comment
budget-mac = 15%
ratio = 0.25
plan_source = l2norm-channels
include_bias = no
sweep_ratios = 1, 0.5
""")
    assert cfg.blocks == 3 and cfg.budget_mem == 65536
    assert cfg.budget() == Budget(65536, None, 0.15)
    assert cfg.ratio == 0.25 and cfg.plan_source == "l2norm-channels"
    assert cfg.include_bias is False and cfg.sweep_ratios == [1.0, 0.5]


@pytest.mark.parametrize("text,expected", [
    ("none", Budget()), ("1000000", Budget(None, 1_000_000)), ("0.1", Budget(None, None, 0.1)),
    ("1.0", Budget(None, None, 1.0)), ("50%", Budget(None, None, 0.5)),
])
def test_budget_mac_forms(text, expected):
    cfg = RunConfig()
    set_value(cfg, "budget_mac", text)
    assert cfg.budget() == expected


@pytest.mark.parametrize("text,line", [
    ("ratio = 1.5", 1), ("blocks = 2\n\nratio = 0", 3), ("nonsense = 1", 1), ("ratio", 1),
    ("budget_mem = -4", 1), ("budget_mac = 150%", 1), ("plan_source = magic", 1), ("iters = two", 1),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_round_trip_is_fixed_point():
    cfg = parse_config("budget_mem = 1MB\nbudget_mac = 0.2\nseed = 11\nplan_file = p.json\ncheckpoint = c.ttck\n")
    text = cfg.dumps()
    again = parse_config(text)
    assert again.dumps() == text
    assert again.config_hash() == cfg.config_hash()


@given(st.integers(1, 10 ** 9), st.floats(0.01, 1.0), st.integers(0, 2 ** 31))
def test_round_trip_property(mem, ratio, seed):
    cfg = RunConfig(budget_mem=mem, ratio=ratio, seed=seed)
    assert parse_config(cfg.dumps()).resolved() == cfg.resolved()


def test_hash_ignores_execution_settings():
    a = RunConfig()
    b = RunConfig(jobs=4, out_dir="elsewhere")
    assert a.config_hash() == b.config_hash()
    assert "jobs" not in a.resolved()
    assert a.config_hash() != RunConfig(seed=1).config_hash()
    assert len(a.config_hash()) == 16


def test_load_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("ratio = 0.25\niters = 7\n")
    cfg = load_config(str(path), {"ratio": 0.125, "iters": None})
    assert cfg.ratio == 0.125 and cfg.iters == 7
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.cfg"))

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cacheprobe.config import ConfigError, ExperimentConfig, load_config, parse_config


def test_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    assert (cfg.cache_lines, cfg.associativity, cfg.line_size) == (32, 8, 64)


def test_parse_values_and_comments():
    cfg = parse_config("# geometry\ncache_lines = 64  # more\n\nlr = 0.01\nstream_base = 0x5000\n"
                       "policies = lru, model\n")
    assert cfg.cache_lines == 64 and cfg.lr == 0.01 and cfg.stream_base == 0x5000
    assert cfg.policies == "lru, model"


@pytest.mark.parametrize("text, message", [
    ("colour = blue\n", "unknown key"),
    ("seed = 1\nseed = 2\n", "duplicate"),
    ("seed 1\n", "expected"),
    ("epochs = many\n", "cannot parse"),
])
def test_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


def test_policy_list_orders_belady_first():
    cfg = ExperimentConfig(policies="lru,model,belady,lru")
    assert cfg.policy_list() == ["belady", "lru", "model"]
    with pytest.raises(ConfigError, match="fifo"):
        ExperimentConfig(policies="lru,fifo").policy_list()


@given(st.integers(1, 10**6), st.floats(1e-6, 10.0), st.sampled_from(["adam", "sgd"]))
def test_text_round_trip(epochs, lr, optimizer):
    cfg = ExperimentConfig(epochs=epochs, lr=lr, optimizer=optimizer)
    assert parse_config(cfg.to_text()) == cfg


def test_load_config(tmp_path):
    (tmp_path / "run.cfg").write_text("epochs = 3\n")
    assert load_config(tmp_path / "run.cfg").epochs == 3
    assert ExperimentConfig().replace(seed=4).seed == 4

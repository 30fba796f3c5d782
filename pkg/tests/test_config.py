import pytest

from hyperpelt.config import C1, T5_BASE, ModelConfig, format_config, load_config, parse_config_text
from hyperpelt.errors import ContractError, FormatError


def test_desk_defaults():
    assert (C1.n_layers, C1.d_model, C1.n_heads, C1.d_ff, C1.vocab_size) == (2, 32, 4, 64, 64)
    assert (C1.prefix_len, C1.d_task, C1.d_hyper_mid, C1.d_hyper, C1.d_adapter) == (4, 16, 12, 8, 8)
    assert (C1.d_visual, C1.n_tasks, C1.d_head) == (16, 3, 8)


def test_large_preset_shapes():
    assert (T5_BASE.n_layers, T5_BASE.d_model, T5_BASE.prefix_len, T5_BASE.d_hyper) == (12, 768, 49, 64)


def test_parse_model_and_train_keys():
    cfg, train = parse_config_text(
        "# comment\nd_model = 64\nd_ff=128\nabs_positions = yes\n"
        "lambda_init = 0.25\nmode = vl_hyperpelt\nlearning_rate = 3e-3  # trailing\n"
        "optimizer = adam\n")
    assert cfg.d_model == 64 and cfg.d_ff == 128 and cfg.abs_positions is True
    assert cfg.lambda_init == 0.25 and cfg.visual
    assert train == {"learning_rate": 3e-3, "optimizer": "adam"}


def test_round_trip_through_text():
    cfg = C1.replace(d_model=48, n_heads=6, seed=9, abs_positions=True)
    back, extra = parse_config_text(format_config(cfg, {"steps": 10}))
    assert back == cfg and extra == {"steps": 10}


def test_load_from_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("n_layers = 3\n")
    assert load_config(path)[0].n_layers == 3


@pytest.mark.parametrize("text, match", [
    ("d_model 64", "line 1"),
    ("colour = red", "unknown key"),
    ("d_model = wide", "bad value"),
    ("abs_positions = maybe", "bad value"),
])
def test_format_errors(text, match):
    with pytest.raises(FormatError, match=match):
        parse_config_text(text)


@pytest.mark.parametrize("changes", [
    {"d_model": 30},            # not divisible by 4 heads
    {"d_adapter": 64},
    {"n_layers": 0},
    {"mode": "lora"},
    {"ln_eps": 0.0},
])
def test_invalid_configs(changes):
    with pytest.raises(ContractError):
        C1.replace(**changes)


def test_config_is_immutable():
    with pytest.raises(Exception):
        C1.d_model = 8
    assert isinstance(C1.replace(), ModelConfig)

from pathlib import Path

import pytest

from orderlab.config import RunConfig, load_config, parse_config
from orderlab.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.adam.lr == 1e-3 and cfg.store.moment_derivatives is False


def test_unknown_key_reports_line_and_column():
    text = "seed = 1\n\n[adam]\nlr = 0.01\n  bogus = 3\n"
    with pytest.raises(ConfigError, match=r"adam\.bogus.*line 5, column 3"):
        parse_config(text)


def test_unknown_section():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("seed = 1\n[nope]\nx = 1\n")


def test_type_errors():
    with pytest.raises(ConfigError, match="integer"):
        parse_config("[data]\nT = 2.5\n")
    with pytest.raises(ConfigError, match="true or false"):
        parse_config("[store]\ncompress = 1\n")
    with pytest.raises(ConfigError, match="number"):
        parse_config('[adam]\nlr = "fast"\n')
    with pytest.raises(ConfigError, match="seed"):
        parse_config("seed = true\n")


def test_toml_syntax_error():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("seed = = 1\n")


def test_cross_field_validation():
    with pytest.raises(ConfigError):
        parse_config('[model]\nkind = "mlp"\n')
    with pytest.raises(ConfigError):
        parse_config('[data]\nsource = "files"\n')


def test_integer_accepted_for_float():
    assert parse_config("[adam]\nlr = 1\n").adam.lr == 1.0


def test_digest_ignores_out_but_not_settings():
    a = parse_config('out = "a"\n')
    b = parse_config('out = "b"\n')
    c = parse_config("seed = 3\n")
    assert a.digest() == b.digest() != c.digest()


def test_sub_seeds_are_labelled_and_stable():
    cfg = RunConfig(seed=4)
    assert cfg.sub_seed("data") == RunConfig(seed=4).sub_seed("data")
    assert cfg.sub_seed("data") != cfg.sub_seed("init")
    assert cfg.with_seed(5).sub_seed("data") != cfg.sub_seed("data")


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "run.toml").write_text('[data]\nsource = "files"\npaths = ["docs/a.txt"]\n')
    cfg = load_config(sub / "run.toml")
    assert cfg.data.paths == (str(sub / "docs/a.txt"),)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.toml")


@pytest.mark.parametrize("name", ["tiny_lm.toml", "mlp.toml"])
def test_bundled_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.data.T == 8

import pytest
from hypothesis import given, strategies as st

from moonsparse.config import ConfigError, load_config, parse_config_text

MINIMAL = "seed = 1\ndataset.kind = gm\ntrain.epochs = 4\ntrain.loss = moon\n"


def test_minimal_config_fills_defaults():
    rc = parse_config_text(MINIMAL)
    assert rc["seed"] == 1 and rc["moon.w_f"] == 1.0 and rc["moon.r"] == 64.0
    assert rc["model.hidden"] == (300, 100)


def test_comments_and_whitespace():
    rc = parse_config_text("# header\n\n" + MINIMAL.replace("seed = 1", "  seed=1   # trailing"))
    assert rc["seed"] == 1


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys: moon.lambda"):
        parse_config_text(MINIMAL + "moon.lambda = 3\n")


def test_all_missing_required_keys_listed():
    with pytest.raises(ConfigError) as info:
        parse_config_text("dataset.kind = gm\n")
    assert "seed" in str(info.value) and "train.epochs" in str(info.value) and "train.loss" in str(info.value)


def test_bad_values_and_choices():
    with pytest.raises(ConfigError, match="train.epochs"):
        parse_config_text(MINIMAL.replace("train.epochs = 4", "train.epochs = four"))
    with pytest.raises(ConfigError, match="train.loss"):
        parse_config_text(MINIMAL.replace("moon", "focal"))
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text(MINIMAL + "seed = 2\n")
    with pytest.raises(ConfigError, match="expected key = value"):
        parse_config_text(MINIMAL + "just words\n")


def test_invalid_hyperparameters_surface_as_config_errors():
    rc = parse_config_text(MINIMAL + "moon.t_e = 9\n")
    with pytest.raises(ConfigError):
        rc.train_config()


def test_digest_covers_identity_keys_only():
    a = parse_config_text(MINIMAL)
    assert a.digest() == parse_config_text(MINIMAL + "moon.w_f = 0\n").digest()
    assert a.digest() == parse_config_text(MINIMAL.replace("train.loss = moon", "train.loss = cross-entropy")).digest()
    assert a.digest() != parse_config_text(MINIMAL.replace("seed = 1", "seed = 2")).digest()
    assert a.digest() != parse_config_text(MINIMAL + "model.hidden = 8,8\n").digest()


@given(st.floats(0.0, 100.0), st.integers(1, 50))
def test_canonical_text_round_trips(wf, epochs):
    rc = parse_config_text(MINIMAL.replace("train.epochs = 4", f"train.epochs = {epochs}") + f"moon.w_f = {wf!r}\n")
    again = parse_config_text(rc.canonical_text())
    assert again.values == rc.values


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")

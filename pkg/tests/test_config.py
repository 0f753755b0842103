import pytest

from madsep.config import RunConfig, RunConfigError, load, parse_overrides, parse_text


def test_defaults():
    cfg = load()
    assert (cfg.variant, cfg.L_enc, cfg.C_o, cfg.T, cfg.L, cfg.N_tr) == ("rnn", 7, 256, 60, 10, 744)
    assert cfg.F == 2049
    assert cfg.masker_config().pool_dec == (1, 8)


def test_flat_file_with_comments(tmp_path):
    p = tmp_path / "a.ini"
    p.write_text("# comment\nvariant = dws-cnn\n; other comment\nL_enc=9\nlr = 3e-4\n")
    cfg = load(p)
    assert cfg.variant == "dws-cnn" and cfg.L_enc == 9 and cfg.lr == 3e-4


def test_precedence_cli_over_file_over_default(tmp_path):
    p = tmp_path / "a.ini"
    p.write_text("epochs = 5\nbatch = 2\n")
    cfg = load(p, parse_overrides(["epochs=7"]))
    assert cfg.epochs == 7 and cfg.batch == 2 and cfg.T == 60


def test_unknown_key_lists_valid_keys():
    with pytest.raises(RunConfigError, match="unknown key 'epoch'.*valid keys: variant"):
        parse_text("epoch = 3")


def test_sections_rejected():
    with pytest.raises(RunConfigError, match="sections"):
        parse_text("[train]\nepochs = 3")


def test_type_errors():
    with pytest.raises(RunConfigError, match="not a valid int"):
        parse_text("epochs = many")
    with pytest.raises(RunConfigError, match="not a valid float"):
        parse_text("lr = fast")


def test_bad_override_syntax():
    with pytest.raises(RunConfigError, match="key=value"):
        parse_overrides(["epochs"])


def test_missing_file(tmp_path):
    with pytest.raises(RunConfigError, match="cannot read"):
        load(tmp_path / "nope.ini")


def test_architecture_validated_early():
    with pytest.raises(ValueError):
        load(overrides={"L": 3})
    with pytest.raises(RunConfigError):
        load(overrides={"batch": 0})


def test_echo_round_trips():
    cfg = load(overrides={"lr": 0.002, "variant": "dws-cnn", "data": "x/y"})
    again = RunConfig(**parse_text(cfg.echo()))
    assert again == cfg


def test_inline_comments():
    assert parse_text("variant = dws-cnn   # rnn | dws-cnn\nN_tr = 32 ; bands") == {"variant": "dws-cnn", "N_tr": 32}

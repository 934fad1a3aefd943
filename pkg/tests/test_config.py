import pytest

from tggat.config import Config, ConfigError, dump_config, load_config, parse_config, profile


def test_desk_defaults():
    cfg = Config()
    assert cfg.weights.kappas == (1.0, 3.0, 1.5)
    assert cfg.weights.lambdas == (0.2, 0.1, 0.25)
    assert (cfg.d_model, cfg.grid, cfg.max_iterations) == (64, 8, 5000)


def test_paper_profile():
    cfg = profile("paper")
    assert cfg.d_model == 768 and cfg.n_heads == 12
    assert (cfg.n_mhca_layers, cfg.n_text_layers, cfg.n_gat_layers) == (1, 9, 2)
    assert cfg.learning_rate == 1e-5 and cfg.batch_size == 4 and cfg.aug_p == 0.4
    assert cfg.weights.kappas == (1.0, 3.0, 1.5)


def test_parse_overrides_and_omitted_weights_keep_defaults():
    cfg = parse_config("profile = desk\nd_model = 32  # narrower\nteacher_only = yes\nkappa2 = 2.5\n")
    assert cfg.d_model == 32 and cfg.teacher_only and cfg.kappa2 == 2.5
    assert (cfg.kappa1, cfg.kappa3) == (1.0, 1.5)
    assert cfg.weights.lambdas == (0.2, 0.1, 0.25)


@pytest.mark.parametrize("cfg", [Config(), profile("paper"), Config(d_model=32, lambda2=0.0, fov=1.3, aug_blur=False)])
def test_dump_parse_round_trip(cfg, tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert Config.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text", ["d_model 32", "colour = red", "d_model = wide", "teacher_only = maybe",
                                  "profile = huge", "d_model = 30\nn_heads = 4", "kappa1 = -1", "aug_p = 2"])
def test_bad_configs_raise(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_dict_key():
    with pytest.raises(ConfigError):
        Config.from_dict({"d_model": 64, "depth": 3})

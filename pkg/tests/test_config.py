import pytest

from suede.config import ExperimentConfig, load_config, parse_config
from suede.errors import ConfigError


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert (cfg.n_experts, cfg.k) == (4, 2)
    assert (cfg.alpha, cfg.beta, cfg.gamma) == (1.0, 1e-3, 1e-2)
    assert cfg.lr == 1e-3 and cfg.has_sue


def test_parse_types_and_ranges():
    cfg = parse_config(
        """
        # comment
        seed = 0xff
        image_sue_layers = 0-2, 5
        text_sue_layers =
        shared_expert = no
        beta = 0   # inline comment
        freeze = gate, routed
        """
    )
    assert cfg.seed == 255
    assert cfg.image_sue_layers == (0, 1, 2, 5)
    assert cfg.text_sue_layers == ()
    assert cfg.shared_expert is False and cfg.beta == 0.0
    assert cfg.freeze == ("gate", "routed")


def test_dumps_round_trip():
    cfg = ExperimentConfig(seed=2**64 - 1, image_sue_layers=(1, 3), freeze=("gate",), shared_expert=False)
    assert parse_config(cfg.dumps()) == cfg
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_overrides_win(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("seed = 3\nprotocol = p2.1\n")
    cfg = load_config(p, seed=9, protocol=None)
    assert cfg.seed == 9 and cfg.protocol == "p2.1"


@pytest.mark.parametrize(
    "text",
    [
        "nonsense = 1",
        "seed 3",
        "seed = -1",
        f"seed = {2**64}",
        "k = 5",
        "k = 0",
        "gamma = -0.01",
        "image_sue_layers = 6",
        "image_sue_layers = 1,1",
        "protocol = p3",
        "shared_expert = maybe",
        "freeze = everything",
        "head = linear\ntext_sue_layers = 0",
        "dim = 65",
        "patch = 5",
        "threshold_rule = median",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_unknown_dict_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"lr": 0.1, "momentum": 0.9})

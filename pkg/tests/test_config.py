import pytest

from garnet.config import (
    DESK,
    FULL_TRAIN,
    SMALL,
    TINY,
    IMBTrainConfig,
    LossWeights,
    ModelConfig,
    TrainConfig,
    format_config,
    load_config,
    parse_config_text,
)
from garnet.errors import ContractError


def test_parse_example():
    cfg = parse_config_text(
        """
        # comment
        strategy = faset   # trailing
        n_max = 5
        lr_halving_epochs = 3, 7
        stage1_epochs = 4
        gamma = 0.25
        """
    )
    assert cfg.strategy == "faset" and cfg.n_max == 5
    assert cfg.lr_halving_epochs == (3, 7) and cfg.stage1 == 4
    assert cfg.loss == LossWeights(gamma=0.25)


def test_format_parse_round_trip(tmp_path):
    cfg = TrainConfig(strategy="pix2vox", epochs=9, bce_only_epochs=3, loss=LossWeights(mu=0.1))
    text = format_config(cfg)
    assert "mu = 0.1" in text and "stage1_epochs = None" in text
    path = tmp_path / "c.txt"
    path.write_text(text)
    assert load_config(path) == cfg
    assert parse_config_text(format_config(FULL_TRAIN)) == FULL_TRAIN


@pytest.mark.parametrize(
    "text",
    ["nope = 1", "n_max", "n_max = 0", "strategy = best", "bce_only_epochs = 99", "alpha = -1", "base_lr = 0"],
)
def test_bad_config(text):
    with pytest.raises((ContractError, ValueError)):
        parse_config_text(text)


def test_stage1_default():
    assert TrainConfig(epochs=11, bce_only_epochs=0).stage1 == 5
    assert TrainConfig(epochs=11, bce_only_epochs=0, stage1_epochs=0).stage1 == 0


def test_model_configs():
    assert DESK.volume_size == 32 and TINY.volume_size == 16 and SMALL.volume_size == 32
    assert DESK.feature_channels == 5
    with pytest.raises(ContractError):
        ModelConfig(image_size=30)
    assert IMBTrainConfig().epochs == 15

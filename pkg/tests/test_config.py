import json

import pytest

from padtok.config import (ExperimentConfig, config_from_dict, load_config, reference_scale_config,
                           parse_config, pyramid_capacity, save_config)
from padtok.errors import ConfigError, ValidationError


def test_desk_defaults_validate():
    c = ExperimentConfig().validate()
    assert (c.num_tokens_n, c.pad_tokens_m, c.dropout_step) == (16, 14, 2)
    assert c.grid_length == 16
    assert c.total_tokens == 30
    assert c.k_min == 2
    assert c.decoder_feature_layer == 2


def test_reference_scale_validates():
    c = reference_scale_config()
    assert (c.num_tokens_n, c.pad_tokens_m, c.dropout_step) == (256, 224, 32)
    assert (c.lambda_start, c.lambda_end) == (2.0, 0.5)
    assert c.grid_length == 256
    assert (c.optimizer.beta1, c.optimizer.beta2) == (0.9, 0.95)


def test_divisibility_violation_names_field():
    with pytest.raises(ValidationError) as info:
        ExperimentConfig(num_tokens_n=15, dropout_step=2).validate()
    assert info.value.field == "num_tokens_n"


@pytest.mark.parametrize("changes,field", [
    ({"pad_tokens_m": -1}, "pad_tokens_m"),
    ({"lambda_start": 0.4, "lambda_end": 0.5}, "lambda_start"),
    ({"lambda_end": 0.0, "lambda_start": 1.0}, "lambda_end"),
    ({"image_size": 33}, "downsample_f"),
    ({"cfg": {"free_fraction": 1.0}}, "cfg.free_fraction"),
    ({"embed_dim": 30}, "embed_dim"),
    ({"feature_layer": 9}, "feature_layer"),
    ({"num_tokens_n": 40}, "num_tokens_n"),
    ({"teacher": {"kind": "feature-file"}}, "teacher.path"),
])
def test_invariant_violations(changes, field):
    with pytest.raises(ValidationError) as info:
        config_from_dict(changes)
    assert info.value.field == field


def test_unknown_and_mistyped_keys():
    with pytest.raises(ValidationError) as info:
        config_from_dict({"num_tokens": 16})
    assert info.value.field == "num_tokens"
    with pytest.raises(ValidationError) as info:
        config_from_dict({"train": {"steps": "many"}})
    assert info.value.field == "train.steps"
    with pytest.raises(ValidationError):
        config_from_dict({"codebook_l2_norm": 1})


def test_int_accepted_for_float_field():
    assert config_from_dict({"lambda_start": 3}).lambda_start == 3.0


def test_parse_error_has_line_context():
    text = '{\n  "seed": 1,\n  "image_size": 32,,\n}'
    with pytest.raises(ConfigError) as info:
        parse_config(text, "bad.json")
    msg = str(info.value)
    assert msg.startswith("bad.json:3:")
    assert '"image_size": 32,,' in msg


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")


def test_round_trip(tmp_path):
    c = config_from_dict({"seed": 7, "pad_tokens_m": 0, "train": {"steps": 12},
                          "ar": {"optimizer": {"learning_rate": 3e-4}}})
    save_config(c, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == c
    assert json.loads(again.to_json()) == json.loads(c.to_json())
    assert again.phase_optimizer("ar").learning_rate == 3e-4
    assert again.phase_optimizer("train").learning_rate == c.optimizer.learning_rate


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    desk = load_config(root / "desk.json")
    ref = load_config(root / "reference_scale.json")
    assert desk.total_tokens == 30
    assert ref.total_tokens == 480


@pytest.mark.parametrize("side,cap", [(1, 1), (2, 5), (4, 21), (16, 341)])
def test_pyramid_capacity(side, cap):
    assert pyramid_capacity(side) == cap

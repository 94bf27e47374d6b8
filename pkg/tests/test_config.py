import io
import json

import pytest

from estinet.config import (
    ConfigError,
    EntropyMode,
    ExperimentConfigParser,
    ModelKind,
    Procedure,
    RewardFormula,
    TrainingConfig,
)


def _parse(config_dict):
    return ExperimentConfigParser.from_json(io.StringIO(json.dumps(config_dict)))


def test_task_defaults_fill_missing_training_fields():
    config = _parse({"task": "image_lookup", "training": {"batch_size": 10}})

    assert config.model == ModelKind.ESTINET
    assert config.training.procedure == Procedure.HYBRID
    assert config.training.label_smoothing == 0.6
    assert config.training.entropy_lambda == 0.1
    assert config.training.batch_size == 10


def test_enums_and_nested_sections():
    config = _parse(
        {
            "task": "image_addition",
            "model": "rl",
            "training": {"entropy_mode": "maximize", "gumbel_temperature": None},
            "dataset": {"k": 2, "test_k": 100},
            "evaluation": {"modes": ["train", "test"]},
            "rl": {"reward_formula": "signed_sum", "updates": 10},
        }
    )

    assert config.model == ModelKind.RL
    assert config.training.entropy_mode == EntropyMode.MAXIMIZE
    assert config.training.gumbel_temperature is None
    assert config.dataset.test_k == 100
    assert config.rl.reward_formula == RewardFormula.SIGNED_SUM


def test_baseline_forces_end_to_end():
    config = _parse(
        {"task": "text_logic", "model": "baseline", "training": {"procedure": "online"}}
    )
    assert config.training.procedure == Procedure.END_TO_END


@pytest.mark.parametrize(
    "config_dict, path",
    [
        ({}, "task"),
        ({"task": "chess"}, "task"),
        ({"task": "tll", "colour": 1}, "colour"),
        ({"task": "tll", "training": {"beta": "high"}}, "training.beta"),
        ({"task": "tll", "training": {"batch_size": 2.5}}, "training.batch_size"),
        ({"task": "tll", "training": {"seed": True}}, "training.seed"),
        ({"task": "tll", "training": {"procedure": "sometimes"}}, "training.procedure"),
        ({"task": "tll", "training": {"unknown": 1}}, "training.unknown"),
        ({"task": "tll", "training": {"beta": -1.0}}, "training"),
        ({"task": "tll", "training": {"label_smoothing": 1.5}}, "training"),
        ({"task": "tll", "dataset": {"k": 0}}, "dataset"),
        ({"task": "tll", "evaluation": {"modes": "test"}}, "evaluation.modes"),
        ({"task": "tll", "evaluation": {"modes": ["valid"]}}, "evaluation"),
        ({"task": "tll", "rl": []}, "rl"),
        ({"task": "tll", "repeats": 0}, "<root>"),
        ({"task": "tll", "model": "transformer"}, "model"),
    ],
)
def test_invalid_configs_name_the_field(config_dict, path):
    with pytest.raises(ConfigError) as excinfo:
        _parse(config_dict)
    assert excinfo.value.path == path


def test_invalid_json():
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfigParser.from_json(io.StringIO("{task: tll"))


def test_config_hash_ignores_output_dir_and_repeats():
    first = _parse({"task": "tll", "output_dir": "a", "repeats": 1})
    second = _parse({"task": "tll", "output_dir": "b", "repeats": 3})
    third = _parse({"task": "tll", "training": {"beta": 0.5}})

    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != third.config_hash()
    assert len(first.config_hash()) == 64


def test_config_hash_is_stable_across_key_order():
    first = _parse({"task": "tll", "training": {"beta": 0.5, "seed": 3}})
    second = _parse({"training": {"seed": 3, "beta": 0.5}, "task": "tll"})
    assert first.config_hash() == second.config_hash()


def test_with_seed_changes_only_the_seed():
    config = _parse({"task": "tll"})
    reseeded = config.with_seed(99)

    assert reseeded.training.seed == 99
    assert config.training.seed == 42
    assert reseeded.dataset == config.dataset


def test_training_config_validation():
    assert TrainingConfig().adam_betas == (0.9, 0.999)
    with pytest.raises(ValueError, match="min_epochs"):
        TrainingConfig(min_epochs=6, max_epochs=5)
    with pytest.raises(ValueError):
        TrainingConfig(gumbel_temperature=0.0)
    assert TrainingConfig(procedure="online").procedure == Procedure.ONLINE


def test_to_dict_serializes_enums():
    config = _parse({"task": "text_logic"})
    as_dict = config.to_dict()

    assert as_dict["model"] == "estinet"
    assert as_dict["training"]["procedure"] == "online"
    json.dumps(as_dict)
